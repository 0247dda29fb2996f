//! Text preprocessing, vocabularies, triple files and the synthetic corpus
//! generator that stands in for a real parallel corpus plus a baseline
//! translation system.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const NUM: TokenId = 2;
pub const NUM_SPECIALS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NUM_TOKEN: &str = "<num>";

const DETACHED: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases, splits on whitespace, detaches leading/trailing punctuation and
/// maps numbers to `<num>`.
pub fn preprocess_line(raw: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for word in raw.split_whitespace() {
        let word = word.to_lowercase();
        if is_number(&word) {
            out.push(NUM_TOKEN.to_string());
            continue;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && DETACHED.contains(&chars[start]) {
            start += 1;
        }
        while end > start && DETACHED.contains(&chars[end - 1]) {
            end -= 1;
        }
        let core: String = chars[start..end].iter().collect();
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if !core.is_empty() {
            if is_number(&core) {
                out.push(NUM_TOKEN.to_string());
            } else {
                out.push(core);
            }
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    if out.is_empty() {
        return Err(Error::EmptyLine);
    }
    Ok(out)
}

fn is_number(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
        && token.chars().next().is_some_and(|c| c.is_ascii_digit())
        && token.chars().last().is_some_and(|c| c.is_ascii_digit())
}

/// Bijective token/id map with `<pad>`, `<unk>` and `<num>` at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::specials_only()
    }
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in [PAD_TOKEN, UNK_TOKEN, NUM_TOKEN] {
            vocab.push(tok.to_string());
        }
        vocab
    }

    /// Builds a vocabulary from tokens listed in id order after the specials.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::specials_only();
        for tok in tokens {
            let tok = tok.into();
            if vocab.token_to_id.contains_key(&tok) {
                return Err(Error::Spec(format!("duplicate vocabulary token {tok:?}")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.token_to_id.insert(tok.clone(), self.id_to_token.len());
        self.id_to_token.push(tok);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfVocab {
                id,
                size: self.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Sentence> {
        let ids = tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .map(|id| if id == PAD { UNK } else { id })
            .collect();
        Sentence::new(ids)
    }

    pub fn decode(&self, sentence: &[TokenId]) -> Result<Vec<String>> {
        sentence
            .iter()
            .map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        let specials = [PAD_TOKEN, UNK_TOKEN, NUM_TOKEN];
        for (i, special) in specials.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        Vocabulary::from_tokens(lines[NUM_SPECIALS..].iter().copied()).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Keeps tokens seen at least `min_count` times, most frequent first (ties
/// lexicographic), until the vocabulary reaches `max_size` entries.
pub fn build_vocab<S: AsRef<str>>(lines: &[Vec<S>], min_count: usize, max_size: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for tok in line {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(tok, c)| c >= min_count.max(1) && ![PAD_TOKEN, UNK_TOKEN, NUM_TOKEN].contains(&tok))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let room = max_size.saturating_sub(NUM_SPECIALS);
    Vocabulary::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t))
        .expect("ranked tokens are distinct")
}

/// A non-empty sequence of token ids that never contains `<pad>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<TokenId>);

impl Sentence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyLine);
        }
        if ids.contains(&PAD) {
            return Err(Error::Spec("sentence contains the padding id".into()));
        }
        Ok(Sentence(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// Replaces the token at `pos`, returning the old one.
    pub fn substitute(&mut self, pos: usize, token: TokenId) -> TokenId {
        assert_ne!(token, PAD, "padding id cannot be substituted into a sentence");
        std::mem::replace(&mut self.0[pos], token)
    }

    pub fn check_vocab(&self, size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= size) {
            Some(&id) => Err(Error::IndexOutOfVocab { id, size }),
            None => Ok(()),
        }
    }
}

impl AsRef<[TokenId]> for Sentence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

impl Deref for Sentence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

/// Source, guess and reference of one training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub x: Sentence,
    pub y_g: Sentence,
    pub y_ref: Sentence,
}

/// A triple as tokens, the unit stored in triple files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTriple {
    pub source: Vec<String>,
    pub guess: Vec<String>,
    pub reference: Vec<String>,
}

impl TextTriple {
    pub fn encode(&self, source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> Result<Triple> {
        Ok(Triple {
            x: source_vocab.encode(&self.source)?,
            y_g: target_vocab.encode(&self.guess)?,
            y_ref: target_vocab.encode(&self.reference)?,
        })
    }

    pub fn decode(triple: &Triple, source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> Result<Self> {
        Ok(TextTriple {
            source: source_vocab.decode(&triple.x)?,
            guess: target_vocab.decode(&triple.y_g)?,
            reference: target_vocab.decode(&triple.y_ref)?,
        })
    }
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<TextTriple>> {
    let text = fs::read_to_string(path)?;
    parse_triples(&text)
}

pub fn parse_triples(text: &str) -> Result<Vec<TextTriple>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let mut parts = fields.iter().map(|f| {
                let toks: Vec<String> = f.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
                if toks.is_empty() {
                    Err(Error::Parse {
                        line: line_no,
                        message: "empty field".into(),
                    })
                } else {
                    Ok(toks)
                }
            });
            Ok(TextTriple {
                source: parts.next().unwrap()?,
                guess: parts.next().unwrap()?,
                reference: parts.next().unwrap()?,
            })
        })
        .collect()
}

pub fn write_triples(path: impl AsRef<Path>, triples: &[TextTriple]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.source.join(" "), t.guess.join(" "), t.reference.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic parallel corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub sentence_length_range: (usize, usize),
    pub dictionary_noise: f64,
    pub reorder_window: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            source_vocab_size: 100,
            target_vocab_size: 100,
            sentence_length_range: (4, 10),
            dictionary_noise: 0.1,
            reorder_window: 1,
            seed: 1,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_length_range;
        if self.source_vocab_size < 4 || self.target_vocab_size < 4 {
            return Err(Error::Spec("vocabulary sizes must be at least 4".into()));
        }
        if lo < 1 || lo > hi {
            return Err(Error::Spec(format!("invalid sentence length range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.dictionary_noise) {
            return Err(Error::Spec("dictionary_noise must lie in [0, 1]".into()));
        }
        let (src, tgt) = (self.source_vocab_size - NUM_SPECIALS, self.target_vocab_size - NUM_SPECIALS);
        if tgt < src {
            return Err(Error::Spec(format!(
                "target vocabulary ({tgt} content tokens) too small for an injective dictionary over {src} source tokens"
            )));
        }
        if self.dictionary_noise > 0.0 && tgt < 2 {
            return Err(Error::Spec("alternate translations need at least 2 target tokens".into()));
        }
        Ok(())
    }

    /// Token names of the generated vocabularies, ids matching the generator.
    pub fn vocabularies(&self) -> (Vocabulary, Vocabulary) {
        let src = (NUM_SPECIALS..self.source_vocab_size).map(|i| format!("src{i}"));
        let tgt = (NUM_SPECIALS..self.target_vocab_size).map(|i| format!("tgt{i}"));
        (
            Vocabulary::from_tokens(src).expect("distinct names"),
            Vocabulary::from_tokens(tgt).expect("distinct names"),
        )
    }
}

/// Generates `n` (source, reference) pairs. Source tokens follow a Zipf law
/// over the content ids; each source token maps through a fixed injective
/// dictionary, switching to a fixed alternate translation with probability
/// `dictionary_noise`; targets are then shuffled inside consecutive chunks of
/// `reorder_window + 1` positions.
pub fn generate_toy_corpus(spec: &ToySpec, n: usize) -> Result<Vec<(Sentence, Sentence)>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let src_ids: Vec<TokenId> = (NUM_SPECIALS..spec.source_vocab_size).collect();
    let mut tgt_ids: Vec<TokenId> = (NUM_SPECIALS..spec.target_vocab_size).collect();
    tgt_ids.shuffle(&mut rng);

    let primary: Vec<TokenId> = tgt_ids[..src_ids.len()].to_vec();
    let alternate: Vec<TokenId> = primary
        .iter()
        .map(|&p| {
            if tgt_ids.len() < 2 {
                return p;
            }
            loop {
                let cand = *tgt_ids.choose(&mut rng).unwrap();
                if cand != p {
                    break cand;
                }
            }
        })
        .collect();

    let weights: Vec<f64> = (0..src_ids.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    let (lo, hi) = spec.sentence_length_range;

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(lo..=hi);
        let ranks: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng)).collect();
        let x: Vec<TokenId> = ranks.iter().map(|&r| src_ids[r]).collect();
        let mut y: Vec<TokenId> = ranks
            .iter()
            .map(|&r| {
                if spec.dictionary_noise > 0.0 && rng.gen::<f64>() < spec.dictionary_noise {
                    alternate[r]
                } else {
                    primary[r]
                }
            })
            .collect();
        if spec.reorder_window > 0 {
            for chunk in y.chunks_mut(spec.reorder_window + 1) {
                chunk.shuffle(&mut rng);
            }
        }
        pairs.push((Sentence::new(x)?, Sentence::new(y)?));
    }
    Ok(pairs)
}

/// Substitution noise applied to references to produce guesses.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub substitution_rate: f64,
    pub confusion_size: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            substitution_rate: 0.32,
            confusion_size: 3,
            seed: 2,
        }
    }
}

/// Reference corrupter with one fixed confusion set per target token type.
///
/// A substituted position draws uniformly from the confusion members absent
/// from the reference, falling back to the whole set when all are present.
/// This keeps the share of guess tokens found in the reference close to
/// `1 - substitution_rate`.
#[derive(Debug, Clone)]
pub struct Corrupter {
    noise: NoiseSpec,
    confusions: Vec<Vec<TokenId>>,
}

impl Corrupter {
    pub fn new(noise: &NoiseSpec, target_vocab_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise.substitution_rate) {
            return Err(Error::Spec("substitution_rate must lie in [0, 1]".into()));
        }
        if noise.confusion_size < 1 {
            return Err(Error::Spec("confusion_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let content: Vec<TokenId> = (NUM_SPECIALS..target_vocab_size).collect();
        let confusions = (0..target_vocab_size)
            .map(|tok| {
                let others: Vec<TokenId> = content.iter().copied().filter(|&c| c != tok).collect();
                let take = noise.confusion_size.min(others.len());
                let mut set: Vec<TokenId> = others.choose_multiple(&mut rng, take).copied().collect();
                set.sort_unstable();
                set
            })
            .collect();
        Ok(Corrupter {
            noise: noise.clone(),
            confusions,
        })
    }

    pub fn confusion_set(&self, token: TokenId) -> &[TokenId] {
        &self.confusions[token]
    }

    /// Corrupts one reference; `stream` selects an independent random stream
    /// so that each sentence of a corpus gets its own draws.
    pub fn corrupt(&self, y_ref: &Sentence, stream: u64) -> Sentence {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
        rng.set_stream(stream.wrapping_add(1));
        let present: HashSet<TokenId> = y_ref.iter().copied().collect();
        let ids = y_ref
            .iter()
            .map(|&tok| {
                let hit = rng.gen::<f64>() < self.noise.substitution_rate;
                let set = self.confusions.get(tok).map(Vec::as_slice).unwrap_or(&[]);
                if !hit || set.is_empty() {
                    return tok;
                }
                let absent: Vec<TokenId> = set.iter().copied().filter(|c| !present.contains(c)).collect();
                let pool = if absent.is_empty() { set } else { &absent };
                *pool.choose(&mut rng).unwrap()
            })
            .collect();
        Sentence::new(ids).expect("corruption preserves length and never emits padding")
    }
}

/// One-shot corruption of a single reference on stream 0.
pub fn corrupt_reference(y_ref: &Sentence, noise: &NoiseSpec, target_vocab_size: usize) -> Result<Sentence> {
    Ok(Corrupter::new(noise, target_vocab_size)?.corrupt(y_ref, 0))
}

/// Builds triples from generated pairs, corrupting sentence `i` on stream `i`.
pub fn make_triples(pairs: &[(Sentence, Sentence)], corrupter: &Corrupter) -> Vec<Triple> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (x, y_ref))| Triple {
            x: x.clone(),
            y_g: corrupter.corrupt(y_ref, i as u64),
            y_ref: y_ref.clone(),
        })
        .collect()
}
