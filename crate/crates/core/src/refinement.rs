//! Iterative single-word refinement of a guess translation.
//!
//! Each round the model predicts a word for every position of the current
//! sentence, positions where the prediction differs from the current word are
//! scored by a heuristic, and the best one is edited if its score reaches the
//! threshold. The loop ends after `budget` edits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Sentence, TokenId, Triple, PAD};
use crate::dual_attention::DAParams;
use crate::encoder::INIT_SCALE;
use crate::error::{shape_err, Error, Result};
use crate::evaluation::{corpus_bleu, SentenceBleu};
use crate::neural_core::{binary_cross_entropy, sigmoid, Parameter, Tensor, Trainable};
use crate::single_attention::SAParams;
use crate::training::{train_loop, TrainConfig, TrainLog};

/// A model that predicts a distribution over words for every position of a
/// sentence. At test time the sentence being refined is both what the model
/// conditions on and where contexts come from.
pub trait SubstitutionModel {
    fn predict(&self, x: &[TokenId], sentence: &[TokenId]) -> Result<Tensor>;
}

impl SubstitutionModel for SAParams {
    fn predict(&self, x: &[TokenId], sentence: &[TokenId]) -> Result<Tensor> {
        Ok(self.forward(x, sentence)?.0)
    }
}

impl SubstitutionModel for DAParams {
    fn predict(&self, x: &[TokenId], sentence: &[TokenId]) -> Result<Tensor> {
        Ok(self.forward(x, sentence, sentence)?.0)
    }
}

impl<F> SubstitutionModel for F
where
    F: Fn(&[TokenId], &[TokenId]) -> Result<Tensor>,
{
    fn predict(&self, x: &[TokenId], sentence: &[TokenId]) -> Result<Tensor> {
        self(x, sentence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heuristic {
    /// Probability of the proposed word.
    Conf,
    /// Probability of the proposed word times one minus that of the current word.
    Pr,
    /// Learned selector over both log-probabilities.
    Cl,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::Conf, Heuristic::Pr, Heuristic::Cl];
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::Conf => "conf",
            Heuristic::Pr => "pr",
            Heuristic::Cl => "cl",
        })
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conf" => Ok(Heuristic::Conf),
            "pr" => Ok(Heuristic::Pr),
            "cl" => Ok(Heuristic::Cl),
            other => Err(Error::Config(format!("unknown heuristic '{other}' (expected conf, pr or cl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    pub heuristic: Heuristic,
    pub threshold: f64,
    pub budget: usize,
    pub selector: Option<SelectorParams>,
}

impl RefinementConfig {
    pub fn new(heuristic: Heuristic, threshold: f64, budget: usize) -> Self {
        RefinementConfig {
            heuristic,
            threshold,
            budget,
            selector: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.heuristic == Heuristic::Cl && self.selector.is_none() {
            return Err(Error::Config("the cl heuristic needs a trained selector".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionStep {
    /// 1-based round in which the edit was made.
    pub round: usize,
    pub position: usize,
    pub old_token: TokenId,
    pub new_token: TokenId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    Budget,
    NoCandidates,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Threshold => "threshold",
            StopReason::Budget => "budget",
            StopReason::NoCandidates => "no_candidates",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub initial: Sentence,
    pub steps: Vec<SubstitutionStep>,
    pub final_sentence: Sentence,
    pub stop_reason: StopReason,
}

impl RefinementTrace {
    /// Applies the steps to the initial sentence.
    pub fn replay(&self) -> Result<Sentence> {
        replay_steps(&self.initial, &self.steps)
    }

    pub fn modified_positions(&self) -> usize {
        unique_positions(&self.steps)
    }
}

pub fn replay_steps(initial: &Sentence, steps: &[SubstitutionStep]) -> Result<Sentence> {
    let mut s = initial.clone();
    for step in steps {
        if step.position >= s.len() || step.new_token == PAD {
            return Err(Error::Spec(format!(
                "step at position {} with token {} does not fit a sentence of length {}",
                step.position,
                step.new_token,
                s.len()
            )));
        }
        s.substitute(step.position, step.new_token);
    }
    Ok(s)
}

fn unique_positions(steps: &[SubstitutionStep]) -> usize {
    let mut p: Vec<usize> = steps.iter().map(|s| s.position).collect();
    p.sort_unstable();
    p.dedup();
    p.len()
}

/// Argmax word per position (lowest id on ties, never `<pad>`) and the
/// positions where it differs from the current word.
pub fn propose(dists: &Tensor, current: &[TokenId]) -> Result<(Vec<TokenId>, Vec<usize>)> {
    if dists.shape().len() != 2 || dists.rows() != current.len() {
        return Err(shape_err(format!(
            "{:?} distributions for a sentence of length {}",
            dists.shape(),
            current.len()
        )));
    }
    let pred: Vec<TokenId> = (0..dists.rows())
        .map(|i| {
            let row = dists.row(i);
            let mut best = PAD + 1;
            for (j, &p) in row.iter().enumerate().skip(PAD + 1) {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let candidates = (0..current.len()).filter(|&i| pred[i] != current[i]).collect();
    Ok((pred, candidates))
}

fn log_prob(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// One score per candidate position.
pub fn score_positions(
    heuristic: Heuristic,
    dists: &Tensor,
    current: &[TokenId],
    pred: &[TokenId],
    candidates: &[usize],
    selector: Option<&SelectorParams>,
) -> Result<Vec<f64>> {
    if heuristic == Heuristic::Cl && selector.is_none() {
        return Err(Error::Config("the cl heuristic needs a trained selector".into()));
    }
    Ok(candidates
        .iter()
        .map(|&i| {
            let row = dists.row(i);
            let (p_pred, p_cur) = (row[pred[i]], row[current[i]]);
            match heuristic {
                Heuristic::Conf => p_pred,
                Heuristic::Pr => p_pred * (1.0 - p_cur),
                Heuristic::Cl => selector.expect("checked above").predict([log_prob(p_pred), log_prob(p_cur)]),
            }
        })
        .collect())
}

/// Candidate with the highest score, lowest position on ties.
pub fn best_candidate(candidates: &[usize], scores: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..candidates.len() {
        if scores[k] > scores[best] || (scores[k] == scores[best] && candidates[k] < candidates[best]) {
            best = k;
        }
    }
    candidates[best]
}

pub fn refine_sentence<M: SubstitutionModel + ?Sized>(
    model: &M,
    x: &[TokenId],
    y_g: &Sentence,
    cfg: &RefinementConfig,
) -> Result<RefinementTrace> {
    cfg.validate()?;
    let mut current = y_g.clone();
    let mut steps = Vec::new();
    let stop_reason = loop {
        if steps.len() >= cfg.budget {
            break StopReason::Budget;
        }
        let dists = model.predict(x, &current)?;
        let (pred, candidates) = propose(&dists, &current)?;
        if candidates.is_empty() {
            break StopReason::NoCandidates;
        }
        let scores = score_positions(cfg.heuristic, &dists, &current, &pred, &candidates, cfg.selector.as_ref())?;
        let pos = best_candidate(&candidates, &scores);
        let score = scores[candidates.iter().position(|&c| c == pos).expect("chosen from candidates")];
        if score < cfg.threshold {
            break StopReason::Threshold;
        }
        let old = current.substitute(pos, pred[pos]);
        steps.push(SubstitutionStep {
            round: steps.len() + 1,
            position: pos,
            old_token: old,
            new_token: pred[pos],
            score,
        });
    };
    Ok(RefinementTrace {
        initial: y_g.clone(),
        steps,
        final_sentence: current,
        stop_reason,
    })
}

/// Refines every guess, in parallel over sentences.
pub fn refine_corpus<M: SubstitutionModel + Sync + ?Sized>(
    model: &M,
    sources: &[Sentence],
    guesses: &[Sentence],
    cfg: &RefinementConfig,
) -> Result<Vec<RefinementTrace>> {
    if sources.len() != guesses.len() {
        return Err(Error::LengthMismatch {
            left: sources.len(),
            right: guesses.len(),
        });
    }
    cfg.validate()?;
    sources
        .par_iter()
        .zip(guesses)
        .map(|(x, g)| refine_sentence(model, x, g, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementSummary {
    pub sentences: usize,
    pub tokens: usize,
    pub steps: usize,
    /// Distinct edited positions; a position edited twice counts once.
    pub modified_tokens: usize,
    pub pct_modified: f64,
    pub substitutions_per_sentence: f64,
    pub bleu_before: Option<f64>,
    pub bleu_after: Option<f64>,
}

impl RefinementSummary {
    /// Statistics from initial sentences and their steps; BLEU is filled in
    /// when references are given.
    pub fn from_steps(initials: &[Sentence], steps: &[Vec<SubstitutionStep>], refs: Option<&[Sentence]>) -> Result<Self> {
        if initials.len() != steps.len() {
            return Err(Error::LengthMismatch {
                left: initials.len(),
                right: steps.len(),
            });
        }
        let tokens: usize = initials.iter().map(|s| s.len()).sum();
        let n_steps: usize = steps.iter().map(Vec::len).sum();
        let modified: usize = steps.iter().map(|s| unique_positions(s)).sum();
        let (bleu_before, bleu_after) = match refs {
            Some(refs) => {
                let finals = initials
                    .iter()
                    .zip(steps)
                    .map(|(i, s)| replay_steps(i, s))
                    .collect::<Result<Vec<_>>>()?;
                (
                    Some(corpus_bleu(initials, refs)?.score),
                    Some(corpus_bleu(&finals, refs)?.score),
                )
            }
            None => (None, None),
        };
        Ok(RefinementSummary {
            sentences: initials.len(),
            tokens,
            steps: n_steps,
            modified_tokens: modified,
            pct_modified: 100.0 * modified as f64 / tokens.max(1) as f64,
            substitutions_per_sentence: n_steps as f64 / initials.len().max(1) as f64,
            bleu_before,
            bleu_after,
        })
    }

    pub fn from_traces(traces: &[RefinementTrace], refs: Option<&[Sentence]>) -> Result<Self> {
        let initials: Vec<Sentence> = traces.iter().map(|t| t.initial.clone()).collect();
        let steps: Vec<Vec<SubstitutionStep>> = traces.iter().map(|t| t.steps.clone()).collect();
        Self::from_steps(&initials, &steps, refs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| out.push_str(&format!("{k},{v}\n"));
        row("sentences", self.sentences.to_string());
        row("tokens", self.tokens.to_string());
        row("steps", self.steps.to_string());
        row("modified_tokens", self.modified_tokens.to_string());
        row("pct_modified", self.pct_modified.to_string());
        row("substitutions_per_sentence", self.substitutions_per_sentence.to_string());
        if let (Some(b), Some(a)) = (self.bleu_before, self.bleu_after) {
            row("bleu_before", b.to_string());
            row("bleu_after", a.to_string());
        }
        out
    }
}

/// One TAB-separated line per step: sentence id, round, position, old token,
/// new token, score.
pub fn write_traces<W: Write>(traces: &[RefinementTrace], mut out: W) -> io::Result<()> {
    for (id, t) in traces.iter().enumerate() {
        for s in &t.steps {
            writeln!(
                out,
                "{id}\t{}\t{}\t{}\t{}\t{}",
                s.round, s.position, s.old_token, s.new_token, s.score
            )?;
        }
    }
    Ok(())
}

/// Parses a trace file back into per-sentence step lists.
pub fn parse_traces(text: &str, sentences: usize) -> Result<Vec<Vec<SubstitutionStep>>> {
    let mut out = vec![Vec::new(); sentences];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
        let id = int(f[0])?;
        let step = SubstitutionStep {
            round: int(f[1])?,
            position: int(f[2])?,
            old_token: int(f[3])?,
            new_token: int(f[4])?,
            score: f[5].parse().map_err(|e| bad(format!("'{}': {e}", f[5])))?,
        };
        out.get_mut(id)
            .ok_or_else(|| bad(format!("sentence id {id} out of range")))?
            .push(step);
    }
    Ok(out)
}

/// Two-layer network from `(log P(proposed), log P(current))` to the
/// probability that the edit raises BLEU.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

pub const SELECTOR_HIDDEN: usize = 16;

impl Trainable for SelectorParams {
    fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl SelectorParams {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Hidden units need spread-out weights to separate log-probabilities.
        SelectorParams {
            w1: Parameter::uniform(&[2, hidden], 10.0 * INIT_SCALE, &mut rng),
            b1: Parameter::uniform(&[hidden], 10.0 * INIT_SCALE, &mut rng),
            w2: Parameter::uniform(&[hidden], 10.0 * INIT_SCALE, &mut rng),
            b2: Parameter::new(Tensor::zeros(&[1])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.value.len()
    }

    fn hidden_layer(&self, f: [f64; 2]) -> Vec<f64> {
        let (w1, b1) = (self.w1.value.data(), self.b1.value.data());
        let h = self.hidden();
        (0..h).map(|j| (f[0] * w1[j] + f[1] * w1[h + j] + b1[j]).tanh()).collect()
    }

    pub fn predict(&self, features: [f64; 2]) -> f64 {
        let hidden = self.hidden_layer(features);
        let z: f64 = hidden.iter().zip(self.w2.value.data()).map(|(a, b)| a * b).sum::<f64>() + self.b2.value.data()[0];
        sigmoid(z)
    }

    pub fn loss_and_grad(&mut self, features: [f64; 2], label: bool) -> f64 {
        let hidden = self.hidden_layer(features);
        let p = self.predict(features);
        let g_z = p - if label { 1.0 } else { 0.0 };
        let h = self.hidden();
        self.b2.grad.data_mut()[0] += g_z;
        for j in 0..h {
            self.w2.grad.data_mut()[j] += g_z * hidden[j];
            let g_pre = g_z * self.w2.value.data()[j] * (1.0 - hidden[j] * hidden[j]);
            self.b1.grad.data_mut()[j] += g_pre;
            self.w1.grad.data_mut()[j] += g_pre * features[0];
            self.w1.grad.data_mut()[h + j] += g_pre * features[1];
        }
        binary_cross_entropy(p, label)
    }

    pub fn loss(&self, features: [f64; 2], label: bool) -> f64 {
        binary_cross_entropy(self.predict(features), label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorExample {
    pub features: [f64; 2],
    /// Whether the substitution raises smoothed sentence BLEU.
    pub label: bool,
}

/// Every first-round candidate substitution on every triple, labelled by its
/// smoothed sentence BLEU change.
pub fn selector_examples<M: SubstitutionModel + Sync + ?Sized>(model: &M, triples: &[Triple]) -> Result<Vec<SelectorExample>> {
    let per: Vec<Vec<SelectorExample>> = triples
        .par_iter()
        .map(|t| {
            let dists = model.predict(&t.x, &t.y_g)?;
            let (pred, candidates) = propose(&dists, &t.y_g)?;
            let bleu = SentenceBleu::new(&t.y_g, &t.y_ref);
            Ok(candidates
                .iter()
                .map(|&i| {
                    let row = dists.row(i);
                    SelectorExample {
                        features: [log_prob(row[pred[i]]), log_prob(row[t.y_g[i]])],
                        label: bleu.delta(i, pred[i]) > 0.0,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn train_selector_on(
    examples: &[SelectorExample],
    hidden: usize,
    cfg: &TrainConfig,
    init: Option<SelectorParams>,
) -> Result<(SelectorParams, TrainLog)> {
    if examples.is_empty() {
        return Err(Error::Spec("no candidate substitutions to train the selector on".into()));
    }
    let mut model = init.unwrap_or_else(|| SelectorParams::new(hidden, cfg.seed));
    // Bit patterns give the examples a canonical order.
    let items: Vec<([u64; 2], bool)> = examples
        .iter()
        .map(|e| ([e.features[0].to_bits(), e.features[1].to_bits()], e.label))
        .collect();
    let log = train_loop(
        &mut model,
        &items,
        cfg,
        |m, (f, label)| m.loss_and_grad([f64::from_bits(f[0]), f64::from_bits(f[1])], *label),
        None::<fn(&SelectorParams) -> f64>,
    );
    Ok((model, log))
}

pub fn train_selector<M: SubstitutionModel + Sync + ?Sized>(
    model: &M,
    triples: &[Triple],
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(SelectorParams, TrainLog)> {
    train_selector_on(&selector_examples(model, triples)?, hidden, cfg, None)
}

pub fn selector_accuracy(selector: &SelectorParams, examples: &[SelectorExample]) -> f64 {
    let right = examples
        .iter()
        .filter(|e| (selector.predict(e.features) >= 0.5) == e.label)
        .count();
    right as f64 / examples.len().max(1) as f64
}

/// Counts of stop reasons, for reporting.
pub fn stop_reason_counts(traces: &[RefinementTrace]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in traces {
        *out.entry(t.stop_reason.to_string()).or_insert(0) += 1;
    }
    out
}
