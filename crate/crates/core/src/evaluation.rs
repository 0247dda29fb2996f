//! BLEU, oracle refinement, grid sweeps and curve output.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Sentence, TokenId, Triple};
use crate::error::{Error, Result};
use crate::refinement::{
    propose, score_positions, Heuristic, RefinementTrace, SelectorParams, StopReason, SubstitutionModel,
    SubstitutionStep,
};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n)
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    }
}

fn combine(precisions: &[f64; MAX_ORDER], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
    100.0 * bp * log_mean.exp()
}

/// Corpus-level BLEU-4 with clipped counts and a single reference per
/// hypothesis. An order with no hypothesis n-grams at all counts as
/// precision 1.
pub fn corpus_bleu<T: Hash + Eq, S: AsRef<[T]>>(hyps: &[S], refs: &[S]) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Spec("BLEU of an empty corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            matches[n - 1] += clipped_matches(h, r, n);
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    let mut precisions = [1.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = brevity_penalty(hyp_len, ref_len);
    Ok(BleuScore {
        score: combine(&precisions, brevity_penalty),
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

fn smoothed_score(matches: &[usize; MAX_ORDER], totals: &[usize; MAX_ORDER], hyp_len: usize, ref_len: usize) -> f64 {
    let mut p = [0.0; MAX_ORDER];
    p[0] = if totals[0] == 0 { 0.0 } else { matches[0] as f64 / totals[0] as f64 };
    for n in 1..MAX_ORDER {
        p[n] = (matches[n] + 1) as f64 / (totals[n] + 1) as f64;
    }
    combine(&p, brevity_penalty(hyp_len, ref_len))
}

/// Sentence BLEU with add-one smoothing of the 2- to 4-gram precisions.
pub fn sentence_bleu_smoothed<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        matches[n - 1] = clipped_matches(hyp, reference, n);
        totals[n - 1] = (hyp.len() + 1).saturating_sub(n);
    }
    smoothed_score(&matches, &totals, hyp.len(), reference.len())
}

/// Smoothed sentence BLEU of a fixed hypothesis that answers "what if
/// position i held token t" without rescoring the whole sentence.
#[derive(Debug, Clone)]
pub struct SentenceBleu {
    hyp: Vec<TokenId>,
    ref_len: usize,
    ref_counts: Vec<HashMap<Vec<TokenId>, usize>>,
    hyp_counts: Vec<HashMap<Vec<TokenId>, usize>>,
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
}

impl SentenceBleu {
    pub fn new(hyp: &[TokenId], reference: &[TokenId]) -> Self {
        let owned = |s: &[TokenId], n| -> HashMap<Vec<TokenId>, usize> {
            ngram_counts(s, n).into_iter().map(|(g, c)| (g.to_vec(), c)).collect()
        };
        let ref_counts: Vec<_> = (1..=MAX_ORDER).map(|n| owned(reference, n)).collect();
        let hyp_counts: Vec<_> = (1..=MAX_ORDER).map(|n| owned(hyp, n)).collect();
        let mut matches = [0; MAX_ORDER];
        let mut totals = [0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            matches[n] = hyp_counts[n]
                .iter()
                .map(|(g, &c)| c.min(ref_counts[n].get(g).copied().unwrap_or(0)))
                .sum();
            totals[n] = (hyp.len() + 1).saturating_sub(n + 1);
        }
        SentenceBleu {
            hyp: hyp.to_vec(),
            ref_len: reference.len(),
            ref_counts,
            hyp_counts,
            matches,
            totals,
        }
    }

    pub fn score(&self) -> f64 {
        smoothed_score(&self.matches, &self.totals, self.hyp.len(), self.ref_len)
    }

    /// Score after replacing `hyp[pos]` with `token`.
    pub fn score_with(&self, pos: usize, token: TokenId) -> f64 {
        let mut matches = self.matches;
        if self.hyp[pos] != token {
            let len = self.hyp.len();
            for n in 1..=MAX_ORDER.min(len) {
                let mut delta: HashMap<Vec<TokenId>, isize> = HashMap::new();
                let first = pos.saturating_sub(n - 1);
                let last = pos.min(len - n);
                for s in first..=last {
                    let old = self.hyp[s..s + n].to_vec();
                    let mut new = old.clone();
                    new[pos - s] = token;
                    *delta.entry(old).or_insert(0) -= 1;
                    *delta.entry(new).or_insert(0) += 1;
                }
                let (hc, rc) = (&self.hyp_counts[n - 1], &self.ref_counts[n - 1]);
                let mut m = matches[n - 1] as isize;
                for (g, d) in delta {
                    let c = hc.get(&g).copied().unwrap_or(0) as isize;
                    let r = rc.get(&g).copied().unwrap_or(0) as isize;
                    m += (c + d).min(r) - c.min(r);
                }
                matches[n - 1] = m as usize;
            }
        }
        smoothed_score(&matches, &self.totals, self.hyp.len(), self.ref_len)
    }

    pub fn delta(&self, pos: usize, token: TokenId) -> f64 {
        self.score_with(pos, token) - self.score()
    }
}

/// Greedy oracle: each round applies the model proposal with the largest
/// smoothed sentence BLEU gain, stopping when no proposal helps.
pub fn full_oracle<M: SubstitutionModel + ?Sized>(
    model: &M,
    x: &[TokenId],
    y_g: &Sentence,
    y_ref: &[TokenId],
    budget: usize,
) -> Result<RefinementTrace> {
    oracle_loop(model, x, y_g, budget, |current, _dists, pred, candidates| {
        let bleu = SentenceBleu::new(current, y_ref);
        let mut best: Option<(usize, f64)> = None;
        for &i in candidates {
            let d = bleu.delta(i, pred[i]);
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        Ok(best.filter(|&(_, d)| d > 0.0))
    })
}

/// The heuristic picks the position; the oracle only vetoes edits that do
/// not raise smoothed sentence BLEU.
pub fn partial_oracle<M: SubstitutionModel + ?Sized>(
    model: &M,
    x: &[TokenId],
    y_g: &Sentence,
    y_ref: &[TokenId],
    heuristic: Heuristic,
    selector: Option<&SelectorParams>,
    budget: usize,
) -> Result<RefinementTrace> {
    oracle_loop(model, x, y_g, budget, |current, dists, pred, candidates| {
        let scores = score_positions(heuristic, dists, current, pred, candidates, selector)?;
        let pick = crate::refinement::best_candidate(candidates, &scores);
        let d = SentenceBleu::new(current, y_ref).delta(pick, pred[pick]);
        Ok((d > 0.0).then_some((pick, d)))
    })
}

fn oracle_loop<M, F>(model: &M, x: &[TokenId], y_g: &Sentence, budget: usize, mut choose: F) -> Result<RefinementTrace>
where
    M: SubstitutionModel + ?Sized,
    F: FnMut(&[TokenId], &crate::neural_core::Tensor, &[TokenId], &[usize]) -> Result<Option<(usize, f64)>>,
{
    let mut current = y_g.clone();
    let mut steps = Vec::new();
    let stop_reason = loop {
        if steps.len() >= budget {
            break StopReason::Budget;
        }
        let dists = model.predict(x, &current)?;
        let (pred, candidates) = propose(&dists, &current)?;
        if candidates.is_empty() {
            break StopReason::NoCandidates;
        }
        let Some((pos, delta)) = choose(&current, &dists, &pred, &candidates)? else {
            break StopReason::Threshold;
        };
        let old = current.substitute(pos, pred[pos]);
        steps.push(SubstitutionStep {
            round: steps.len() + 1,
            position: pos,
            old_token: old,
            new_token: pred[pos],
            score: delta,
        });
    };
    Ok(RefinementTrace {
        initial: y_g.clone(),
        steps,
        final_sentence: current,
        stop_reason,
    })
}

/// Sentence reached by a trace recorded at threshold 0 if the run had used
/// threshold `t` and budget `n` instead. Refinement is deterministic, so
/// the shorter run is always a prefix of the longer one.
pub fn truncated_steps(trace: &RefinementTrace, t: f64, n: usize) -> &[SubstitutionStep] {
    let stop = trace.steps.iter().take(n).position(|s| s.score < t).unwrap_or(trace.steps.len().min(n));
    &trace.steps[..stop]
}

/// Final sentence and number of distinct modified positions of a step prefix.
pub fn replay_prefix(initial: &Sentence, steps: &[SubstitutionStep]) -> (Vec<TokenId>, usize) {
    let mut out = initial.ids().to_vec();
    let mut touched = vec![false; out.len()];
    for s in steps {
        out[s.position] = s.new_token;
        touched[s.position] = true;
    }
    (out, touched.iter().filter(|&&b| b).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub heuristic: Heuristic,
    pub t: f64,
    pub n: usize,
    pub bleu: f64,
    pub pct_modified: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the row with the highest BLEU, earliest in grid order on ties.
    pub best: usize,
    pub baseline_bleu: f64,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,heuristic,t,n,bleu\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.model, r.heuristic, r.t, r.n, r.bleu));
        }
        out
    }
}

/// The standard grids: t in {0, 0.1, ..., 1} and N in {0, ..., 10}.
pub fn default_grids() -> (Vec<f64>, Vec<usize>) {
    ((0..=10).map(|i| i as f64 / 10.0).collect(), (0..=10).collect())
}

/// Runs each heuristic once at threshold 0 with the largest budget, in
/// parallel over sentences.
pub fn threshold_free_traces<M: SubstitutionModel + Sync + ?Sized>(
    model: &M,
    triples: &[Triple],
    heuristic: Heuristic,
    selector: Option<&SelectorParams>,
    budget: usize,
) -> Result<Vec<RefinementTrace>> {
    let cfg = crate::refinement::RefinementConfig {
        heuristic,
        threshold: 0.0,
        budget,
        selector: selector.cloned(),
    };
    cfg.validate()?;
    triples
        .par_iter()
        .map(|t| crate::refinement::refine_sentence(model, &t.x, &t.y_g, &cfg))
        .collect()
}

/// Corpus BLEU and percentage of modified tokens at `(t, n)`.
pub fn evaluate_cell(traces: &[RefinementTrace], refs: &[&[TokenId]], t: f64, n: usize) -> Result<(f64, f64)> {
    let mut hyps = Vec::with_capacity(traces.len());
    let (mut modified, mut tokens) = (0, 0);
    for tr in traces {
        let (h, m) = replay_prefix(&tr.initial, truncated_steps(tr, t, n));
        modified += m;
        tokens += h.len();
        hyps.push(h);
    }
    let refs: Vec<Vec<TokenId>> = refs.iter().map(|r| r.to_vec()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?.score;
    Ok((bleu, 100.0 * modified as f64 / tokens.max(1) as f64))
}

/// Corpus BLEU on every `(heuristic, t, N)` cell.
pub fn sweep<M: SubstitutionModel + Sync + ?Sized>(
    model_name: &str,
    model: &M,
    triples: &[Triple],
    heuristics: &[(Heuristic, Option<&SelectorParams>)],
    t_grid: &[f64],
    n_grid: &[usize],
) -> Result<SweepResult> {
    if heuristics.is_empty() || t_grid.is_empty() || n_grid.is_empty() {
        return Err(Error::Spec("sweep grids must be non-empty".into()));
    }
    if triples.is_empty() {
        return Err(Error::Spec("sweep needs a non-empty dataset".into()));
    }
    let refs: Vec<&[TokenId]> = triples.iter().map(|t| t.y_ref.ids()).collect();
    let guesses: Vec<&[TokenId]> = triples.iter().map(|t| t.y_g.ids()).collect();
    let baseline_bleu = corpus_bleu(&guesses, &refs)?.score;
    let max_n = *n_grid.iter().max().expect("non-empty");
    let mut rows = Vec::new();
    for &(heuristic, selector) in heuristics {
        let traces = threshold_free_traces(model, triples, heuristic, selector, max_n)?;
        for &t in t_grid {
            for &n in n_grid {
                let (bleu, pct_modified) = evaluate_cell(&traces, &refs, t, n)?;
                rows.push(SweepRow {
                    model: model_name.to_string(),
                    heuristic,
                    t,
                    n,
                    bleu,
                    pct_modified,
                });
            }
        }
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.bleu > rows[best].bleu {
            best = i;
        }
    }
    Ok(SweepResult {
        rows,
        best,
        baseline_bleu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub n: usize,
    pub bleu: f64,
    pub pct_modified: f64,
}

/// BLEU and modification rate for each budget `0..=max_n` at a fixed
/// threshold, from threshold-free traces with budget at least `max_n`.
pub fn curve_from_traces(traces: &[RefinementTrace], refs: &[&[TokenId]], t: f64, max_n: usize) -> Result<Vec<CurvePoint>> {
    (0..=max_n)
        .map(|n| {
            let (bleu, pct_modified) = evaluate_cell(traces, refs, t, n)?;
            Ok(CurvePoint { n, bleu, pct_modified })
        })
        .collect()
}

/// Writes `n,bleu` and `n,pct_modified` CSV files.
pub fn emit_curves(points: &[CurvePoint], bleu_path: impl AsRef<Path>, pct_path: impl AsRef<Path>) -> Result<()> {
    let mut bleu = fs::File::create(bleu_path)?;
    let mut pct = fs::File::create(pct_path)?;
    writeln!(bleu, "n,bleu")?;
    writeln!(pct, "n,pct_modified")?;
    for p in points {
        writeln!(bleu, "{},{}", p.n, p.bleu)?;
        writeln!(pct, "{},{}", p.n, p.pct_modified)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_core::Tensor;
    use proptest::prelude::*;

    /// Independent recount: n-grams as owned vectors, counted by linear scan.
    fn naive_bleu(hyps: &[Vec<u8>], refs: &[Vec<u8>]) -> f64 {
        let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> {
            if s.len() < n {
                vec![]
            } else {
                (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
            }
        };
        let mut logsum = 0.0;
        let (mut h_len, mut r_len) = (0.0, 0.0);
        for n in 1..=4 {
            let (mut m, mut tot) = (0.0, 0.0);
            for (h, r) in hyps.iter().zip(refs) {
                let hg = grams(h, n);
                let rg = grams(r, n);
                let mut seen: Vec<&Vec<u8>> = vec![];
                for g in &hg {
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let ch = hg.iter().filter(|x| *x == g).count();
                    let cr = rg.iter().filter(|x| *x == g).count();
                    m += ch.min(cr) as f64;
                }
                tot += hg.len() as f64;
            }
            let p = if tot == 0.0 { 1.0 } else { m / tot };
            if p == 0.0 {
                return 0.0;
            }
            logsum += p.ln();
        }
        for (h, r) in hyps.iter().zip(refs) {
            h_len += h.len() as f64;
            r_len += r.len() as f64;
        }
        let bp = if r_len > h_len { (1.0 - r_len / h_len).exp() } else { 1.0 };
        100.0 * bp * (logsum / 4.0).exp()
    }

    fn naive_smoothed(h: &[usize], r: &[usize]) -> f64 {
        let mut logsum = 0.0;
        for n in 1..=4usize {
            let (mut m, mut tot) = (0.0, 0.0);
            if h.len() >= n {
                for i in 0..=h.len() - n {
                    let g = &h[i..i + n];
                    let first = (0..i).all(|j| &h[j..j + n] != g);
                    if first {
                        let ch = (0..=h.len() - n).filter(|&j| &h[j..j + n] == g).count();
                        let cr = if r.len() >= n { (0..=r.len() - n).filter(|&j| &r[j..j + n] == g).count() } else { 0 };
                        m += ch.min(cr) as f64;
                    }
                    tot += 1.0;
                }
            }
            let p = if n == 1 { m / tot } else { (m + 1.0) / (tot + 1.0) };
            if p == 0.0 {
                return 0.0;
            }
            logsum += p.ln();
        }
        let (hl, rl) = (h.len() as f64, r.len() as f64);
        let bp = if rl > hl { (1.0 - rl / hl).exp() } else { 1.0 };
        100.0 * bp * (logsum / 4.0).exp()
    }

    #[test]
    fn clipped_unigram_hand_case() {
        let hyp = vec!["the"; 7];
        let reference = vec!["the", "cat", "is", "on", "the", "mat"];
        let b = corpus_bleu(&[hyp], &[reference]).unwrap();
        assert_eq!(b.matches[0], 2);
        assert_eq!(b.totals[0], 7);
        assert_eq!(b.precisions[0], 2.0 / 7.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let b = corpus_bleu(&[vec![1, 2, 3, 4, 5, 6]], &[vec![1, 2, 3, 4, 5, 6, 7]]).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 7.0 / 6.0).exp()).abs() < 1e-15);
        assert!((b.brevity_penalty - 0.8465).abs() < 1e-4);
        assert!(corpus_bleu(&[vec![1]], &[vec![1], vec![2]]).is_err());
        assert!(matches!(corpus_bleu::<usize, Vec<usize>>(&[], &[]), Err(Error::Spec(_))));
    }

    #[test]
    fn smoothed_examples() {
        assert_eq!(sentence_bleu_smoothed(&[5], &[5]), 100.0);
        assert_eq!(sentence_bleu_smoothed(&[5, 6], &[7, 8]), 0.0);
        let (h, r) = ([3, 4, 9, 6, 7], [3, 4, 5, 6, 7]);
        assert!((sentence_bleu_smoothed(&h, &r) - naive_smoothed(&h, &r)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn corpus_bleu_matches_naive_recount(
            corpus in prop::collection::vec(
                (prop::collection::vec(0u8..5, 1..9), prop::collection::vec(0u8..5, 1..9)), 1..6)
        ) {
            let (h, r): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
            let got = corpus_bleu(&h, &r).unwrap().score;
            prop_assert!((got - naive_bleu(&h, &r)).abs() < 1e-9);
        }

        #[test]
        fn identity_scores_100(refs in prop::collection::vec(prop::collection::vec(0u8..20, 1..12), 1..8)) {
            prop_assert!((corpus_bleu(&refs, &refs).unwrap().score - 100.0).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(
            corpus in prop::collection::vec(
                (prop::collection::vec(0u8..4, 1..8), prop::collection::vec(0u8..4, 1..8)), 2..6),
            seed in any::<u64>()
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = corpus.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (h1, r1): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
            let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(corpus_bleu(&h1, &r1).unwrap().score, corpus_bleu(&h2, &r2).unwrap().score);
        }

        #[test]
        fn incremental_delta_matches_rescoring(
            hyp in prop::collection::vec(0usize..5, 1..10),
            reference in prop::collection::vec(0usize..5, 1..10),
            pos_frac in 0.0f64..1.0,
            tok in 0usize..6
        ) {
            let pos = ((hyp.len() as f64 * pos_frac) as usize).min(hyp.len() - 1);
            let inc = SentenceBleu::new(&hyp, &reference);
            prop_assert!((inc.score() - naive_smoothed(&hyp, &reference)).abs() < 1e-9);
            let mut edited = hyp.clone();
            edited[pos] = tok;
            prop_assert!((inc.score_with(pos, tok) - naive_smoothed(&edited, &reference)).abs() < 1e-9);
        }
    }

    /// Distributions that put mass 0.6 on a fixed target sentence token and
    /// spread the rest evenly.
    fn pointing_model(target: Vec<usize>, vocab: usize) -> impl Fn(&[usize], &[usize]) -> Result<Tensor> {
        move |_x, y| {
            let rows: Vec<Vec<f64>> = (0..y.len())
                .map(|i| {
                    let mut r = vec![0.4 / (vocab - 1) as f64; vocab];
                    r[target[i]] = 0.6;
                    r
                })
                .collect();
            Tensor::from_rows(&rows)
        }
    }

    fn s(v: &[usize]) -> Sentence {
        Sentence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let r = [3, 4, 5, 6, 7];
        let m = pointing_model(r.to_vec(), 10);
        let tr = full_oracle(&m, &[3], &s(&r), &r, 5).unwrap();
        assert!(tr.steps.is_empty());

        let g = s(&[3, 4, 9, 6, 7]);
        let tr = full_oracle(&m, &[3], &g, &r, 5).unwrap();
        assert_eq!(tr.steps.len(), 1);
        assert_eq!(tr.final_sentence.ids(), r);

        // Proposing a wrong token everywhere: partial oracle vetoes it.
        let bad = pointing_model(vec![8, 8, 8, 8, 8], 10);
        let tr = partial_oracle(&bad, &[3], &g, &r, Heuristic::Pr, None, 5).unwrap();
        assert!(tr.steps.is_empty());
        assert_eq!(tr.stop_reason, StopReason::Threshold);

        let two = s(&[3, 9, 5, 9, 7]);
        let tr = partial_oracle(&m, &[3], &two, &r, Heuristic::Pr, None, 2).unwrap();
        assert_eq!(tr.steps.len(), 2);
        assert_eq!(tr.stop_reason, StopReason::Budget);
    }

    #[test]
    fn full_oracle_matches_exhaustive_rounds() {
        let r = [3, 4, 5, 6, 7, 3];
        let g = s(&[3, 9, 5, 6, 8, 3]);
        // Proposes the reference at positions 1 and 4 and a harmful token at 2.
        let m = pointing_model(vec![3, 4, 9, 6, 7, 3], 10);
        let tr = full_oracle(&m, &[3], &g, &r, 10).unwrap();
        let mut current = g.ids().to_vec();
        for step in &tr.steps {
            let base = sentence_bleu_smoothed(&current, &r);
            let mut best = (usize::MAX, 0.0);
            for (i, tok) in [(1, 4), (2, 9), (4, 7)] {
                if current[i] == tok {
                    continue;
                }
                let mut c = current.clone();
                c[i] = tok;
                let d = sentence_bleu_smoothed(&c, &r) - base;
                if d > best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(step.position, best.0);
            assert!((step.score - best.1).abs() < 1e-9);
            current[step.position] = step.new_token;
        }
        assert_eq!(tr.steps.len(), 2);
        assert_eq!(tr.final_sentence.ids(), r);
    }

    #[test]
    fn truncation_matches_direct_runs() {
        use crate::refinement::{refine_sentence, RefinementConfig};
        let m = |_x: &[usize], y: &[usize]| {
            // Confidence depends on the current sentence so rounds differ.
            let rows: Vec<Vec<f64>> = (0..y.len())
                .map(|i| {
                    let mut r = vec![0.0; 6];
                    let tok = (y[i] + 1) % 6;
                    let conf = 0.3 + 0.1 * ((i + y.iter().sum::<usize>()) % 7) as f64;
                    r[tok] = conf;
                    r[y[i]] = 1.0 - conf;
                    r
                })
                .collect();
            Tensor::from_rows(&rows)
        };
        let g = s(&[1, 4, 2, 5, 3]);
        let full = refine_sentence(&m, &[1], &g, &RefinementConfig::new(Heuristic::Conf, 0.0, 10)).unwrap();
        for ti in 0..=10 {
            let t = ti as f64 / 10.0;
            for n in 0..=10 {
                let direct = refine_sentence(&m, &[1], &g, &RefinementConfig::new(Heuristic::Conf, t, n)).unwrap();
                assert_eq!(truncated_steps(&full, t, n), &direct.steps[..], "t={t} n={n}");
            }
        }
    }

    #[test]
    fn curves_write_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let pts = [
            CurvePoint { n: 0, bleu: 50.0, pct_modified: 0.0 },
            CurvePoint { n: 1, bleu: 51.5, pct_modified: 1.25 },
        ];
        let (b, p) = (dir.path().join("b.csv"), dir.path().join("p.csv"));
        emit_curves(&pts, &b, &p).unwrap();
        assert_eq!(fs::read_to_string(b).unwrap(), "n,bleu\n0,50\n1,51.5\n");
        assert_eq!(fs::read_to_string(p).unwrap(), "n,pct_modified\n0,0\n1,1.25\n");
        assert!(emit_curves(&pts, dir.path().join("missing/b.csv"), dir.path().join("p.csv")).is_err());
    }
}
