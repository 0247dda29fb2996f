//! Word-level mistake detection: a guess token is correct iff it occurs in
//! the reference. The detector scores each guess position by its best dot
//! product with any source position.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, TokenId, Triple};
use crate::encoder::{ConvEncoder, ConvEncoderCache};
use crate::error::{Error, Result};
use crate::neural_core::{binary_cross_entropy, sigmoid, EmbedTable, Parameter, Tensor, Trainable};
use crate::single_attention::set_table;
use crate::training::{train_loop, TrainConfig, TrainLog};

/// `label[i]` is true iff `y_g[i]` appears anywhere in `y_ref`.
pub fn membership_labels(y_g: &[TokenId], y_ref: &[TokenId]) -> Vec<bool> {
    let reference: HashSet<TokenId> = y_ref.iter().copied().collect();
    y_g.iter().map(|t| reference.contains(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            embed_dim: 32,
            hidden_dim: 32,
            conv_width: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub source: ConvEncoder,
    pub target: ConvEncoder,
}

impl Trainable for DetectorParams {
    fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
        vec![
            ("src_embed", &self.source.embed.rows),
            ("src_conv1", &self.source.conv1.kernel),
            ("src_conv2", &self.source.conv2.kernel),
            ("tgt_embed", &self.target.embed.rows),
            ("tgt_conv1", &self.target.conv1.kernel),
            ("tgt_conv2", &self.target.conv2.kernel),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
        vec![
            ("src_embed", &mut self.source.embed.rows),
            ("src_conv1", &mut self.source.conv1.kernel),
            ("src_conv2", &mut self.source.conv2.kernel),
            ("tgt_embed", &mut self.target.embed.rows),
            ("tgt_conv1", &mut self.target.conv1.kernel),
            ("tgt_conv2", &mut self.target.conv2.kernel),
        ]
    }
}

struct DetectorCache {
    src: ConvEncoderCache,
    tgt: ConvEncoderCache,
    /// Best source position for each guess position.
    argmax: Vec<usize>,
    probs: Vec<f64>,
}

impl DetectorParams {
    pub fn new(source_vocab: usize, target_vocab: usize, cfg: &DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DetectorParams {
            source: ConvEncoder::new(source_vocab, cfg.embed_dim, cfg.conv_width, cfg.hidden_dim, &mut rng),
            target: ConvEncoder::new(target_vocab, cfg.embed_dim, cfg.conv_width, cfg.hidden_dim, &mut rng),
        }
    }

    pub fn set_embeddings(&mut self, source: &EmbedTable, target: &EmbedTable) -> Result<()> {
        set_table(&mut self.source.embed, source)?;
        set_table(&mut self.target.embed, target)
    }

    pub fn config(&self) -> DetectorConfig {
        DetectorConfig {
            embed_dim: self.source.embed.dim(),
            hidden_dim: self.source.conv1.kernel.value.shape()[2],
            conv_width: self.source.conv1.kernel.value.shape()[0],
        }
    }

    fn run(&self, x: &[TokenId], y_g: &[TokenId]) -> Result<DetectorCache> {
        let src = self.source.forward(x)?;
        let tgt = self.target.forward(y_g)?;
        let mut argmax = Vec::with_capacity(y_g.len());
        let mut probs = Vec::with_capacity(y_g.len());
        for i in 0..y_g.len() {
            let t = tgt.out.row(i);
            let (best_j, best) = (0..x.len())
                .map(|j| (j, dot(src.out.row(j), t)))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            argmax.push(best_j);
            probs.push(sigmoid(best));
        }
        Ok(DetectorCache { src, tgt, argmax, probs })
    }

    /// Probability that each guess token is correct.
    pub fn forward(&self, x: &[TokenId], y_g: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.run(x, y_g)?.probs)
    }

    /// Summed binary cross-entropy over the guess positions, accumulating gradients.
    pub fn loss_and_grad(&mut self, x: &[TokenId], y_g: &[TokenId], labels: &[bool]) -> Result<f64> {
        let cache = self.run(x, y_g)?;
        let mut g_src = Tensor::zeros(cache.src.out.shape());
        let mut g_tgt = Tensor::zeros(cache.tgt.out.shape());
        let mut loss = 0.0;
        for (i, (&p, &label)) in cache.probs.iter().zip(labels).enumerate() {
            loss += binary_cross_entropy(p, label);
            let g = p - if label { 1.0 } else { 0.0 };
            let j = cache.argmax[i];
            axpy(g_src.row_mut(j), g, cache.tgt.out.row(i));
            axpy(g_tgt.row_mut(i), g, cache.src.out.row(j));
        }
        self.source.backward(x, &cache.src, &g_src);
        self.target.backward(y_g, &cache.tgt, &g_tgt);
        Ok(loss)
    }

    pub fn loss(&self, x: &[TokenId], y_g: &[TokenId], labels: &[bool]) -> Result<f64> {
        let probs = self.forward(x, y_g)?;
        Ok(probs.iter().zip(labels).map(|(&p, &l)| binary_cross_entropy(p, l)).sum())
    }

    /// Mean per-token binary cross-entropy over a dataset.
    pub fn mean_loss(&self, triples: &[Triple]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in triples {
            let labels = membership_labels(&t.y_g, &t.y_ref);
            total += self.loss(&t.x, &t.y_g, &labels)?;
            count += labels.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Mistake flags: a token is a mistake when its probability of being
    /// correct falls below `threshold`.
    pub fn predict_mistakes(&self, x: &[TokenId], y_g: &[TokenId], threshold: f64) -> Result<Vec<bool>> {
        Ok(self.forward(x, y_g)?.into_iter().map(|p| p < threshold).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    dst.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

/// Trains a detector from scratch (or from `init`) on membership labels.
pub fn train_detector(
    triples: &[Triple],
    source_vocab: usize,
    target_vocab: usize,
    model_cfg: &DetectorConfig,
    cfg: &TrainConfig,
    init: Option<DetectorParams>,
    validation: Option<&[Triple]>,
) -> Result<(DetectorParams, TrainLog)> {
    if triples.is_empty() {
        return Err(Error::Spec("cannot train a detector on an empty dataset".into()));
    }
    let mut model = init.unwrap_or_else(|| DetectorParams::new(source_vocab, target_vocab, model_cfg, cfg.seed));
    let items: Vec<(&Sentence, &Sentence, Vec<bool>)> = triples
        .iter()
        .map(|t| (&t.x, &t.y_g, membership_labels(&t.y_g, &t.y_ref)))
        .collect();
    let log = train_loop(
        &mut model,
        &items,
        cfg,
        |m, (x, y_g, labels)| m.loss_and_grad(x, y_g, labels).expect("validated sentences"),
        validation.map(|v| move |m: &DetectorParams| m.mean_loss(v).expect("validated sentences")),
    );
    Ok((model, log))
}

/// Per-token prior `P(correct | token)` estimated on training guesses.
#[derive(Debug, Clone, PartialEq)]
pub struct StatPrior {
    pub per_token: BTreeMap<TokenId, f64>,
    /// Share of correct labels over all training tokens; unseen tokens get
    /// the majority class through it.
    pub global: f64,
}

impl StatPrior {
    pub fn fit(triples: &[Triple]) -> Self {
        let mut counts: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
        let (mut correct, mut total) = (0usize, 0usize);
        for t in triples {
            for (&tok, ok) in t.y_g.iter().zip(membership_labels(&t.y_g, &t.y_ref)) {
                let e = counts.entry(tok).or_default();
                e.0 += ok as usize;
                e.1 += 1;
                correct += ok as usize;
                total += 1;
            }
        }
        StatPrior {
            per_token: counts.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
            global: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        }
    }

    pub fn p_correct(&self, token: TokenId) -> f64 {
        self.per_token.get(&token).copied().unwrap_or(self.global)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    AllCorrect,
    AllWrong,
    Stat,
}

/// Correctness predictions (true = correct) of a baseline.
pub fn baseline_predict(kind: Baseline, prior: Option<&StatPrior>, y_g: &[TokenId]) -> Result<Vec<bool>> {
    Ok(match kind {
        Baseline::AllCorrect => vec![true; y_g.len()],
        Baseline::AllWrong => vec![false; y_g.len()],
        Baseline::Stat => {
            let prior = prior.ok_or_else(|| Error::Config("stat baseline needs a fitted prior".into()))?;
            y_g.iter().map(|&t| prior.p_correct(t) > 0.5).collect()
        }
    })
}

/// Percentages with "mistake" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores correctness predictions against correctness labels.
///
/// Precision with no flagged token and recall with no actual mistake are
/// vacuous and reported as 100.
pub fn detection_metrics(predicted_correct: &[bool], labels_correct: &[bool]) -> Result<DetectionMetrics> {
    if predicted_correct.len() != labels_correct.len() {
        return Err(Error::LengthMismatch {
            left: predicted_correct.len(),
            right: labels_correct.len(),
        });
    }
    if predicted_correct.is_empty() {
        return Err(Error::Spec("metrics need at least one token".into()));
    }
    let (mut tp, mut fp, mut fn_, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&pred, &label) in predicted_correct.iter().zip(labels_correct) {
        let (pred_mistake, is_mistake) = (!pred, !label);
        match (pred_mistake, is_mistake) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        agree += (pred == label) as usize;
    }
    let pct = |num: usize, den: usize| if den == 0 { 100.0 } else { 100.0 * num as f64 / den as f64 };
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionMetrics {
        accuracy: pct(agree, predicted_correct.len()),
        precision,
        recall,
        f1,
    })
}

/// Metrics table for the three baselines and the trained detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub columns: Vec<(String, DetectionMetrics)>,
}

impl DetectionReport {
    pub fn evaluate(
        triples: &[Triple],
        prior: &StatPrior,
        detector: Option<&DetectorParams>,
        threshold: f64,
    ) -> Result<Self> {
        let mut labels = Vec::new();
        let mut preds: [Vec<bool>; 4] = Default::default();
        for t in triples {
            labels.extend(membership_labels(&t.y_g, &t.y_ref));
            preds[0].extend(baseline_predict(Baseline::AllCorrect, None, &t.y_g)?);
            preds[1].extend(baseline_predict(Baseline::AllWrong, None, &t.y_g)?);
            preds[2].extend(baseline_predict(Baseline::Stat, Some(prior), &t.y_g)?);
            if let Some(d) = detector {
                preds[3].extend(d.predict_mistakes(&t.x, &t.y_g, threshold)?.into_iter().map(|m| !m));
            }
        }
        let names = ["f_cor", "f_wrong", "f_stat", "f"];
        let mut columns = Vec::new();
        for (name, p) in names.iter().zip(&preds) {
            if p.len() == labels.len() {
                columns.push((name.to_string(), detection_metrics(p, &labels)?));
            }
        }
        Ok(DetectionReport { columns })
    }

    pub fn get(&self, name: &str) -> Option<&DetectionMetrics> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// `metric,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,name,value\n");
        for (name, m) in &self.columns {
            for (metric, v) in [
                ("accuracy", m.accuracy),
                ("recall", m.recall),
                ("precision", m.precision),
                ("f1", m.f1),
            ] {
                out.push_str(&format!("{metric},{name},{v:.4}\n"));
            }
        }
        out
    }
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "Metric (%)")?;
        for (name, _) in &self.columns {
            write!(f, "{name:>10}")?;
        }
        writeln!(f)?;
        type Getter = fn(&DetectionMetrics) -> f64;
        let rows: [(&str, Getter); 4] = [
            ("Accuracy", |m| m.accuracy),
            ("Recall", |m| m.recall),
            ("Precision", |m| m.precision),
            ("F1", |m| m.f1),
        ];
        for (label, get) in rows {
            write!(f, "{label:<12}")?;
            for (_, m) in &self.columns {
                write!(f, "{:>10.1}", get(m))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
