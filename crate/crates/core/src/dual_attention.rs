//! Word prediction conditioned on the source and on a full guess translation.
//!
//! Two separately parameterized MLP attentions, one over the encoded source
//! and one over the encoded guess, are queried from the same center-excluded
//! context. The context lookup table is the only parameter they share. During
//! training the context comes from the reference; at test time it is the guess
//! itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, TokenId, Triple, PAD};
use crate::encoder::{
    add_to_row, context_embeddings, context_embeddings_backward, context_ids, glorot, ConvTanh, Dense, INIT_SCALE,
};
use crate::error::{shape_err, Error, Result};
use crate::error_detection::membership_labels;
use crate::neural_core::{
    cross_entropy, cross_entropy_backward, embed_backward, embed_lookup, linear, linear_backward, softmax,
    softmax_backward, EmbedTable, Parameter, Tensor, Trainable,
};
use crate::single_attention::{set_table, source_summary, summary_backward};
use crate::training::{train_loop, TrainConfig, TrainLog};

/// Additive attention scorer `v . tanh(W_c c + W_k k)`, bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScorer {
    pub w_context: Parameter,
    pub w_key: Parameter,
    pub v: Parameter,
}

impl MlpScorer {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        MlpScorer {
            w_context: Parameter::uniform(&[dim, hidden], glorot(dim, hidden), rng),
            w_key: Parameter::uniform(&[dim, hidden], glorot(dim, hidden), rng),
            v: Parameter::uniform(&[hidden], glorot(hidden, 1), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_context.value.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.v.value.len()
    }
}

/// Score of one key for one context vector.
pub fn mlp_attention_score(context: &[f64], key: &[f64], scorer: &MlpScorer) -> Result<f64> {
    let d = scorer.dim();
    if context.len() != d || key.len() != d {
        return Err(shape_err(format!(
            "scorer expects {d}-dim vectors, got context {} and key {}",
            context.len(),
            key.len()
        )));
    }
    let c = linear(&Tensor::from_vec(&[1, d], context.to_vec())?, &scorer.w_context.value)?;
    let k = linear(&Tensor::from_vec(&[1, d], key.to_vec())?, &scorer.w_key.value)?;
    Ok(c.data()
        .iter()
        .zip(k.data())
        .zip(scorer.v.value.data())
        .map(|((a, b), v)| v * (a + b).tanh())
        .sum())
}

/// One attention function: a key encoder over its own sequence, a query
/// encoder over the shared context table, and a scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranch {
    pub key_embed: EmbedTable,
    pub key_conv: ConvTanh,
    pub key_linear: Dense,
    pub query_conv: ConvTanh,
    pub query_linear: Dense,
    pub scorer: MlpScorer,
}

struct BranchCache {
    key_emb: Tensor,
    key_conv: Tensor,
    keys: Tensor,
    query_conv: Tensor,
    queries: Tensor,
    proj_q: Tensor,
    proj_k: Tensor,
    attention: Tensor,
    summaries: Tensor,
}

impl AttentionBranch {
    fn new<R: Rng>(vocab: usize, cfg: &DAConfig, rng: &mut R) -> Self {
        let (e, d) = (cfg.embed_dim, cfg.context_dim);
        let width = 2 * cfg.k + 1;
        AttentionBranch {
            key_embed: EmbedTable::uniform(vocab, e, INIT_SCALE, rng),
            key_conv: ConvTanh::new(width, e, d, rng),
            key_linear: Dense::new(d, d, false, rng),
            query_conv: ConvTanh::masked(width, e, d, false, rng),
            query_linear: Dense::new(d, d, false, rng),
            scorer: MlpScorer::new(d, cfg.attention_dim, rng),
        }
    }

    fn forward(&self, ids: &[TokenId], ctx_emb: &Tensor, ctx_pad: &[f64]) -> Result<BranchCache> {
        let key_emb = embed_lookup(&self.key_embed.rows.value, ids)?;
        let key_conv = self.key_conv.forward(&key_emb, self.key_embed.pad_row())?;
        let keys = self.key_linear.forward(&key_conv)?;
        let query_conv = self.query_conv.forward(ctx_emb, ctx_pad)?;
        let queries = self.query_linear.forward(&query_conv)?;
        let proj_q = linear(&queries, &self.scorer.w_context.value)?;
        let proj_k = linear(&keys, &self.scorer.w_key.value)?;
        let v = self.scorer.v.value.data();

        let (n, m) = (queries.rows(), keys.rows());
        let mut attention = Tensor::zeros(&[n, m]);
        let mut summaries = Tensor::zeros(&[n, keys.cols()]);
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    proj_q.row(i).iter().zip(proj_k.row(j)).zip(v).map(|((a, b), v)| v * (a + b).tanh()).sum()
                })
                .collect();
            let w = softmax(&scores);
            summaries.row_mut(i).copy_from_slice(&source_summary(&w, &keys)?);
            attention.row_mut(i).copy_from_slice(&w);
        }
        Ok(BranchCache {
            key_emb,
            key_conv,
            keys,
            query_conv,
            queries,
            proj_q,
            proj_k,
            attention,
            summaries,
        })
    }

    /// Backpropagates summary gradients; returns the gradient with respect to
    /// the context embeddings and the context pad row.
    fn backward(
        &mut self,
        ids: &[TokenId],
        ctx_emb: &Tensor,
        ctx_pad: &[f64],
        c: &BranchCache,
        g_summary: &Tensor,
    ) -> (Tensor, Vec<f64>) {
        let (n, m, h) = (c.queries.rows(), c.keys.rows(), self.scorer.hidden());
        let mut g_keys = Tensor::zeros(c.keys.shape());
        let mut g_pq = Tensor::zeros(&[n, h]);
        let mut g_pk = Tensor::zeros(&[m, h]);
        let v = self.scorer.v.value.data().to_vec();
        for i in 0..n {
            let w = c.attention.row(i);
            let g_w = summary_backward(w, &c.keys, g_summary.row(i), &mut g_keys);
            let g_scores = softmax_backward(w, &g_w);
            for (j, &gs) in g_scores.iter().enumerate() {
                for t in 0..h {
                    let u = (c.proj_q.row(i)[t] + c.proj_k.row(j)[t]).tanh();
                    self.scorer.v.grad.data_mut()[t] += gs * u;
                    let g_pre = gs * v[t] * (1.0 - u * u);
                    g_pq.row_mut(i)[t] += g_pre;
                    g_pk.row_mut(j)[t] += g_pre;
                }
            }
        }
        let g_queries = linear_backward(&c.queries, &self.scorer.w_context.value, &g_pq, &mut self.scorer.w_context.grad);
        g_keys.add_assign(&linear_backward(&c.keys, &self.scorer.w_key.value, &g_pk, &mut self.scorer.w_key.grad));

        let g_kc = self.key_linear.backward(&c.key_conv, &c.keys, &g_keys);
        let key_pad = self.key_embed.pad_row().to_vec();
        let (g_ke, g_kpad) = self.key_conv.backward(&c.key_emb, &key_pad, &c.key_conv, &g_kc);
        embed_backward(&mut self.key_embed.rows.grad, ids, &g_ke);
        add_to_row(&mut self.key_embed.rows.grad, PAD, &g_kpad);

        let g_qc = self.query_linear.backward(&c.query_conv, &c.queries, &g_queries);
        self.query_conv.backward(ctx_emb, ctx_pad, &c.query_conv, &g_qc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DAConfig {
    pub embed_dim: usize,
    pub context_dim: usize,
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub k: usize,
}

impl Default for DAConfig {
    fn default() -> Self {
        DAConfig {
            embed_dim: 32,
            context_dim: 32,
            attention_dim: 32,
            hidden_dim: 64,
            k: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DAParams {
    pub context_embed: EmbedTable,
    pub source: AttentionBranch,
    pub guess: AttentionBranch,
    pub mlp_hidden: Dense,
    pub mlp_out: Dense,
    pub k: usize,
}

macro_rules! branch_params {
    ($b:expr, $prefix:literal) => {
        [
            (concat!($prefix, "_embed"), &$b.key_embed.rows),
            (concat!($prefix, "_key_conv"), &$b.key_conv.kernel),
            (concat!($prefix, "_key_linear"), &$b.key_linear.weight),
            (concat!($prefix, "_query_conv"), &$b.query_conv.kernel),
            (concat!($prefix, "_query_linear"), &$b.query_linear.weight),
            (concat!($prefix, "_att_context"), &$b.scorer.w_context),
            (concat!($prefix, "_att_key"), &$b.scorer.w_key),
            (concat!($prefix, "_att_v"), &$b.scorer.v),
        ]
    };
    (mut $b:expr, $prefix:literal) => {
        [
            (concat!($prefix, "_embed"), &mut $b.key_embed.rows),
            (concat!($prefix, "_key_conv"), &mut $b.key_conv.kernel),
            (concat!($prefix, "_key_linear"), &mut $b.key_linear.weight),
            (concat!($prefix, "_query_conv"), &mut $b.query_conv.kernel),
            (concat!($prefix, "_query_linear"), &mut $b.query_linear.weight),
            (concat!($prefix, "_att_context"), &mut $b.scorer.w_context),
            (concat!($prefix, "_att_key"), &mut $b.scorer.w_key),
            (concat!($prefix, "_att_v"), &mut $b.scorer.v),
        ]
    };
}

impl Trainable for DAParams {
    fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
        let mut out = vec![("ctx_embed", &self.context_embed.rows)];
        out.extend(branch_params!(self.source, "src"));
        out.extend(branch_params!(self.guess, "guess"));
        out.push(("mlp_hidden", &self.mlp_hidden.weight));
        out.push(("mlp_out", &self.mlp_out.weight));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
        let mut out = vec![("ctx_embed", &mut self.context_embed.rows)];
        out.extend(branch_params!(mut self.source, "src"));
        out.extend(branch_params!(mut self.guess, "guess"));
        out.push(("mlp_hidden", &mut self.mlp_hidden.weight));
        out.push(("mlp_out", &mut self.mlp_out.weight));
        out
    }
}

struct DACache {
    ctx_emb: Tensor,
    contexts: Vec<Vec<TokenId>>,
    source: BranchCache,
    guess: BranchCache,
    mlp_in: Tensor,
    hidden: Tensor,
    logits: Tensor,
    probs: Tensor,
}

impl DAParams {
    pub fn new(source_vocab: usize, target_vocab: usize, cfg: &DAConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d) = (cfg.embed_dim, cfg.context_dim);
        DAParams {
            context_embed: EmbedTable::uniform(target_vocab, e, INIT_SCALE, &mut rng),
            source: AttentionBranch::new(source_vocab, cfg, &mut rng),
            guess: AttentionBranch::new(target_vocab, cfg, &mut rng),
            mlp_hidden: Dense::new(2 * d + 2 * cfg.k * e, cfg.hidden_dim, true, &mut rng),
            mlp_out: Dense::new(cfg.hidden_dim, target_vocab, false, &mut rng),
            k: cfg.k,
        }
    }

    pub fn config(&self) -> DAConfig {
        DAConfig {
            embed_dim: self.context_embed.dim(),
            context_dim: self.source.scorer.dim(),
            attention_dim: self.source.scorer.hidden(),
            hidden_dim: self.mlp_out.weight.value.shape()[0],
            k: self.k,
        }
    }

    pub fn target_vocab_size(&self) -> usize {
        self.context_embed.vocab_size()
    }

    /// Initializes the source table, and the guess and context tables from
    /// the same target table.
    pub fn set_embeddings(&mut self, source: &EmbedTable, target: &EmbedTable) -> Result<()> {
        set_table(&mut self.source.key_embed, source)?;
        set_table(&mut self.guess.key_embed, target)?;
        set_table(&mut self.context_embed, target)
    }

    fn run(&self, x: &[TokenId], y_g: &[TokenId], y_ctx: &[TokenId]) -> Result<DACache> {
        let ctx_emb = embed_lookup(&self.context_embed.rows.value, y_ctx)?;
        let pad = self.context_embed.pad_row();
        let source = self.source.forward(x, &ctx_emb, pad)?;
        let guess = self.guess.forward(y_g, &ctx_emb, pad)?;
        let contexts = context_ids(y_ctx, self.k, false);
        let local = context_embeddings(&self.context_embed, &contexts)?;

        let d = source.summaries.cols();
        let mut mlp_in = Tensor::zeros(&[y_ctx.len(), 2 * d + local.cols()]);
        for i in 0..y_ctx.len() {
            let row = mlp_in.row_mut(i);
            row[..d].copy_from_slice(source.summaries.row(i));
            row[d..2 * d].copy_from_slice(guess.summaries.row(i));
            row[2 * d..].copy_from_slice(local.row(i));
        }
        let hidden = self.mlp_hidden.forward(&mlp_in)?;
        let logits = self.mlp_out.forward(&hidden)?;
        let mut probs = Tensor::zeros(logits.shape());
        for i in 0..y_ctx.len() {
            probs.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
        }
        Ok(DACache {
            ctx_emb,
            contexts,
            source,
            guess,
            mlp_in,
            hidden,
            logits,
            probs,
        })
    }

    /// Position distributions over `|y_ctx|` rows, plus the source and guess
    /// attention maps.
    pub fn forward(&self, x: &[TokenId], y_g: &[TokenId], y_ctx: &[TokenId]) -> Result<(Tensor, Tensor, Tensor)> {
        let c = self.run(x, y_g, y_ctx)?;
        Ok((c.probs, c.source.attention, c.guess.attention))
    }

    fn backward(&mut self, x: &[TokenId], y_g: &[TokenId], y_ctx: &[TokenId], c: &DACache, g_logits: &Tensor) {
        let g_hidden = self.mlp_out.backward(&c.hidden, &c.logits, g_logits);
        let g_in = self.mlp_hidden.backward(&c.mlp_in, &c.hidden, &g_hidden);
        let d = c.source.summaries.cols();
        let n = y_ctx.len();
        let mut g_src = Tensor::zeros(&[n, d]);
        let mut g_guess = Tensor::zeros(&[n, d]);
        let mut g_local = Tensor::zeros(&[n, g_in.cols() - 2 * d]);
        for i in 0..n {
            let gi = g_in.row(i);
            g_src.row_mut(i).copy_from_slice(&gi[..d]);
            g_guess.row_mut(i).copy_from_slice(&gi[d..2 * d]);
            g_local.row_mut(i).copy_from_slice(&gi[2 * d..]);
        }
        context_embeddings_backward(&mut self.context_embed.rows.grad, &c.contexts, &g_local);

        let pad = self.context_embed.pad_row().to_vec();
        let (mut g_ctx, mut g_pad) = self.source.backward(x, &c.ctx_emb, &pad, &c.source, &g_src);
        let (g_ctx2, g_pad2) = self.guess.backward(y_g, &c.ctx_emb, &pad, &c.guess, &g_guess);
        g_ctx.add_assign(&g_ctx2);
        g_pad.iter_mut().zip(&g_pad2).for_each(|(a, b)| *a += b);
        embed_backward(&mut self.context_embed.rows.grad, y_ctx, &g_ctx);
        add_to_row(&mut self.context_embed.rows.grad, PAD, &g_pad);
    }

    /// Summed cross-entropy of the reference given source, guess and the
    /// reference's own context, accumulating gradients.
    pub fn loss_and_grad(&mut self, x: &[TokenId], y_g: &[TokenId], y_ref: &[TokenId]) -> Result<f64> {
        let c = self.run(x, y_g, y_ref)?;
        let mut loss = 0.0;
        let mut g_logits = Tensor::zeros(c.logits.shape());
        for (i, &tok) in y_ref.iter().enumerate() {
            loss += cross_entropy(c.probs.row(i), tok)?;
            g_logits.row_mut(i).copy_from_slice(&cross_entropy_backward(c.probs.row(i), tok));
        }
        self.backward(x, y_g, y_ref, &c, &g_logits);
        Ok(loss)
    }

    pub fn loss(&self, x: &[TokenId], y_g: &[TokenId], y_ref: &[TokenId]) -> Result<f64> {
        let (probs, _, _) = self.forward(x, y_g, y_ref)?;
        y_ref.iter().enumerate().map(|(i, &tok)| cross_entropy(probs.row(i), tok)).sum()
    }
}

pub fn da_train(
    triples: &[Triple],
    source_vocab: usize,
    target_vocab: usize,
    model_cfg: &DAConfig,
    cfg: &TrainConfig,
    init: Option<DAParams>,
    validation: Option<&[Triple]>,
) -> Result<(DAParams, TrainLog)> {
    if triples.is_empty() {
        return Err(Error::Spec("cannot train on an empty dataset".into()));
    }
    let mut model = init.unwrap_or_else(|| DAParams::new(source_vocab, target_vocab, model_cfg, cfg.seed));
    let log = train_loop(
        &mut model,
        triples,
        cfg,
        |m, t| m.loss_and_grad(&t.x, &t.y_g, &t.y_ref).expect("validated sentences"),
        validation.map(|v| move |m: &DAParams| mean_cross_entropy(m, v).expect("validated sentences")),
    );
    Ok((model, log))
}

/// Mean per-token cross-entropy of references under the model.
pub fn mean_cross_entropy(model: &DAParams, triples: &[Triple]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in triples {
        total += model.loss(&t.x, &t.y_g, &t.y_ref)?;
        count += t.y_ref.len();
    }
    Ok(total / count.max(1) as f64)
}

pub fn perplexity(model: &DAParams, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Spec("perplexity needs a non-empty dataset".into()));
    }
    Ok(mean_cross_entropy(model, triples)?.exp())
}

/// Fraction of guess tokens that occur in their reference.
pub fn copy_rate(triples: &[Triple]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for t in triples {
        let labels = membership_labels(&t.y_g, &t.y_ref);
        hits += labels.iter().filter(|&&l| l).count();
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::Spec("copy rate needs a non-empty dataset".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Helper for building triples in tests and examples.
pub fn triple(x: &[TokenId], y_g: &[TokenId], y_ref: &[TokenId]) -> Result<Triple> {
    Ok(Triple {
        x: Sentence::new(x.to_vec())?,
        y_g: Sentence::new(y_g.to_vec())?,
        y_ref: Sentence::new(y_ref.to_vec())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_core::{grad_check, scale_embeddings};

    fn tiny() -> DAConfig {
        DAConfig {
            embed_dim: 2,
            context_dim: 3,
            attention_dim: 2,
            hidden_dim: 4,
            k: 1,
        }
    }

    fn scaled(mut m: DAParams, factor: f64) -> DAParams {
        for (_, p) in m.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
            p.apply_mask();
        }
        m
    }

    fn scorer(wc: Vec<f64>, wk: Vec<f64>, v: Vec<f64>) -> MlpScorer {
        MlpScorer {
            w_context: Parameter::new(Tensor::from_vec(&[2, 2], wc).unwrap()),
            w_key: Parameter::new(Tensor::from_vec(&[2, 2], wk).unwrap()),
            v: Parameter::new(Tensor::from_vec(&[2], v).unwrap()),
        }
    }

    #[test]
    fn score_examples() {
        let s = scorer(vec![1.0, 2.0, -1.0, 0.5], vec![0.0, 1.0, 1.0, 0.0], vec![2.0, -1.0]);
        // W_c c = [1*1 + (-1)*2, 2*1 + 0.5*2] = [-1, 3]; W_k k = [0.5, 3]
        let got = mlp_attention_score(&[1.0, 2.0], &[3.0, 0.5], &s).unwrap();
        let want = 2.0 * (-0.5f64).tanh() - 6f64.tanh();
        assert!((got - want).abs() < 1e-15);

        let zero = scorer(vec![1.0; 4], vec![1.0; 4], vec![0.0; 2]);
        assert_eq!(mlp_attention_score(&[1.0, 2.0], &[3.0, 4.0], &zero).unwrap(), 0.0);
        assert!(matches!(mlp_attention_score(&[1.0], &[3.0, 4.0], &s), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_scorer_attends_uniformly() {
        let mut m = DAParams::new(8, 9, &tiny(), 3);
        m.source.scorer.v.value.fill(0.0);
        let (_, att, _) = m.forward(&[3, 4, 5, 6], &[4, 5], &[4, 5]).unwrap();
        assert!(att.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let (_, att, _) = m.forward(&[3], &[4, 5], &[4, 5]).unwrap();
        assert!(att.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn center_context_is_invisible_but_guess_is_not() {
        let m = scaled(DAParams::new(8, 9, &DAConfig { k: 2, ..tiny() }, 5), 20.0);
        let x = [3, 4, 5];
        let y_g = vec![4, 5, 6, 7];
        let y_ref = vec![4, 8, 6, 3];
        let (base, _, _) = m.forward(&x, &y_g, &y_ref).unwrap();
        for i in 0..y_ref.len() {
            for tok in 1..9 {
                let mut yc = y_ref.clone();
                yc[i] = tok;
                assert_eq!(m.forward(&x, &y_g, &yc).unwrap().0.row(i), base.row(i));
            }
            let mut yg = y_g.clone();
            yg[i] = if y_g[i] == 3 { 8 } else { 3 };
            assert_ne!(m.forward(&x, &yg, &y_ref).unwrap().0.row(i), base.row(i));
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn matvec(v: &[f64], w: &Tensor) -> Vec<f64> {
        let cols = w.shape()[1];
        (0..cols).map(|b| (0..v.len()).map(|a| v[a] * w.data()[a * cols + b]).sum()).collect()
    }

    fn conv(input: &[Vec<f64>], kernel: &Tensor, pad: &[f64]) -> Vec<Vec<f64>> {
        let (w, din, dout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let half = w as isize / 2;
        (0..input.len() as isize)
            .map(|t| {
                (0..dout)
                    .map(|b| {
                        let mut acc = 0.0;
                        for j in 0..w as isize {
                            let p = t + j - half;
                            let v = if p < 0 || p >= input.len() as isize { pad } else { &input[p as usize][..] };
                            for a in 0..din {
                                acc += v[a] * kernel.data()[(j as usize * din + a) * dout + b];
                            }
                        }
                        acc.tanh()
                    })
                    .collect()
            })
            .collect()
    }

    fn branch_oracle(b: &AttentionBranch, ids: &[usize], ctx: &[Vec<f64>], ctx_pad: &[f64]) -> Vec<Vec<f64>> {
        let emb: Vec<Vec<f64>> = ids.iter().map(|&t| b.key_embed.rows.value.row(t).to_vec()).collect();
        let keys: Vec<Vec<f64>> = conv(&emb, &b.key_conv.kernel.value, b.key_embed.pad_row())
            .iter()
            .map(|r| matvec(r, &b.key_linear.weight.value))
            .collect();
        let queries: Vec<Vec<f64>> = conv(ctx, &b.query_conv.kernel.value, ctx_pad)
            .iter()
            .map(|r| matvec(r, &b.query_linear.weight.value))
            .collect();
        queries
            .iter()
            .map(|q| {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| {
                        let u: Vec<f64> = matvec(q, &b.scorer.w_context.value)
                            .iter()
                            .zip(matvec(k, &b.scorer.w_key.value))
                            .map(|(a, c)| (a + c).tanh())
                            .collect();
                        dot(&u, b.scorer.v.value.data())
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                let mut a = vec![0.0; keys[0].len()];
                for (s, k) in scores.iter().zip(&keys) {
                    a.iter_mut().zip(k).for_each(|(ai, ki)| *ai += s.exp() / z * ki);
                }
                a
            })
            .collect()
    }

    #[test]
    fn forward_matches_layer_by_layer_oracle() {
        let m = scaled(DAParams::new(7, 8, &tiny(), 4), 10.0);
        let (x, y_g, y_ref) = ([3, 5, 6], [4, 6], [4, 7]);
        let (p, _, _) = m.forward(&x, &y_g, &y_ref).unwrap();

        let table = &m.context_embed.rows.value;
        let ctx: Vec<Vec<f64>> = y_ref.iter().map(|&t| table.row(t).to_vec()).collect();
        let a_s = branch_oracle(&m.source, &x, &ctx, table.row(0));
        let a_g = branch_oracle(&m.guess, &y_g, &ctx, table.row(0));
        for i in 0..2 {
            let mut input = a_s[i].clone();
            input.extend(&a_g[i]);
            for p in [i as isize - 1, i as isize + 1] {
                let tok = if p < 0 || p >= 2 { 0 } else { y_ref[p as usize] };
                input.extend(table.row(tok));
            }
            let h: Vec<f64> = matvec(&input, &m.mlp_hidden.weight.value).iter().map(|v| v.tanh()).collect();
            let logits = matvec(&h, &m.mlp_out.weight.value);
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for (got, l) in p.row(i).iter().zip(&logits) {
                assert!((got - l.exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = DAParams::new(6, 7, &tiny(), 2);
        scale_embeddings(&mut m, 10.0);
        // Saturate the scorers so attention is far from uniform and the query
        // path carries a first-order signal.
        for b in [&mut m.source, &mut m.guess] {
            for p in [&mut b.scorer.w_context, &mut b.scorer.w_key, &mut b.scorer.v] {
                p.value.data_mut().iter_mut().for_each(|v| *v *= 6.0);
            }
        }
        let (x, y_g, y_ref) = (vec![3, 4], vec![5, 4], vec![5, 6]);
        let report = grad_check(
            &mut m,
            |m| m.loss_and_grad(&x, &y_g, &y_ref).unwrap(),
            |m| m.loss(&x, &y_g, &y_ref).unwrap(),
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn memorizes_one_triple() {
        let data = vec![triple(&[3, 4, 5, 6], &[7, 4, 9, 8, 5], &[7, 4, 3, 8, 5]).unwrap()];
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 1000,
            seed: 2,
            patience: 1000,
        };
        let (m, _) = da_train(&data, 8, 10, &DAConfig::default(), &cfg, None, None).unwrap();
        let ppl = perplexity(&m, &data).unwrap();
        assert!(ppl < 1.2, "perplexity {ppl}");
    }

    #[test]
    fn zero_lr_and_order_independence() {
        let data = vec![
            triple(&[3, 4], &[5, 6], &[5, 7]).unwrap(),
            triple(&[4, 5, 6], &[6, 7, 5], &[6, 7, 5]).unwrap(),
            triple(&[6], &[4], &[3]).unwrap(),
        ];
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            seed: 3,
            patience: 2,
        };
        let (m, _) = da_train(&data, 8, 8, &tiny(), &cfg, None, None).unwrap();
        assert_eq!(m, DAParams::new(8, 8, &tiny(), 3));

        let cfg = TrainConfig { lr: 0.1, ..cfg };
        let mut shuffled = data.clone();
        shuffled.rotate_left(1);
        let (a, _) = da_train(&data, 8, 8, &tiny(), &cfg, None, None).unwrap();
        let (b, _) = da_train(&shuffled, 8, 8, &tiny(), &cfg, None, None).unwrap();
        assert_eq!(a, b);
        assert!(matches!(da_train(&[], 8, 8, &tiny(), &cfg, None, None), Err(Error::Spec(_))));
    }

    #[test]
    fn copy_rate_examples() {
        let same = vec![triple(&[3], &[4, 5], &[4, 5]).unwrap()];
        assert_eq!(copy_rate(&same).unwrap(), 1.0);
        let disjoint = vec![triple(&[3], &[4, 5], &[6, 7]).unwrap()];
        assert_eq!(copy_rate(&disjoint).unwrap(), 0.0);
        assert!(copy_rate(&[]).is_err());
    }

    #[test]
    fn copy_rate_tracks_noise_level() {
        use crate::corpus::{generate_toy_corpus, make_triples, Corrupter, NoiseSpec, ToySpec};
        let spec = ToySpec::default();
        let pairs = generate_toy_corpus(&spec, 2000).unwrap();
        let corrupter = Corrupter::new(&NoiseSpec::default(), spec.target_vocab_size).unwrap();
        let triples = make_triples(&pairs, &corrupter);
        let rate = copy_rate(&triples).unwrap();
        assert!((rate - 0.68).abs() <= 0.03, "copy rate {rate}");
    }
}
