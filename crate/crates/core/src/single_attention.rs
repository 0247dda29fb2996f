//! Non-causal, source-conditioned word prediction with dot-product attention.
//!
//! For every target position the model sees the `k` tokens on each side (never
//! the token itself), attends over the encoded source with a query computed
//! from that context, and predicts a distribution over the target vocabulary
//! from `[summary ; context embeddings]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, TokenId, PAD};
use crate::encoder::{
    add_to_row, context_embeddings, context_embeddings_backward, context_ids, ConvEncoder, ConvEncoderCache,
    ConvTanh, Dense, INIT_SCALE,
};
use crate::error::{shape_err, Error, Result};
use crate::neural_core::{
    cross_entropy, cross_entropy_backward, embed_backward, embed_lookup, softmax, softmax_backward, EmbedTable,
    Parameter, Tensor, Trainable,
};
use crate::training::{train_loop, TrainConfig, TrainLog};

/// Softmax over source positions of `S^j . T_i`.
pub fn attention_weights(source: &Tensor, query: &[f64]) -> Result<Vec<f64>> {
    if source.cols() != query.len() {
        return Err(shape_err(format!(
            "source vectors have {} dims, query has {}",
            source.cols(),
            query.len()
        )));
    }
    let scores: Vec<f64> = (0..source.rows())
        .map(|j| source.row(j).iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    Ok(softmax(&scores))
}

/// `sum_j weights[j] * S^j`.
pub fn source_summary(weights: &[f64], source: &Tensor) -> Result<Vec<f64>> {
    if weights.len() != source.rows() {
        return Err(shape_err(format!(
            "{} weights for {} source rows",
            weights.len(),
            source.rows()
        )));
    }
    let mut out = vec![0.0; source.cols()];
    for (j, &w) in weights.iter().enumerate() {
        out.iter_mut().zip(source.row(j)).for_each(|(o, s)| *o += w * s);
    }
    Ok(out)
}

/// Backward of `source_summary` given the weights: returns (grad weights) and
/// accumulates into `grad_source`.
pub(crate) fn summary_backward(weights: &[f64], source: &Tensor, grad_summary: &[f64], grad_source: &mut Tensor) -> Vec<f64> {
    (0..source.rows())
        .map(|j| {
            grad_source
                .row_mut(j)
                .iter_mut()
                .zip(grad_summary)
                .for_each(|(g, d)| *g += weights[j] * d);
            source.row(j).iter().zip(grad_summary).map(|(s, d)| s * d).sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SAConfig {
    pub embed_dim: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    pub k: usize,
    pub source_conv_width: usize,
    pub left_only: bool,
}

impl Default for SAConfig {
    fn default() -> Self {
        SAConfig {
            embed_dim: 32,
            context_dim: 32,
            hidden_dim: 64,
            k: 4,
            source_conv_width: 5,
            left_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SAParams {
    pub source: ConvEncoder,
    pub target_embed: EmbedTable,
    pub context_conv: ConvTanh,
    pub context_dense: Dense,
    pub mlp_hidden: Dense,
    pub mlp_out: Dense,
    pub k: usize,
    pub left_only: bool,
}

impl Trainable for SAParams {
    fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
        vec![
            ("src_embed", &self.source.embed.rows),
            ("src_conv1", &self.source.conv1.kernel),
            ("src_conv2", &self.source.conv2.kernel),
            ("tgt_embed", &self.target_embed.rows),
            ("ctx_conv", &self.context_conv.kernel),
            ("ctx_dense", &self.context_dense.weight),
            ("mlp_hidden", &self.mlp_hidden.weight),
            ("mlp_out", &self.mlp_out.weight),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
        vec![
            ("src_embed", &mut self.source.embed.rows),
            ("src_conv1", &mut self.source.conv1.kernel),
            ("src_conv2", &mut self.source.conv2.kernel),
            ("tgt_embed", &mut self.target_embed.rows),
            ("ctx_conv", &mut self.context_conv.kernel),
            ("ctx_dense", &mut self.context_dense.weight),
            ("mlp_hidden", &mut self.mlp_hidden.weight),
            ("mlp_out", &mut self.mlp_out.weight),
        ]
    }
}

struct SACache {
    src: ConvEncoderCache,
    y_emb: Tensor,
    ctx_conv: Tensor,
    query: Tensor,
    attention: Tensor,
    contexts: Vec<Vec<TokenId>>,
    mlp_in: Tensor,
    hidden: Tensor,
    logits: Tensor,
    probs: Tensor,
}

impl SAParams {
    pub fn new(source_vocab: usize, target_vocab: usize, cfg: &SAConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d) = (cfg.embed_dim, cfg.context_dim);
        SAParams {
            source: ConvEncoder::new(source_vocab, e, cfg.source_conv_width, d, &mut rng),
            target_embed: EmbedTable::uniform(target_vocab, e, INIT_SCALE, &mut rng),
            context_conv: ConvTanh::masked(2 * cfg.k + 1, e, d, cfg.left_only, &mut rng),
            context_dense: Dense::new(d, d, true, &mut rng),
            mlp_hidden: Dense::new(d + 2 * cfg.k * e, cfg.hidden_dim, true, &mut rng),
            mlp_out: Dense::new(cfg.hidden_dim, target_vocab, false, &mut rng),
            k: cfg.k,
            left_only: cfg.left_only,
        }
    }

    pub fn config(&self) -> SAConfig {
        SAConfig {
            embed_dim: self.target_embed.dim(),
            context_dim: self.context_dense.weight.value.shape()[0],
            hidden_dim: self.mlp_out.weight.value.shape()[0],
            k: self.k,
            source_conv_width: self.source.conv1.kernel.value.shape()[0],
            left_only: self.left_only,
        }
    }

    pub fn target_vocab_size(&self) -> usize {
        self.target_embed.vocab_size()
    }

    /// Replaces both lookup tables, e.g. with Hellinger PCA initializations.
    pub fn set_embeddings(&mut self, source: &EmbedTable, target: &EmbedTable) -> Result<()> {
        set_table(&mut self.source.embed, source)?;
        set_table(&mut self.target_embed, target)
    }

    fn run(&self, x: &[TokenId], y: &[TokenId]) -> Result<SACache> {
        let src = self.source.forward(x)?;
        let y_emb = embed_lookup(&self.target_embed.rows.value, y)?;
        let ctx_conv = self.context_conv.forward(&y_emb, self.target_embed.pad_row())?;
        let query = self.context_dense.forward(&ctx_conv)?;
        let contexts = context_ids(y, self.k, self.left_only);
        let ctx_emb = context_embeddings(&self.target_embed, &contexts)?;

        let d = src.out.cols();
        let mut attention = Tensor::zeros(&[y.len(), x.len()]);
        let mut mlp_in = Tensor::zeros(&[y.len(), d + ctx_emb.cols()]);
        for i in 0..y.len() {
            let w = attention_weights(&src.out, query.row(i))?;
            let a = source_summary(&w, &src.out)?;
            attention.row_mut(i).copy_from_slice(&w);
            let row = mlp_in.row_mut(i);
            row[..d].copy_from_slice(&a);
            row[d..].copy_from_slice(ctx_emb.row(i));
        }
        let hidden = self.mlp_hidden.forward(&mlp_in)?;
        let logits = self.mlp_out.forward(&hidden)?;
        let mut probs = Tensor::zeros(logits.shape());
        for i in 0..y.len() {
            probs.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
        }
        Ok(SACache {
            src,
            y_emb,
            ctx_conv,
            query,
            attention,
            contexts,
            mlp_in,
            hidden,
            logits,
            probs,
        })
    }

    /// Position distributions (`|y| x |Y|`) and attention map (`|y| x |x|`).
    pub fn forward(&self, x: &[TokenId], y: &[TokenId]) -> Result<(Tensor, Tensor)> {
        let c = self.run(x, y)?;
        Ok((c.probs, c.attention))
    }

    fn backward(&mut self, x: &[TokenId], y: &[TokenId], c: &SACache, g_logits: &Tensor) {
        let g_hidden = self.mlp_out.backward(&c.hidden, &c.logits, g_logits);
        let g_in = self.mlp_hidden.backward(&c.mlp_in, &c.hidden, &g_hidden);
        let d = c.src.out.cols();
        let ctx_w = g_in.cols() - d;

        let mut g_ctx = Tensor::zeros(&[y.len(), ctx_w]);
        let mut g_src = Tensor::zeros(c.src.out.shape());
        let mut g_query = Tensor::zeros(c.query.shape());
        for i in 0..y.len() {
            let gi = g_in.row(i);
            g_ctx.row_mut(i).copy_from_slice(&gi[d..]);
            let w = c.attention.row(i);
            let g_w = summary_backward(w, &c.src.out, &gi[..d], &mut g_src);
            let g_scores = softmax_backward(w, &g_w);
            let q = c.query.row(i);
            for (j, &gs) in g_scores.iter().enumerate() {
                g_src.row_mut(j).iter_mut().zip(q).for_each(|(g, qv)| *g += gs * qv);
                let sj = c.src.out.row(j).to_vec();
                g_query.row_mut(i).iter_mut().zip(&sj).for_each(|(g, sv)| *g += gs * sv);
            }
        }
        context_embeddings_backward(&mut self.target_embed.rows.grad, &c.contexts, &g_ctx);
        let g_conv = self.context_dense.backward(&c.ctx_conv, &c.query, &g_query);
        let pad = self.target_embed.pad_row().to_vec();
        let (g_emb, g_pad) = self.context_conv.backward(&c.y_emb, &pad, &c.ctx_conv, &g_conv);
        embed_backward(&mut self.target_embed.rows.grad, y, &g_emb);
        add_to_row(&mut self.target_embed.rows.grad, PAD, &g_pad);
        self.source.backward(x, &c.src, &g_src);
    }

    /// Summed cross-entropy of `y[i]` under row `i`, accumulating gradients.
    pub fn loss_and_grad(&mut self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let c = self.run(x, y)?;
        let mut loss = 0.0;
        let mut g_logits = Tensor::zeros(c.logits.shape());
        for (i, &tok) in y.iter().enumerate() {
            loss += cross_entropy(c.probs.row(i), tok)?;
            g_logits.row_mut(i).copy_from_slice(&cross_entropy_backward(c.probs.row(i), tok));
        }
        self.backward(x, y, &c, &g_logits);
        Ok(loss)
    }

    pub fn loss(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let (probs, _) = self.forward(x, y)?;
        y.iter().enumerate().map(|(i, &tok)| cross_entropy(probs.row(i), tok)).sum()
    }
}

pub(crate) fn set_table(dst: &mut EmbedTable, src: &EmbedTable) -> Result<()> {
    if dst.rows.value.shape() != src.rows.value.shape() {
        return Err(shape_err(format!(
            "embedding table {:?} does not fit {:?}",
            src.rows.value.shape(),
            dst.rows.value.shape()
        )));
    }
    dst.rows.value = src.rows.value.clone();
    Ok(())
}

/// Trains on (source, reference) pairs by maximum likelihood.
pub fn sa_train(
    pairs: &[(Sentence, Sentence)],
    source_vocab: usize,
    target_vocab: usize,
    model_cfg: &SAConfig,
    cfg: &TrainConfig,
    init: Option<SAParams>,
    validation: Option<&[(Sentence, Sentence)]>,
) -> Result<(SAParams, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Spec("cannot train on an empty dataset".into()));
    }
    let mut model = init.unwrap_or_else(|| SAParams::new(source_vocab, target_vocab, model_cfg, cfg.seed));
    let log = train_loop(
        &mut model,
        pairs,
        cfg,
        |m, (x, y)| m.loss_and_grad(x, y).expect("validated sentences"),
        validation.map(|v| move |m: &SAParams| mean_cross_entropy(m, v).expect("validated sentences")),
    );
    Ok((model, log))
}

/// Mean per-token cross-entropy of references under the model.
pub fn mean_cross_entropy(model: &SAParams, pairs: &[(Sentence, Sentence)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in pairs {
        total += model.loss(x, y)?;
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// `exp` of the mean per-token cross-entropy. The context mode
/// (bidirectional or left-only) is a property of the trained model.
pub fn perplexity(model: &SAParams, pairs: &[(Sentence, Sentence)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Spec("perplexity needs a non-empty dataset".into()));
    }
    Ok(mean_cross_entropy(model, pairs)?.exp())
}
