//! Building blocks shared by the detector and the substitution models.

use rand::Rng;

use crate::error::Result;
use crate::neural_core::{
    activation, activation_backward, center_mask, embed_backward, embed_lookup, linear, linear_backward,
    temporal_conv, temporal_conv_backward, Activation, EmbedTable, Parameter, Tensor,
};

pub const INIT_SCALE: f64 = 0.05;

/// Glorot bound `sqrt(6 / (fan_in + fan_out))` for weight matrices and kernels.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Temporal convolution followed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTanh {
    pub kernel: Parameter,
}

impl ConvTanh {
    pub fn new<R: Rng>(width: usize, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        ConvTanh {
            kernel: Parameter::uniform(&[width, d_in, d_out], glorot(width * d_in, d_out), rng),
        }
    }

    /// Kernel whose center slice (and right half, for `left_only`) is masked out.
    pub fn masked<R: Rng>(width: usize, d_in: usize, d_out: usize, left_only: bool, rng: &mut R) -> Self {
        let kernel = Parameter::uniform(&[width, d_in, d_out], glorot(width * d_in, d_out), rng)
            .with_mask(center_mask(width, d_in, d_out, left_only))
            .expect("mask shape matches kernel");
        ConvTanh { kernel }
    }

    pub fn forward(&self, input: &Tensor, pad: &[f64]) -> Result<Tensor> {
        Ok(activation(Activation::Tanh, &temporal_conv(input, &self.kernel.value, pad)?))
    }

    /// Returns (input gradient, pad gradient).
    pub fn backward(&mut self, input: &Tensor, pad: &[f64], output: &Tensor, grad_out: &Tensor) -> (Tensor, Vec<f64>) {
        let g = activation_backward(Activation::Tanh, output, grad_out);
        let res = temporal_conv_backward(input, &self.kernel.value, pad, &g, &mut self.kernel.grad);
        self.kernel.mask_grad();
        res
    }
}

/// Bias-free linear layer, optionally followed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub tanh: bool,
}

impl Dense {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, tanh: bool, rng: &mut R) -> Self {
        Dense {
            weight: Parameter::uniform(&[d_in, d_out], glorot(d_in, d_out), rng),
            tanh,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let z = linear(input, &self.weight.value)?;
        Ok(if self.tanh { activation(Activation::Tanh, &z) } else { z })
    }

    pub fn backward(&mut self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
        let g = if self.tanh {
            activation_backward(Activation::Tanh, output, grad_out)
        } else {
            grad_out.clone()
        };
        linear_backward(input, &self.weight.value, &g, &mut self.weight.grad)
    }
}

/// Embedding lookup followed by two conv+tanh layers. The first layer pads
/// with the table's `<pad>` row, the second with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub embed: EmbedTable,
    pub conv1: ConvTanh,
    pub conv2: ConvTanh,
}

pub struct ConvEncoderCache {
    emb: Tensor,
    h1: Tensor,
    pub out: Tensor,
}

impl ConvEncoder {
    pub fn new<R: Rng>(vocab: usize, embed_dim: usize, width: usize, out_dim: usize, rng: &mut R) -> Self {
        ConvEncoder {
            embed: EmbedTable::uniform(vocab, embed_dim, INIT_SCALE, rng),
            conv1: ConvTanh::new(width, embed_dim, out_dim, rng),
            conv2: ConvTanh::new(width, out_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ConvEncoderCache> {
        let emb = embed_lookup(&self.embed.rows.value, ids)?;
        let h1 = self.conv1.forward(&emb, self.embed.pad_row())?;
        let zeros = vec![0.0; h1.cols()];
        let out = self.conv2.forward(&h1, &zeros)?;
        Ok(ConvEncoderCache { emb, h1, out })
    }

    pub fn backward(&mut self, ids: &[usize], cache: &ConvEncoderCache, grad_out: &Tensor) {
        let zeros = vec![0.0; cache.h1.cols()];
        let (g_h1, _) = self.conv2.backward(&cache.h1, &zeros, &cache.out, grad_out);
        let pad = self.embed.pad_row().to_vec();
        let (g_emb, g_pad) = self.conv1.backward(&cache.emb, &pad, &cache.h1, &g_h1);
        embed_backward(&mut self.embed.rows.grad, ids, &g_emb);
        add_to_row(&mut self.embed.rows.grad, crate::corpus::PAD, &g_pad);
    }
}

pub fn add_to_row(t: &mut Tensor, row: usize, g: &[f64]) {
    t.row_mut(row).iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Concatenation of the embeddings of the `2k` neighbours of every position,
/// left to right, with `<pad>` beyond the sentence edges. In `left_only` mode
/// the right neighbours are always `<pad>`.
pub fn context_ids(ids: &[usize], k: usize, left_only: bool) -> Vec<Vec<usize>> {
    let len = ids.len() as isize;
    (0..ids.len())
        .map(|i| {
            let i = i as isize;
            let offsets = (-(k as isize)..0).chain(1..=k as isize);
            offsets
                .map(|o| {
                    let p = i + o;
                    if p < 0 || p >= len || (left_only && o > 0) {
                        crate::corpus::PAD
                    } else {
                        ids[p as usize]
                    }
                })
                .collect()
        })
        .collect()
}

/// Flattened context embeddings, one row per position.
pub fn context_embeddings(table: &EmbedTable, contexts: &[Vec<usize>]) -> Result<Tensor> {
    let dim = table.dim();
    let width = contexts.first().map_or(0, Vec::len) * dim;
    let mut data = Vec::with_capacity(contexts.len() * width);
    for ctx in contexts {
        data.extend(embed_lookup(&table.rows.value, ctx)?.into_data());
    }
    Tensor::from_vec(&[contexts.len(), width], data)
}

pub fn context_embeddings_backward(table_grad: &mut Tensor, contexts: &[Vec<usize>], grad: &Tensor) {
    let dim = table_grad.cols();
    for (r, ctx) in contexts.iter().enumerate() {
        let g = grad.row(r);
        for (slot, &id) in ctx.iter().enumerate() {
            add_to_row(table_grad, id, &g[slot * dim..(slot + 1) * dim]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contexts_exclude_center_and_pad_edges() {
        let ctx = context_ids(&[5, 6, 7], 2, false);
        assert_eq!(ctx[0], [0, 0, 6, 7]);
        assert_eq!(ctx[1], [0, 5, 7, 0]);
        assert_eq!(ctx[2], [5, 6, 0, 0]);
        let left = context_ids(&[5, 6, 7], 2, true);
        assert_eq!(left[2], [5, 6, 0, 0]);
        assert_eq!(left[0], [0, 0, 0, 0]);
    }
}
