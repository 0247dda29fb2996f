//! Dense tensors and the handful of layers every model here is built from.
//!
//! Each layer is a pair of free functions: a forward pass and a backward pass
//! that takes the forward inputs and the upstream gradient, accumulates
//! parameter gradients in place and returns the input gradient. Models wire
//! these together by hand; there is no tape.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Tensor::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// A trainable tensor with its gradient and an optional {0,1} mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub mask: Option<Tensor>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            mask: None,
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        Parameter::new(Tensor::uniform(shape, scale, rng))
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.value.shape() {
            return Err(shape_err("mask shape differs from value shape"));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Zeroes value and gradient wherever the mask is 0.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for ((v, g), m) in self.value.data.iter_mut().zip(&mut self.grad.data).zip(&mask.data) {
                if *m == 0.0 {
                    *v = 0.0;
                    *g = 0.0;
                }
            }
        }
    }

    pub fn mask_grad(&mut self) {
        if let Some(mask) = &self.mask {
            for (g, m) in self.grad.data.iter_mut().zip(&mask.data) {
                if *m == 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m.data[idx] == 0.0)
    }
}

/// Models expose their parameters by name for SGD, checkpoints and gradient checks.
pub trait Trainable {
    fn parameters(&self) -> Vec<(&'static str, &Parameter)>;
    fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// Lookup table with one row per vocabulary entry; row 0 is the padding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTable {
    pub rows: Parameter,
}

impl EmbedTable {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[1] == 0 {
            return Err(shape_err("embedding table must be (vocab, dim) with dim >= 1"));
        }
        Ok(EmbedTable {
            rows: Parameter::new(rows),
        })
    }

    pub fn uniform<R: Rng>(vocab: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        EmbedTable {
            rows: Parameter::uniform(&[vocab, dim], scale, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.value.cols()
    }

    pub fn pad_row(&self) -> &[f64] {
        self.rows.value.row(crate::corpus::PAD)
    }
}

pub fn embed_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let size = table.rows();
    let dim = table.cols();
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= size {
            return Err(Error::IndexOutOfVocab { id, size });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(&[ids.len(), dim], out)
}

/// Scatters row gradients back into the table gradient.
pub fn embed_backward(table_grad: &mut Tensor, ids: &[usize], grad_out: &Tensor) {
    for (i, &id) in ids.iter().enumerate() {
        table_grad
            .row_mut(id)
            .iter_mut()
            .zip(grad_out.row(i))
            .for_each(|(g, d)| *g += d);
    }
}

fn check_conv(input: &Tensor, kernel: &Tensor, pad: &[f64]) -> Result<(usize, usize, usize)> {
    let ks = kernel.shape();
    if ks.len() != 3 {
        return Err(shape_err(format!("conv kernel must be 3-d, got {ks:?}")));
    }
    let (w, d_in, d_out) = (ks[0], ks[1], ks[2]);
    if w % 2 == 0 {
        return Err(shape_err(format!("conv width {w} must be odd")));
    }
    if input.shape().len() != 2 || input.cols() != d_in || pad.len() != d_in {
        return Err(shape_err(format!(
            "conv input {:?} / pad {} incompatible with kernel {ks:?}",
            input.shape(),
            pad.len()
        )));
    }
    Ok((w, d_in, d_out))
}

/// Same-length temporal convolution; positions outside the input read `pad`.
pub fn temporal_conv(input: &Tensor, kernel: &Tensor, pad: &[f64]) -> Result<Tensor> {
    let (w, d_in, d_out) = check_conv(input, kernel, pad)?;
    let len = input.rows();
    let half = (w / 2) as isize;
    let k = kernel.data();
    let mut out = vec![0.0; len * d_out];
    for t in 0..len {
        let o = &mut out[t * d_out..(t + 1) * d_out];
        for j in 0..w {
            let src = t as isize + j as isize - half;
            let x = if src < 0 || src >= len as isize {
                pad
            } else {
                input.row(src as usize)
            };
            let slice = &k[j * d_in * d_out..(j + 1) * d_in * d_out];
            for (a, &xa) in x.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                let krow = &slice[a * d_out..(a + 1) * d_out];
                o.iter_mut().zip(krow).for_each(|(ov, kv)| *ov += xa * kv);
            }
        }
    }
    Tensor::from_vec(&[len, d_out], out)
}

/// Returns (input gradient, pad gradient); accumulates into `kernel_grad`.
pub fn temporal_conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    pad: &[f64],
    grad_out: &Tensor,
    kernel_grad: &mut Tensor,
) -> (Tensor, Vec<f64>) {
    let ks = kernel.shape();
    let (w, d_in, d_out) = (ks[0], ks[1], ks[2]);
    let len = input.rows();
    let half = (w / 2) as isize;
    let k = kernel.data();
    let kg = kernel_grad.data_mut();
    let mut grad_in = Tensor::zeros(&[len, d_in]);
    let mut grad_pad = vec![0.0; d_in];
    for t in 0..len {
        let go = grad_out.row(t);
        for j in 0..w {
            let src = t as isize + j as isize - half;
            let inside = src >= 0 && src < len as isize;
            let x = if inside { input.row(src as usize) } else { pad };
            let base = j * d_in * d_out;
            let mut gx = vec![0.0; d_in];
            for a in 0..d_in {
                let off = base + a * d_out;
                let krow = &k[off..off + d_out];
                let gkrow = &mut kg[off..off + d_out];
                let xa = x[a];
                let mut acc = 0.0;
                for b in 0..d_out {
                    gkrow[b] += xa * go[b];
                    acc += krow[b] * go[b];
                }
                gx[a] = acc;
            }
            let target = if inside {
                grad_in.row_mut(src as usize)
            } else {
                &mut grad_pad[..]
            };
            target.iter_mut().zip(&gx).for_each(|(g, v)| *g += v);
        }
    }
    (grad_in, grad_pad)
}

/// Mask for a width-`w` kernel that zeroes the center slice and, when
/// `left_only`, every slice to its right.
pub fn center_mask(w: usize, d_in: usize, d_out: usize, left_only: bool) -> Tensor {
    let mut mask = Tensor::zeros(&[w, d_in, d_out]);
    let half = w / 2;
    for j in 0..w {
        let keep = j < half || (j > half && !left_only);
        if keep {
            mask.data_mut()[j * d_in * d_out..(j + 1) * d_in * d_out].fill(1.0);
        }
    }
    mask
}

/// `input (n x d_in) . weight (d_in x d_out)`, no bias.
pub fn linear(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 2 || input.cols() != ws[0] {
        return Err(shape_err(format!(
            "linear input {:?} incompatible with weight {ws:?}",
            input.shape()
        )));
    }
    let (n, d_in, d_out) = (input.rows(), ws[0], ws[1]);
    let w = weight.data();
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        let x = input.row(r);
        let o = &mut out[r * d_out..(r + 1) * d_out];
        for a in 0..d_in {
            let xa = x[a];
            if xa == 0.0 {
                continue;
            }
            o.iter_mut().zip(&w[a * d_out..(a + 1) * d_out]).for_each(|(ov, wv)| *ov += xa * wv);
        }
    }
    Tensor::from_vec(&[n, d_out], out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, weight_grad: &mut Tensor) -> Tensor {
    let (n, d_in, d_out) = (input.rows(), weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let wg = weight_grad.data_mut();
    let mut grad_in = Tensor::zeros(&[n, d_in]);
    for r in 0..n {
        let x = input.row(r);
        let go = grad_out.row(r);
        let gi = grad_in.row_mut(r);
        for a in 0..d_in {
            let off = a * d_out;
            let mut acc = 0.0;
            for b in 0..d_out {
                wg[off + b] += x[a] * go[b];
                acc += w[off + b] * go[b];
            }
            gi[a] = acc;
        }
    }
    grad_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, input: &Tensor) -> Tensor {
    let f: fn(f64) -> f64 = match kind {
        Activation::Tanh => f64::tanh,
        Activation::Sigmoid => sigmoid,
    };
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&x| f(x)).collect(),
    }
}

/// Backward through an elementwise activation given its forward output.
pub fn activation_backward(kind: Activation, output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| match kind {
            Activation::Tanh => g * (1.0 - y * y),
            Activation::Sigmoid => g * y * (1.0 - y),
        })
        .collect();
    Tensor {
        shape: output.shape.clone(),
        data,
    }
}

pub fn softmax(input: &[f64]) -> Vec<f64> {
    let max = input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = input.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Gradient of the softmax input given its output and the output gradient.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// `-ln dist[target]`.
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    match dist.get(target) {
        Some(&p) => Ok(-p.max(f64::MIN_POSITIVE).ln()),
        None => Err(Error::IndexOutOfVocab {
            id: target,
            size: dist.len(),
        }),
    }
}

/// Gradient of `cross_entropy(softmax(logits), target)` with respect to the logits.
pub fn cross_entropy_backward(dist: &[f64], target: usize) -> Vec<f64> {
    let mut g = dist.to_vec();
    g[target] -= 1.0;
    g
}

/// Binary cross-entropy of probability `p` against label `label` (1 = positive).
pub fn binary_cross_entropy(p: f64, label: bool) -> f64 {
    let q = if label { p } else { 1.0 - p };
    -q.max(f64::MIN_POSITIVE).ln()
}

/// `value -= lr * grad`, then clears the gradient; masked entries stay zero.
pub fn sgd_update<'a, I>(params: I, lr: f64)
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    for p in params {
        p.mask_grad();
        if lr != 0.0 {
            p.value
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .for_each(|(v, g)| *v -= lr * g);
        }
        p.zero_grad();
        p.apply_mask();
    }
}

pub fn sgd_step<M: Trainable + ?Sized>(model: &mut M, lr: f64) {
    sgd_update(model.parameters_mut().into_iter().map(|(_, p)| p), lr);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and flat index of the worst entry.
    pub worst: Option<(&'static str, usize)>,
    pub checked: usize,
    pub skipped_masked: usize,
}

/// Multiplies every lookup table of `model` by `factor`, moving test
/// instances away from the near-zero embedding init.
#[cfg(test)]
pub(crate) fn scale_embeddings<M: Trainable + ?Sized>(model: &mut M, factor: f64) {
    for (name, p) in model.parameters_mut() {
        if name.ends_with("embed") {
            p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Compares analytic gradients with central differences on every unmasked
/// parameter entry.
///
/// `loss_and_grad` must compute the loss and accumulate gradients into the
/// model's parameters (they are zeroed first); `loss` evaluates the loss only.
pub fn grad_check<M, G, L>(model: &mut M, mut loss_and_grad: G, mut loss: L, eps: f64) -> GradCheckReport
where
    M: Trainable,
    G: FnMut(&mut M) -> f64,
    L: FnMut(&M) -> f64,
{
    model.zero_grad();
    loss_and_grad(model);
    for (_, p) in model.parameters_mut() {
        p.mask_grad();
    }
    let analytic: Vec<Tensor> = model.parameters().iter().map(|(_, p)| p.grad.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_masked: 0,
    };
    let n_params = analytic.len();
    for pi in 0..n_params {
        let len = analytic[pi].len();
        for idx in 0..len {
            let (name, masked) = {
                let params = model.parameters();
                (params[pi].0, params[pi].1.is_masked(idx))
            };
            if masked {
                report.skipped_masked += 1;
                continue;
            }
            let orig = model.parameters()[pi].1.value.data[idx];
            model.parameters_mut()[pi].1.value.data[idx] = orig + eps;
            let plus = loss(model);
            model.parameters_mut()[pi].1.value.data[idx] = orig - eps;
            let minus = loss(model);
            model.parameters_mut()[pi].1.value.data[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name, idx));
            }
        }
    }
    model.zero_grad();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn embed_lookup_rows_and_backward_accumulates() {
        let mut eye = Tensor::zeros(&[4, 4]);
        for k in 0..4 {
            eye.row_mut(k)[k] = 1.0;
        }
        assert_eq!(embed_lookup(&eye, &[2]).unwrap().data(), [0.0, 0.0, 1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let out = embed_lookup(&table, &[4, 0]).unwrap();
        assert_eq!(out.row(0), table.row(4));
        assert_eq!(out.row(1), table.row(0));

        let out = embed_lookup(&table, &[1, 1]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        let mut g = Tensor::zeros(&[5, 3]);
        let go = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]).unwrap();
        embed_backward(&mut g, &[1, 1], &go);
        assert_eq!(g.row(1), [11.0, 22.0, 33.0]);

        assert!(matches!(embed_lookup(&table, &[5]), Err(Error::IndexOutOfVocab { id: 5, size: 5 })));
    }

    #[test]
    fn conv_identity_width_one() {
        let mut k = Tensor::zeros(&[1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(temporal_conv(&x, &k, &[0.0, 0.0]).unwrap(), x);
    }

    #[test]
    fn conv_hand_case() {
        let k = Tensor::from_vec(&[3, 1, 1], vec![1.0; 3]).unwrap();
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(temporal_conv(&x, &k, &[0.0]).unwrap().data(), [3.0, 6.0, 5.0]);
        // a learned pad vector enters at both edges
        assert_eq!(temporal_conv(&x, &k, &[10.0]).unwrap().data(), [13.0, 6.0, 15.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let k = Tensor::zeros(&[2, 1, 1]);
        let x = Tensor::zeros(&[3, 1]);
        assert!(matches!(temporal_conv(&x, &k, &[0.0]), Err(Error::Shape(_))));
        let k = Tensor::zeros(&[3, 2, 1]);
        assert!(matches!(temporal_conv(&x, &k, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn center_masked_conv_ignores_center_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernel = Parameter::uniform(&[5, 3, 4], 1.0, &mut rng)
            .with_mask(center_mask(5, 3, 4, false))
            .unwrap();
        let pad = vec![0.3, -0.2, 0.1];
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let base = temporal_conv(&x, &kernel.value, &pad).unwrap();
        for t in 0..6 {
            let mut xp = x.clone();
            xp.row_mut(t).iter_mut().for_each(|v| *v += 5.0);
            let out = temporal_conv(&xp, &kernel.value, &pad).unwrap();
            assert_eq!(out.row(t), base.row(t));
        }
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(linear(&x, &eye).unwrap(), x);
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(linear(&x, &zero).unwrap().data(), [0.0; 6]);
        assert!(matches!(linear(&x, &Tensor::zeros(&[3, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0f64.tanh(), 0.0);
        assert!(close(sigmoid(36.0), 1.0, 1e-15));
        assert!(close(sigmoid(-36.0), 0.0, 1e-15));
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0).is_finite());
        let t = Tensor::from_vec(&[3], vec![-50.0, 0.0, 50.0]).unwrap();
        let s = activation(Activation::Sigmoid, &t);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), [0.5, 0.5]);
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(close(s[0], 1.0, 1e-12) && s[1] >= 0.0);
        let s = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!(close(cross_entropy(&[0.25; 4], 2).unwrap(), 4f64.ln(), 1e-12));
        assert!(close(cross_entropy(&[0.25, 0.75], 1).unwrap(), -(0.75f64.ln()), 1e-15));
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::IndexOutOfVocab { .. })));
    }

    #[test]
    fn sgd_cases() {
        let mut p = Parameter::new(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        sgd_update([&mut p], 0.5);
        assert_eq!(p.value.data(), [1.0, -2.0]);

        p.grad = p.value.clone();
        sgd_update([&mut p], 1.0);
        assert_eq!(p.value.data(), [0.0, 0.0]);
        assert_eq!(p.grad.data(), [0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut k = Parameter::uniform(&[3, 1, 1], 1.0, &mut rng)
            .with_mask(center_mask(3, 1, 1, false))
            .unwrap();
        k.grad = Tensor::from_vec(&[3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
        sgd_update([&mut k], 0.1);
        assert_eq!(k.value.data()[1], 0.0);
    }

    struct Sum {
        theta: Parameter,
    }

    impl Trainable for Sum {
        fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
            vec![("theta", &self.theta)]
        }
        fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
            vec![("theta", &mut self.theta)]
        }
    }

    #[test]
    fn grad_check_linear_loss_and_mask_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Sum {
            theta: Parameter::uniform(&[3, 1, 2], 1.0, &mut rng)
                .with_mask(center_mask(3, 1, 2, false))
                .unwrap(),
        };
        let report = grad_check(
            &mut m,
            |m| {
                m.theta.grad.fill(1.0);
                m.theta.value.data().iter().sum()
            },
            |m| m.theta.value.data().iter().sum(),
            1e-5,
        );
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 4);
        assert_eq!(report.skipped_masked, 2);
    }

    /// conv -> tanh -> linear -> softmax -> cross-entropy on a random instance.
    struct Tiny {
        kernel: Parameter,
        pad: Parameter,
        out: Parameter,
    }

    impl Trainable for Tiny {
        fn parameters(&self) -> Vec<(&'static str, &Parameter)> {
            vec![("kernel", &self.kernel), ("pad", &self.pad), ("out", &self.out)]
        }
        fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter)> {
            vec![("kernel", &mut self.kernel), ("pad", &mut self.pad), ("out", &mut self.out)]
        }
    }

    impl Tiny {
        fn loss(&self, x: &Tensor, targets: &[usize], backward: bool) -> (f64, Option<(Tensor, Vec<f64>, Tensor)>) {
            let h = temporal_conv(x, &self.kernel.value, self.pad.value.data()).unwrap();
            let a = activation(Activation::Tanh, &h);
            let logits = linear(&a, &self.out.value).unwrap();
            let mut loss = 0.0;
            let mut g_logits = Tensor::zeros(logits.shape());
            for (t, &y) in targets.iter().enumerate() {
                let p = softmax(logits.row(t));
                loss += cross_entropy(&p, y).unwrap();
                g_logits.row_mut(t).copy_from_slice(&cross_entropy_backward(&p, y));
            }
            if !backward {
                return (loss, None);
            }
            let mut g_out = Tensor::zeros(self.out.value.shape());
            let g_a = linear_backward(&a, &self.out.value, &g_logits, &mut g_out);
            let g_h = activation_backward(Activation::Tanh, &a, &g_a);
            let mut g_k = Tensor::zeros(self.kernel.value.shape());
            let (_, g_pad) = temporal_conv_backward(x, &self.kernel.value, self.pad.value.data(), &g_h, &mut g_k);
            (loss, Some((g_k, g_pad, g_out)))
        }
    }

    #[test]
    fn grad_check_composed_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let targets = [0, 2, 1, 3];
        let mut m = Tiny {
            kernel: Parameter::uniform(&[3, 3, 5], 0.5, &mut rng),
            pad: Parameter::uniform(&[3], 0.5, &mut rng),
            out: Parameter::uniform(&[5, 4], 0.5, &mut rng),
        };
        let report = grad_check(
            &mut m,
            |m| {
                let (loss, grads) = m.loss(&x, &targets, true);
                let (gk, gp, go) = grads.unwrap();
                m.kernel.grad.add_assign(&gk);
                m.pad.grad.data_mut().iter_mut().zip(gp).for_each(|(a, b)| *a += b);
                m.out.grad.add_assign(&go);
                loss
            },
            |m| m.loss(&x, &targets, false).0,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, 45 + 3 + 20);
    }
}
