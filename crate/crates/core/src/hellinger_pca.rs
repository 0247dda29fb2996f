//! Word embeddings from Hellinger PCA of a bilingual co-occurrence matrix.
//!
//! Source and target words share one index space: row/column `s` is source
//! token `s`, row/column `|X| + t` is target token `t`. A sentence pair adds
//! one count between every source token and every target token (in both
//! directions), and tokens within `window` positions of each other in the
//! same sentence add one count to their monolingual block.

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::neural_core::{EmbedTable, Tensor};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    pub counts: Tensor,
    pub window: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
}

impl CooccurrenceMatrix {
    fn dim(&self) -> usize {
        self.source_vocab_size + self.target_vocab_size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.counts.data()[row * self.dim() + col]
    }

    /// Count between source token `s` and target token `t`.
    pub fn source_target(&self, s: usize, t: usize) -> f64 {
        self.get(s, self.source_vocab_size + t)
    }

    pub fn target_source(&self, t: usize, s: usize) -> f64 {
        self.get(self.source_vocab_size + t, s)
    }

    pub fn source_source(&self, a: usize, b: usize) -> f64 {
        self.get(a, b)
    }

    pub fn target_target(&self, a: usize, b: usize) -> f64 {
        self.get(self.source_vocab_size + a, self.source_vocab_size + b)
    }
}

pub fn count_cooccurrence(
    pairs: &[(Sentence, Sentence)],
    source_vocab_size: usize,
    target_vocab_size: usize,
    window: usize,
) -> Result<CooccurrenceMatrix> {
    let n = source_vocab_size + target_vocab_size;
    let mut counts = vec![0.0; n * n];
    let off = source_vocab_size;
    for (x, y) in pairs {
        x.check_vocab(source_vocab_size)?;
        y.check_vocab(target_vocab_size)?;
        for &s in x.iter() {
            for &t in y.iter() {
                counts[s * n + off + t] += 1.0;
                counts[(off + t) * n + s] += 1.0;
            }
        }
        for (ids, base) in [(x.ids(), 0), (y.ids(), off)] {
            for p in 0..ids.len() {
                let lo = p.saturating_sub(window);
                let hi = (p + window).min(ids.len() - 1);
                for q in lo..=hi {
                    if q != p {
                        counts[(base + ids[p]) * n + base + ids[q]] += 1.0;
                    }
                }
            }
        }
    }
    Ok(CooccurrenceMatrix {
        counts: Tensor::from_vec(&[n, n], counts)?,
        window,
        source_vocab_size,
        target_vocab_size,
    })
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the eigenvectors as columns of a
/// row-major `n x n` matrix, unsorted.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * frob.max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Result of the Hellinger PCA: the projected rows plus the principal
/// directions (as columns of `components`) and their variances.
#[derive(Debug, Clone, PartialEq)]
pub struct HellingerPca {
    pub embeddings: Tensor,
    pub components: Tensor,
    pub eigenvalues: Vec<f64>,
}

/// Rows of the count matrix mapped to square roots of their distributions.
pub fn hellinger_rows(counts: &Tensor) -> Tensor {
    let (rows, cols) = (counts.rows(), counts.cols());
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let row = counts.row(r);
        let total: f64 = row.iter().sum();
        let dst = out.row_mut(r);
        if total > 0.0 {
            dst.iter_mut().zip(row).for_each(|(d, &c)| *d = (c / total).sqrt());
        } else {
            dst.fill((1.0 / cols as f64).sqrt());
        }
    }
    out
}

pub fn hellinger_pca(counts: &Tensor, dim: usize) -> Result<HellingerPca> {
    let (rows, cols) = (counts.rows(), counts.cols());
    if dim == 0 || dim > rows.min(cols) {
        return Err(Error::Spec(format!(
            "embedding dimension {dim} must lie in 1..={}",
            rows.min(cols)
        )));
    }
    if counts.data().iter().all(|&c| c == 0.0) {
        return Err(Error::Spec("co-occurrence matrix has no nonzero row".into()));
    }
    let mut h = hellinger_rows(counts);
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        mean.iter_mut().zip(h.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for r in 0..rows {
        h.row_mut(r).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }

    let mut cov = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = h.row(r);
        for i in 0..cols {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let dst = &mut cov[i * cols..(i + 1) * cols];
            dst.iter_mut().zip(row).for_each(|(c, rj)| *c += ri * rj);
        }
    }
    cov.iter_mut().for_each(|c| *c /= rows as f64);

    let (values, vectors) = jacobi_eigen(&cov, cols);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut components = Tensor::zeros(&[cols, dim]);
    let mut eigenvalues = Vec::with_capacity(dim);
    for (k, &idx) in order.iter().take(dim).enumerate() {
        let col: Vec<f64> = (0..cols).map(|i| vectors[i * cols + idx]).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            components.data_mut()[i * dim + k] = sign * v;
        }
        eigenvalues.push(values[idx]);
    }

    let embeddings = crate::neural_core::linear(&h, &components)?;
    Ok(HellingerPca {
        embeddings,
        components,
        eigenvalues,
    })
}

pub fn hellinger_embed(counts: &CooccurrenceMatrix, dim: usize) -> Result<EmbedTable> {
    EmbedTable::new(hellinger_pca(&counts.counts, dim)?.embeddings)
}

/// Splits a joint embedding into (source table, target table).
pub fn split_tables(joint: &EmbedTable, source_vocab_size: usize) -> Result<(EmbedTable, EmbedTable)> {
    let t = &joint.rows.value;
    let dim = t.cols();
    let (src, tgt) = t.data().split_at(source_vocab_size * dim);
    Ok((
        EmbedTable::new(Tensor::from_vec(&[source_vocab_size, dim], src.to_vec())?)?,
        EmbedTable::new(Tensor::from_vec(&[t.rows() - source_vocab_size, dim], tgt.to_vec())?)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(ids: &[usize]) -> Sentence {
        Sentence::new(ids.to_vec()).unwrap()
    }

    /// Nested-loop recount with explicit position pairs.
    fn recount(pairs: &[(Sentence, Sentence)], sv: usize, tv: usize, window: usize) -> Vec<f64> {
        let n = sv + tv;
        let mut m = vec![0.0; n * n];
        for (x, y) in pairs {
            for i in 0..x.len() {
                for j in 0..y.len() {
                    m[x[i] * n + sv + y[j]] += 1.0;
                    m[(sv + y[j]) * n + x[i]] += 1.0;
                }
            }
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if i != j && i.abs_diff(j) <= window {
                        m[x[i] * n + x[j]] += 1.0;
                    }
                }
            }
            for i in 0..y.len() {
                for j in 0..y.len() {
                    if i != j && i.abs_diff(j) <= window {
                        m[(sv + y[i]) * n + sv + y[j]] += 1.0;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn single_pair_counts() {
        let m = count_cooccurrence(&[(s(&[3]), s(&[4]))], 5, 6, 2).unwrap();
        assert_eq!(m.source_target(3, 4), 1.0);
        assert_eq!(m.target_source(4, 3), 1.0);
        assert_eq!(m.counts.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn duplicated_pairs_double_counts() {
        let p = (s(&[3, 4, 3]), s(&[5, 6]));
        let once = count_cooccurrence(&[p.clone()], 6, 7, 1).unwrap();
        let twice = count_cooccurrence(&[p.clone(), p], 6, 7, 1).unwrap();
        for (a, b) in once.counts.data().iter().zip(twice.counts.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn counts_match_recount() {
        let pairs = vec![
            (s(&[3, 4, 5]), s(&[3, 3, 6, 7])),
            (s(&[5, 5]), s(&[4])),
            (s(&[6, 3, 4, 6]), s(&[7, 5, 4])),
        ];
        let m = count_cooccurrence(&pairs, 7, 8, 1).unwrap();
        assert_eq!(m.counts.data(), recount(&pairs, 7, 8, 1).as_slice());
        let m = count_cooccurrence(&pairs, 7, 8, 0).unwrap();
        assert_eq!(m.counts.data(), recount(&pairs, 7, 8, 0).as_slice());
    }

    #[test]
    fn count_rejects_out_of_vocab() {
        assert!(matches!(
            count_cooccurrence(&[(s(&[9]), s(&[3]))], 5, 5, 1),
            Err(Error::IndexOutOfVocab { .. })
        ));
    }

    #[test]
    fn hellinger_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        c.data_mut().iter_mut().for_each(|v| *v = v.abs().round() * 3.0);
        c.row_mut(2).fill(0.0);
        let h = hellinger_rows(&c);
        for r in 0..5 {
            let norm: f64 = h.row(r).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_counts_give_collinear_embeddings() {
        let base = [1.0, 2.0, 0.0, 5.0];
        let scales = [1.0, 3.0, 0.5, 7.0, 2.0];
        let rows: Vec<Vec<f64>> = scales.iter().map(|k| base.iter().map(|b| b * k).collect()).collect();
        // rows of one distribution are identical after normalization; add a
        // different row so the centered matrix is not all zero
        let mut rows2 = rows.clone();
        rows2.push(vec![0.0, 0.0, 1.0, 0.0]);
        let pca = hellinger_pca(&Tensor::from_rows(&rows2).unwrap(), 1).unwrap();
        let e = &pca.embeddings;
        for i in 0..e.rows() {
            for j in 0..e.rows() {
                let (a, b) = (e.row(i)[0], e.row(j)[0]);
                if a.abs() > 1e-12 && b.abs() > 1e-12 {
                    let cos = a * b / (a.abs() * b.abs());
                    assert!((cos.abs() - 1.0).abs() < 1e-9);
                }
            }
        }
        // rank-1 counts on their own: every row has the same distribution
        let pca = hellinger_pca(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        let first = pca.embeddings.row(0)[0];
        for r in 0..pca.embeddings.rows() {
            assert!((pca.embeddings.row(r)[0] - first).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_identical_embeddings() {
        let c = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 0.0, 1.0],
            vec![1.0, 2.0, 3.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let pca = hellinger_pca(&c, 2).unwrap();
        assert_eq!(pca.embeddings.row(0), pca.embeddings.row(2));
    }

    #[test]
    fn dim_too_large_is_an_error() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(matches!(hellinger_pca(&c, 3), Err(Error::Spec(_))));
        assert!(matches!(hellinger_pca(&Tensor::zeros(&[3, 3]), 1), Err(Error::Spec(_))));
    }

    #[test]
    fn jacobi_agrees_with_reference_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 7;
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            }
        }
        let (mut values, _) = jacobi_eigen(&a, n);
        values.sort_by(f64::total_cmp);
        let reference = nalgebra::DMatrix::from_row_slice(n, n, &a).symmetric_eigen();
        let mut expected: Vec<f64> = reference.eigenvalues.iter().copied().collect();
        expected.sort_by(f64::total_cmp);
        for (g, e) in values.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
    }

    #[test]
    fn projection_variance_matches_top_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..6).map(|_| rng.gen_range(0..10) as f64).collect())
            .collect();
        let counts = Tensor::from_rows(&rows).unwrap();
        let pca = hellinger_pca(&counts, 2).unwrap();

        // reference: dense covariance of the Hellinger rows, eigenvalues by nalgebra
        let h = hellinger_rows(&counts);
        let hm = nalgebra::DMatrix::from_row_slice(6, 6, h.data());
        let mean = hm.row_mean();
        let centered = nalgebra::DMatrix::from_fn(6, 6, |i, j| hm[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / 6.0;
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));

        let e = &pca.embeddings;
        let variance: f64 = (0..2)
            .map(|k| (0..6).map(|r| e.row(r)[k].powi(2)).sum::<f64>() / 6.0)
            .sum();
        assert!((variance - (eig[0] + eig[1])).abs() < 1e-8, "{variance} vs {}", eig[0] + eig[1]);

        // orthonormal projection directions
        let c = &pca.components;
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = (0..6).map(|i| c.row(i)[a] * c.row(i)[b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        // sign convention: largest-magnitude coordinate positive
        for k in 0..2 {
            let col: Vec<f64> = (0..6).map(|i| c.row(i)[k]).collect();
            let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn corpus_order_does_not_change_embeddings() {
        let pairs = vec![
            (s(&[3, 4, 5]), s(&[3, 6, 7])),
            (s(&[5, 5, 6]), s(&[4, 5])),
            (s(&[6, 3, 4, 6]), s(&[7, 5, 4])),
        ];
        let mut rev = pairs.clone();
        rev.reverse();
        let a = hellinger_embed(&count_cooccurrence(&pairs, 7, 8, 1).unwrap(), 3).unwrap();
        let b = hellinger_embed(&count_cooccurrence(&rev, 7, 8, 1).unwrap(), 3).unwrap();
        assert_eq!(a, b);
        let (src, tgt) = split_tables(&a, 7).unwrap();
        assert_eq!((src.vocab_size(), tgt.vocab_size(), src.dim()), (7, 8, 3));
    }
}
