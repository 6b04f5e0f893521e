//! Region-wise brain tokenizers.
//!
//! Each region's betas pass through `W2·GeLU(W1·x + b1) + b2` into a k-dim
//! space, then through the fixed transpose of a PCA basis fitted on decoder
//! token embeddings, landing in the decoder's D-dim embedding space.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Parcellation;
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, Mat};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankProjection {
    /// k×D, orthonormal rows in decreasing eigenvalue order.
    pub components: Mat,
    pub mean: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl LowRankProjection {
    pub fn k(&self) -> usize {
        self.components.rows
    }

    pub fn dim(&self) -> usize {
        self.components.cols
    }

    /// `Pᵀ·z` for a k-vector `z`.
    pub fn lift(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, zi) in z.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.components.row(i)) {
                *o += zi * p;
            }
        }
        out
    }

    /// `P·g` for a D-vector `g` (the adjoint of [`lift`](Self::lift)).
    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|i| crate::linalg::dot(self.components.row(i), g))
            .collect()
    }
}

/// Mean-centred PCA keeping the fewest components whose cumulative explained
/// variance ratio reaches `variance_target`.
pub fn fit_projection(embeddings: &[Vec<f64>], variance_target: f64) -> Result<LowRankProjection> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two embeddings".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance target {variance_target} outside (0, 1]"
        )));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings have differing widths".into()));
    }
    let n = embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for e in embeddings {
        let c: Vec<f64> = e.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let scale = vals.first().copied().unwrap_or(0.0).max(1.0);
    if total <= 1e-12 * scale || !total.is_finite() {
        return Err(Error::Degenerate("embeddings have zero total variance".into()));
    }
    let mut k = 0;
    let mut cum = 0.0;
    let mut ratios = Vec::new();
    // Tolerance absorbs roundoff when the target is hit exactly (e.g. 1.0).
    while k < d {
        let r = vals[k] / total;
        cum += r;
        ratios.push(r);
        k += 1;
        if cum >= variance_target - 1e-12 {
            break;
        }
    }
    let mut components = Mat::zeros(k, d);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let norm = col.norm();
        // deterministic sign: largest-magnitude entry positive
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(row, j, sign * col[j] / norm);
        }
    }
    Ok(LowRankProjection {
        components,
        mean,
        explained_variance_ratio: ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTokenizer {
    pub region_index: usize,
    /// h×n_v
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// k×h
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl RegionTokenizer {
    pub fn input_width(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.rows
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            region_index: self.region_index,
            w1: self.w1.zeros_like(),
            b1: vec![0.0; self.b1.len()],
            w2: self.w2.zeros_like(),
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1.add_assign(&other.w1);
        self.w2.add_assign(&other.w2);
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

fn kaiming_uniform(r: &mut rng::Rng, rows: usize, fan_in: usize) -> (Mat, Vec<f64>) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w = Mat::from_vec(
        rows,
        fan_in,
        (0..rows * fan_in).map(|_| r.random_range(-bound..=bound)).collect(),
    );
    let b = (0..rows).map(|_| r.random_range(-bound..=bound)).collect();
    (w, b)
}

/// One tokenizer per region, Kaiming-uniform with bound `sqrt(1/fan_in)`.
pub fn init_tokenizers(
    parcellation: &Parcellation,
    hidden: usize,
    projection: &LowRankProjection,
    seed: u64,
) -> Vec<RegionTokenizer> {
    parcellation
        .regions
        .iter()
        .enumerate()
        .map(|(i, region)| {
            let mut r = rng::substream(seed, "init/tokenizer", &[i as u64]);
            let (w1, b1) = kaiming_uniform(&mut r, hidden, region.len());
            let (w2, b2) = kaiming_uniform(&mut r, projection.k(), hidden);
            RegionTokenizer {
                region_index: i,
                w1,
                b1,
                w2,
                b2,
            }
        })
        .collect()
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TokenizerCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

fn check_inputs(region_vectors: &[Vec<f64>], tokenizers: &[RegionTokenizer]) -> Result<()> {
    if region_vectors.len() != tokenizers.len() {
        return Err(Error::Shape(format!(
            "{} region vectors for {} tokenizers",
            region_vectors.len(),
            tokenizers.len()
        )));
    }
    for (i, (x, t)) in region_vectors.iter().zip(tokenizers).enumerate() {
        if x.len() != t.input_width() {
            return Err(Error::RegionWidth {
                region: i,
                expected: t.input_width(),
                actual: x.len(),
            });
        }
    }
    Ok(())
}

fn encode_one(x: &[f64], t: &RegionTokenizer, p: &LowRankProjection) -> (Vec<f64>, TokenizerCache) {
    let h = t.hidden_width();
    let pre: Vec<f64> = (0..h)
        .map(|j| crate::linalg::dot(t.w1.row(j), x) + t.b1[j])
        .collect();
    let hidden: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
    let z: Vec<f64> = (0..t.w2.rows)
        .map(|i| crate::linalg::dot(t.w2.row(i), &hidden) + t.b2[i])
        .collect();
    (
        p.lift(&z),
        TokenizerCache {
            input: x.to_vec(),
            pre,
            hidden,
        },
    )
}

/// Brain tokens for one trial: `Pᵀ·(W2·GeLU(W1·x + b1) + b2)` per region.
pub fn encode_trial(
    region_vectors: &[Vec<f64>],
    tokenizers: &[RegionTokenizer],
    projection: &LowRankProjection,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(region_vectors, tokenizers)?;
    Ok(region_vectors
        .iter()
        .zip(tokenizers)
        .map(|(x, t)| encode_one(x, t, projection).0)
        .collect())
}

pub fn encode_trial_cached(
    region_vectors: &[Vec<f64>],
    tokenizers: &[RegionTokenizer],
    projection: &LowRankProjection,
) -> Result<(Vec<Vec<f64>>, Vec<TokenizerCache>)> {
    check_inputs(region_vectors, tokenizers)?;
    Ok(region_vectors
        .iter()
        .zip(tokenizers)
        .map(|(x, t)| encode_one(x, t, projection))
        .unzip())
}

/// Accumulates parameter gradients of every tokenizer given the gradient of
/// the loss with respect to each emitted brain token.
pub fn backward(
    token_grads: &[Vec<f64>],
    caches: &[TokenizerCache],
    tokenizers: &[RegionTokenizer],
    projection: &LowRankProjection,
    grads: &mut [RegionTokenizer],
) {
    for (((g_tok, cache), t), g) in token_grads.iter().zip(caches).zip(tokenizers).zip(grads.iter_mut()) {
        let dz = projection.project(g_tok);
        let h = t.hidden_width();
        let mut dhidden = vec![0.0; h];
        for (i, &dzi) in dz.iter().enumerate() {
            g.b2[i] += dzi;
            let grow = g.w2.row_mut(i);
            for (gw, hv) in grow.iter_mut().zip(&cache.hidden) {
                *gw += dzi * hv;
            }
            for (dh, w) in dhidden.iter_mut().zip(t.w2.row(i)) {
                *dh += dzi * w;
            }
        }
        for j in 0..h {
            let du = dhidden[j] * gelu_grad(cache.pre[j]);
            g.b1[j] += du;
            for (gw, x) in g.w1.row_mut(j).iter_mut().zip(&cache.input) {
                *gw += du * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_projection(d: usize) -> LowRankProjection {
        let mut c = Mat::zeros(d, d);
        for i in 0..d {
            c.set(i, i, 1.0);
        }
        LowRankProjection {
            components: c,
            mean: vec![0.0; d],
            explained_variance_ratio: vec![1.0 / d as f64; d],
        }
    }

    #[test]
    fn line_data_gives_single_component() {
        let dir = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 2.0];
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| dir.iter().map(|d| d * (i as f64 - 7.3) + 0.25).collect())
            .collect();
        let p = fit_projection(&pts, 0.95).unwrap();
        assert_eq!(p.k(), 1);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        let n = crate::linalg::norm(p.components.row(0));
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_rejected() {
        let pts = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(fit_projection(&pts, 0.95), Err(Error::Degenerate(_))));
        assert!(fit_projection(&pts[..1], 0.95).is_err());
        assert!(fit_projection(&[vec![0.0], vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn kaiming_bounds_and_shapes() {
        let parc = Parcellation::contiguous(512, 16).unwrap();
        let proj = identity_projection(6);
        let toks = init_tokenizers(&parc, 4, &proj, 9);
        assert_eq!(toks.len(), 16);
        let bound = (1.0f64 / 32.0).sqrt();
        for (t, r) in toks.iter().zip(&parc.regions) {
            assert_eq!(t.input_width(), r.len());
            assert_eq!(t.w1.rows, 4);
            assert!(t.w1.data.iter().all(|w| w.abs() <= bound));
            assert!(t.b1.iter().all(|w| w.abs() <= bound));
            assert!(t.w2.data.iter().all(|w| w.abs() <= 0.5));
        }
        assert_eq!(toks, init_tokenizers(&parc, 4, &proj, 9));
        assert_ne!(toks, init_tokenizers(&parc, 4, &proj, 10));
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let parc = Parcellation::contiguous(8, 2).unwrap();
        let proj = identity_projection(3);
        let mut toks = init_tokenizers(&parc, 2, &proj, 1);
        for t in &mut toks {
            *t = t.zeros_like();
        }
        let out = encode_trial(&[vec![1.0; 4], vec![-3.0; 4]], &toks, &proj).unwrap();
        assert!(out.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_evaluated_token() {
        let t = RegionTokenizer {
            region_index: 0,
            w1: Mat::from_vec(1, 2, vec![1.0, 1.0]),
            b1: vec![0.0],
            w2: Mat::from_vec(1, 1, vec![1.0]),
            b2: vec![0.0],
        };
        let out = encode_trial(&[vec![1.0, 1.0]], &[t], &identity_projection(1)).unwrap();
        assert!((out[0][0] - 1.954_499_736_103_642).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_names_region() {
        let parc = Parcellation::contiguous(8, 2).unwrap();
        let proj = identity_projection(2);
        let toks = init_tokenizers(&parc, 2, &proj, 1);
        match encode_trial(&[vec![0.0; 4], vec![0.0; 3]], &toks, &proj) {
            Err(Error::RegionWidth { region, expected, actual }) => {
                assert_eq!((region, expected, actual), (1, 4, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn final_layers_are_linear() {
        let parc = Parcellation::contiguous(12, 3).unwrap();
        let proj = identity_projection(4);
        let toks = init_tokenizers(&parc, 5, &proj, 2);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..4).map(|i| ((r * 4 + i) as f64).cos()).collect())
            .collect();
        let base = encode_trial(&xs, &toks, &proj).unwrap();
        let scaled: Vec<RegionTokenizer> = toks
            .iter()
            .map(|t| {
                let mut s = t.clone();
                s.w2.scale(-2.5);
                s.b2.iter_mut().for_each(|b| *b *= -2.5);
                s
            })
            .collect();
        let out = encode_trial(&xs, &scaled, &proj).unwrap();
        for (a, b) in base.iter().flatten().zip(out.iter().flatten()) {
            assert!((a * -2.5 - b).abs() < 1e-12);
        }
    }
}
