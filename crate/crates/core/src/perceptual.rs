//! Frozen random-feature embedder, the feature-space distance built on it,
//! and the Fréchet distance between feature distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_WIDTHS: [usize; 2] = [64, 16];
const NORM_EPS: f64 = 1e-12;

/// Fixed stack of random affine maps followed by `tanh`. Never trained.
#[derive(Clone, Debug)]
pub struct Embedder {
    input_dim: usize,
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl Embedder {
    pub fn new(input_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("embedder widths must be positive".into()));
        }
        let mut r = rng::substream(seed, "perceptual/embedder");
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            let wt = Tensor::new(fan_in, w, (0..fan_in * w).map(|_| n.sample(&mut r)).collect())?;
            let bt = Tensor::row((0..w).map(|_| n.sample(&mut r)).collect());
            layers.push((wt, bt));
            fan_in = w;
        }
        Ok(Embedder { input_dim, layers })
    }

    pub fn with_defaults(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(input_dim, &DEFAULT_WIDTHS, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.cols())
    }

    /// Activations of every layer for a `B x D` batch.
    pub fn activations<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        if g.shape(x).1 != self.input_dim {
            return Err(Error::shape("embed", format!("input {:?}, expected {} columns", g.shape(x), self.input_dim)));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = g.constant(w.cast());
            let bv = g.constant(b.cast());
            let z = g.matmul(h, wv)?;
            let z = g.add_row(z, bv)?;
            h = g.tanh(z);
            out.push(h);
        }
        Ok(out)
    }

    /// Per-row distance, `B x 1`: sum over layers of the mean squared
    /// difference between unit-normalized activations.
    pub fn distance_rows<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape("perceptual_distance", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        let fa = self.activations(g, a)?;
        let fb = self.activations(g, b)?;
        let mut total: Option<Var> = None;
        for (&xa, &xb) in fa.iter().zip(&fb) {
            let width = g.shape(xa).1 as f64;
            let na = g.l2norm_rows(xa, NORM_EPS);
            let na = g.recip(na);
            let ua = g.mul_col(xa, na)?;
            let nb = g.l2norm_rows(xb, NORM_EPS);
            let nb = g.recip(nb);
            let ub = g.mul_col(xb, nb)?;
            let diff = g.sub(ua, ub)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum_rows(sq);
            let layer = g.scale(s, 1.0 / width);
            total = Some(match total {
                None => layer,
                Some(acc) => g.add(acc, layer)?,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    /// Distance between two observations.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let mut g = Graph::<f64>::no_grad();
        let av = g.constant(Tensor::row(a.to_vec()));
        let bv = g.constant(Tensor::row(b.to_vec()));
        let d = self.distance_rows(&mut g, av, bv)?;
        Ok(g.value(d).item())
    }

    /// Distances between matching rows of two batches.
    pub fn distance_batch<T: Real>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::<T>::no_grad();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let d = self.distance_rows(&mut g, av, bv)?;
        Ok(g.value(d).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Final-layer features, one row per observation.
    pub fn features(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if obs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::from_rows(obs)?);
        let acts = self.activations(&mut g, x)?;
        let last = g.value(*acts.last().expect("at least one layer"));
        Ok((0..last.rows()).map(|r| last.row_slice(r).to_vec()).collect())
    }
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance, plus `shrinkage * I`.
    pub fn from_features(feats: &[Vec<f64>], shrinkage: f64) -> Result<Self> {
        let n = feats.len();
        let d = feats.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument("feature statistics need at least one sample".into()));
        }
        if feats.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite or ragged embeddings".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in feats {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in feats {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        for i in 0..d {
            cov[(i, i)] += shrinkage;
        }
        Ok(FeatureStats { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the product square root is taken as the trace of
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which is symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("frechet_distance", format!("{} vs {} features", a.mean.len(), b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

pub const FFD_SHRINKAGE: f64 = 1e-6;

/// Fréchet feature distance between two observation sets.
pub fn frechet_feature_distance(embedder: &Embedder, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let fa = FeatureStats::from_features(&embedder.features(a)?, FFD_SHRINKAGE)?;
    let fb = FeatureStats::from_features(&embedder.features(b)?, FFD_SHRINKAGE)?;
    frechet_distance(&fa, &fb)
}
