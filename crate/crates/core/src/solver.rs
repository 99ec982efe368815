//! Closed-form ridge fit of the linear output layer, with automatic
//! primal/dual branch selection.
//!
//! With `H` the `(n_features, n_samples)` feature matrix and `Y` the
//! `(n_classes, n_samples)` one-hot targets, the weights solve
//!
//! * primal (`n_features < n_samples`): `(I/C + H H^T) outW = H Y^T`
//! * dual (otherwise): `outW = H Z` with `(I/C + H^T H) Z = Y^T`
//!
//! Both give the same ridge solution; the branch is picked so the factored
//! matrix is the smaller Gram.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

/// Expanded features for a batch. Logically `H` is `(n_features,
/// n_samples)`; storage is the transpose (one sample per row) so rows are
/// contiguous for streaming and blocked products.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    samples: Array2<f32>,
}

impl FeatureMatrix {
    /// Build from sample-major storage, shape `(n_samples, n_features)`.
    pub fn new(samples: Array2<f32>) -> Result<Self> {
        if samples.nrows() < 1 || samples.ncols() < 1 {
            return Err(Error::Shape(format!(
                "feature matrix must be at least 1x1, got {}x{}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature matrix has non-finite values".into()));
        }
        Ok(Self { samples })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.samples.ncols()
    }

    /// Sample-major storage, `(n_samples, n_features)`.
    pub fn values(&self) -> &Array2<f32> {
        &self.samples
    }

    pub fn into_values(self) -> Array2<f32> {
        self.samples
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f32> {
        self.samples.row(i)
    }
}

/// One-hot targets, logically `(n_classes, n_samples)` with exactly one 1
/// per sample. Stored as class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTargets {
    labels: Vec<usize>,
    n_classes: usize,
}

impl OneHotTargets {
    pub fn from_labels(labels: &[usize], n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("no labels".into()));
        }
        if n_classes < 1 {
            return Err(Error::Input("n_classes must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            labels: labels.to_vec(),
            n_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Materialize `Y^T`, shape `(n_samples, n_classes)`, in f64.
    pub fn y_transposed(&self) -> Array2<f64> {
        let mut yt = Array2::<f64>::zeros((self.labels.len(), self.n_classes));
        for (i, &l) in self.labels.iter().enumerate() {
            yt[(i, l)] = 1.0;
        }
        yt
    }
}

/// Solver settings: ridge constant and the starting relative jitter for the
/// factorization fallback.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub c: f64,
    pub jitter: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            jitter: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Input(format!("C must be a positive real, got {}", self.c)));
        }
        if !(self.jitter > 0.0) || self.jitter > 1e-4 {
            return Err(Error::Input(format!(
                "jitter must be in (0, 1e-4], got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Trained output layer, `(n_features, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputWeights {
    values: Array2<f64>,
}

impl OutputWeights {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "output weights have non-finite values".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Which normal-equation branch solved the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Primal,
    Dual,
}

/// Solution plus factorization diagnostics.
#[derive(Clone, Debug)]
pub struct RidgeSolution {
    pub weights: OutputWeights,
    pub branch: Branch,
    /// Absolute diagonal jitter the factorization needed (0 when none).
    pub jitter_used: f64,
}

/// Fit the output layer; branch chosen by `n_features < n_samples`.
pub fn solve_output_weights(
    h: &FeatureMatrix,
    y: &OneHotTargets,
    cfg: &SolverConfig,
) -> Result<OutputWeights> {
    Ok(solve_detailed(h, y, cfg)?.weights)
}

/// As [`solve_output_weights`] but keeps branch and jitter diagnostics.
pub fn solve_detailed(
    h: &FeatureMatrix,
    y: &OneHotTargets,
    cfg: &SolverConfig,
) -> Result<RidgeSolution> {
    let branch = if h.n_features() < h.n_samples() {
        Branch::Primal
    } else {
        Branch::Dual
    };
    solve_branch(h, y, cfg, branch)
}

/// Solve with an explicit branch (the automatic choice is in
/// [`solve_detailed`]; forcing the other branch is for agreement checks).
pub fn solve_branch(
    h: &FeatureMatrix,
    y: &OneHotTargets,
    cfg: &SolverConfig,
    branch: Branch,
) -> Result<RidgeSolution> {
    cfg.validate()?;
    if h.n_samples() != y.n_samples() {
        return Err(Error::Shape(format!(
            "features have {} samples, targets {}",
            h.n_samples(),
            y.n_samples()
        )));
    }
    let s = h.values(); // (n_samples, n_features) = H^T
    let yt = y.y_transposed(); // (n_samples, n_classes)

    let (weights, jitter_used) = match branch {
        Branch::Primal => {
            // (I/C + H H^T) outW = H Y^T, system size n_features.
            let mut m = linalg::gram_cols(s.view());
            add_to_diag(&mut m, 1.0 / cfg.c);
            let rhs = linalg::matmul_t_f32_f64(s.view(), yt.view());
            let (x, j) = solve_spd_jittered(&mut m, rhs.view(), cfg.jitter)?;
            (x, j)
        }
        Branch::Dual => {
            // (I/C + H^T H) Z = Y^T, system size n_samples; outW = H Z.
            let mut m = linalg::gram_rows(s.view());
            add_to_diag(&mut m, 1.0 / cfg.c);
            let (z, j) = solve_spd_jittered(&mut m, yt.view(), cfg.jitter)?;
            (linalg::matmul_t_f32_f64(s.view(), z.view()), j)
        }
    };
    Ok(RidgeSolution {
        weights: OutputWeights::new(weights)?,
        branch,
        jitter_used,
    })
}

fn add_to_diag(m: &mut Array2<f64>, v: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

/// Factor and solve an SPD system in place, escalating diagonal jitter on
/// failure: relative jitter starts at `start_rel` and multiplies by 10 up to
/// 1e-4, scaled by `trace/n`. The matrix is destroyed.
fn solve_spd_jittered(
    m: &mut Array2<f64>,
    rhs: ArrayView2<f64>,
    start_rel: f64,
) -> Result<(Array2<f64>, f64)> {
    let n = m.nrows();
    let saved_diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let scale = saved_diag.iter().sum::<f64>() / n as f64;

    if linalg::cholesky_in_place(m).is_ok() {
        return Ok((linalg::solve_factored(m.view(), rhs), 0.0));
    }
    let mut rel = start_rel;
    while rel <= 1e-4 * (1.0 + 1e-12) {
        let jitter = rel * scale;
        linalg::restore_lower_from_upper(m, &saved_diag, jitter);
        if linalg::cholesky_in_place(m).is_ok() {
            return Ok((linalg::solve_factored(m.view(), rhs), jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Numerical(format!(
        "factorization failed after jitter escalation to {:e}",
        1e-4 * scale
    )))
}

/// Optimality diagnostic for the ridge normal equations:
/// `max|H H^T outW + outW/C - H Y^T| / max(1, max|H Y^T|)`.
pub fn residual_norm(
    h: &FeatureMatrix,
    y: &OneHotTargets,
    out_w: &OutputWeights,
    c: f64,
) -> f64 {
    let s = h.values();
    let yt = y.y_transposed();
    // H H^T outW associated as H (H^T outW) so the Gram never materializes.
    let ht_w = linalg::matmul_f32_f64(s.view(), out_w.values().view());
    let lhs = linalg::matmul_t_f32_f64(s.view(), ht_w.view());
    let rhs = linalg::matmul_t_f32_f64(s.view(), yt.view());
    let mut num = 0.0f64;
    let mut den = 1.0f64;
    ndarray::Zip::from(&lhs)
        .and(out_w.values())
        .and(&rhs)
        .for_each(|&l, &w, &r| {
            num = num.max((l + w / c - r).abs());
            den = den.max(r.abs());
        });
    num / den
}

/// Per-sample argmax of `outW^T h`; ties go to the lowest class index.
pub fn predict(out_w: &OutputWeights, h: &FeatureMatrix) -> Result<Vec<usize>> {
    if h.n_features() != out_w.n_features() {
        return Err(Error::Shape(format!(
            "features have width {}, weights expect {}",
            h.n_features(),
            out_w.n_features()
        )));
    }
    let scores = scores(out_w, h);
    Ok(scores
        .axis_iter(Axis(0))
        .map(|row| argmax_lowest(row.as_slice().expect("row-major")))
        .collect())
}

/// Raw class scores, `(n_samples, n_classes)`.
pub fn scores(out_w: &OutputWeights, h: &FeatureMatrix) -> Array2<f64> {
    linalg::matmul_f32_f64(h.values().view(), out_w.values().view())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of matching entries.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "accuracy needs equal nonempty vectors, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted
        .par_iter()
        .zip(truth.par_iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}
