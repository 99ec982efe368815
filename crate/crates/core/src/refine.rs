//! Gradient refinement of the output layer: softmax cross-entropy minimized
//! by adaptive moment estimation, with binary kernels frozen. Features for
//! the full training set are expanded once and kept in memory or spilled to
//! a temporary file when they exceed a byte budget.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::solver::OutputWeights;
use crate::tensor::{feature_expand, Architecture, KernelSet, Tensor4};
use crate::data::Dataset;
use ndarray::{Array2, ArrayView2, Zip};
use std::io::{Read, Seek, SeekFrom, Write};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Default feature-store budget before spilling to disk.
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            shuffle_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.batch_size < 1 || self.batch_size > n_train {
            return Err(Error::Input(format!(
                "batch size must be in 1..={n_train}, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Input(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

enum Storage {
    Memory(Array2<f32>),
    Disk {
        file: std::fs::File,
        row_len: usize,
    },
}

/// Expanded training features with batch gather, backed by memory or a
/// temporary file depending on the byte budget.
pub struct FeatureStore {
    storage: Storage,
    n_samples: usize,
    n_features: usize,
}

impl FeatureStore {
    /// Expand `ds` through the frozen kernels chunk by chunk.
    pub fn build(
        ds: &Dataset,
        arch: &Architecture,
        kernels: &KernelSet,
        budget_bytes: u64,
    ) -> Result<Self> {
        let n = ds.len();
        let n_features = arch.n_features();
        let bytes = n as u64 * n_features as u64 * 4;
        let mut storage = if bytes <= budget_bytes {
            Storage::Memory(Array2::zeros((n, n_features)))
        } else {
            Storage::Disk {
                file: tempfile::tempfile()?,
                row_len: n_features,
            }
        };

        const CHUNK: usize = 512;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let slab = ds.images.slice_samples(start, end)?;
            let feats = feature_expand(&slab, arch, kernels)?;
            match &mut storage {
                Storage::Memory(m) => {
                    m.slice_mut(ndarray::s![start..end, ..])
                        .assign(feats.values());
                }
                Storage::Disk { file, .. } => {
                    let vals = feats.into_values();
                    let slice = vals.as_slice().expect("contiguous");
                    let mut raw = Vec::with_capacity(slice.len() * 4);
                    for v in slice {
                        raw.extend_from_slice(&v.to_le_bytes());
                    }
                    file.write_all(&raw)?;
                }
            }
            start = end;
        }
        if let Storage::Disk { file, .. } = &mut storage {
            file.flush()?;
        }
        Ok(Self {
            storage,
            n_samples: n,
            n_features,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn in_memory(&self) -> bool {
        matches!(self.storage, Storage::Memory(_))
    }

    /// Copy the given rows, in order, into a `(indices.len(), n_features)`
    /// matrix.
    pub fn gather(&mut self, indices: &[usize]) -> Result<Array2<f32>> {
        let mut out = Array2::<f32>::zeros((indices.len(), self.n_features));
        match &mut self.storage {
            Storage::Memory(m) => {
                for (dst, &i) in out.rows_mut().into_iter().zip(indices) {
                    m.row(i).assign_to(dst);
                }
            }
            Storage::Disk { file, row_len } => {
                let row_bytes = *row_len * 4;
                let mut raw = vec![0u8; row_bytes];
                for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
                    file.seek(SeekFrom::Start(i as u64 * row_bytes as u64))?;
                    file.read_exact(&mut raw)?;
                    for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                        *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Mean softmax cross-entropy over a batch and its gradient w.r.t. the
/// output weights: `grad = H (P - Y)^T / batch`.
pub fn softmax_xent_loss_grad(
    out_w: &OutputWeights,
    h_batch: ArrayView2<f32>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let b = h_batch.nrows();
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!(
            "batch has {b} rows but {} labels",
            labels.len()
        )));
    }
    if h_batch.ncols() != out_w.n_features() {
        return Err(Error::Shape(format!(
            "batch width {} does not match weights ({})",
            h_batch.ncols(),
            out_w.n_features()
        )));
    }
    let n_classes = out_w.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Input(format!("label {bad} out of range")));
    }

    let mut scores = linalg::matmul_f32_f64(h_batch, out_w.values().view());
    let mut loss = 0.0f64;
    for (mut row, &label) in scores.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        loss += -(row[label] / denom).ln();
        // Turn the row into P - Y.
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v / denom - f64::from(c == label);
        }
    }
    let grad = linalg::matmul_t_f32_f64(h_batch, scores.view()).mapv(|v| v / b as f64);
    Ok((loss / b as f64, grad))
}

/// Per-epoch trace of the refinement run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RefineTrace {
    pub epoch_mean_loss: Vec<f64>,
    pub steps: u64,
}

/// Refine the output layer on a normalized training set. Kernels are read
/// only; the returned weights minimize softmax cross-entropy from the given
/// starting point. Deterministic for a fixed shuffle seed.
pub fn refine_output(
    arch: &Architecture,
    kernels: &KernelSet,
    ds: &Dataset,
    initial: &OutputWeights,
    cfg: &RefineConfig,
    budget_bytes: u64,
) -> Result<(OutputWeights, RefineTrace)> {
    cfg.validate(ds.len())?;
    if initial.n_features() != arch.n_features() || initial.n_classes() != ds.n_classes {
        return Err(Error::Shape(format!(
            "weights are {}x{}, expected {}x{}",
            initial.n_features(),
            initial.n_classes(),
            arch.n_features(),
            ds.n_classes
        )));
    }
    let mut store = FeatureStore::build(ds, arch, kernels, budget_bytes)?;
    let mut w = initial.values().clone();
    let mut m = Array2::<f64>::zeros(w.raw_dim());
    let mut v = Array2::<f64>::zeros(w.raw_dim());
    let mut step = 0u64;
    let mut trace = RefineTrace {
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    let n = ds.len();

    for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut shuffler = rng::SplitMix64::new(rng::derive(cfg.shuffle_seed, epoch as u64));
        shuffler.shuffle(&mut perm);
        let mut loss_sum = 0.0f64;
        for (batch_idx, batch) in perm.chunks(cfg.batch_size).enumerate() {
            let rows = store.gather(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let cur = OutputWeights::new(w.clone())?;
            let (loss, grad) = softmax_xent_loss_grad(&cur, rows.view(), &labels)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::RefineDiverged {
                    epoch,
                    batch: batch_idx,
                    last_weights: Box::new(w),
                });
            }
            step += 1;
            let bc1 = 1.0 - BETA1.powi(step as i32);
            let bc2 = 1.0 - BETA2.powi(step as i32);
            Zip::from(&mut m).and(&grad).for_each(|m, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            });
            Zip::from(&mut v).and(&grad).for_each(|v, &g| {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            });
            Zip::from(&mut w).and(&m).and(&v).for_each(|w, &m, &v| {
                *w -= cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + EPSILON);
            });
            loss_sum += loss * batch.len() as f64;
        }
        trace.epoch_mean_loss.push(loss_sum / n as f64);
    }
    trace.steps = step;
    Ok((OutputWeights::new(w)?, trace))
}

/// Convenience wrapper: expand a full dataset into a feature matrix through
/// the store (memory path), mainly for evaluation after refinement.
pub fn expand_dataset(
    ds: &Dataset,
    arch: &Architecture,
    kernels: &KernelSet,
) -> Result<crate::solver::FeatureMatrix> {
    feature_expand(&ds.images, arch, kernels)
}

/// Expand a single image tensor.
pub fn expand_image(
    image: &Tensor4,
    arch: &Architecture,
    kernels: &KernelSet,
) -> Result<crate::solver::FeatureMatrix> {
    feature_expand(image, arch, kernels)
}
