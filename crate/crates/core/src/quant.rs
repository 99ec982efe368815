//! Post-training quantization of the output layer: symmetric per-tensor
//! fixed point at 2 to 8 bits, plus integer-weight prediction.

use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::{FeatureMatrix, OutputWeights};
use ndarray::{Array2, Axis};

/// Integer output layer: `q * scale` approximates the float weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    q: Array2<i8>,
    scale: f64,
    bits: u8,
}

impl QuantizedWeights {
    pub fn new(q: Array2<i8>, scale: f64, bits: u8) -> Result<Self> {
        validate_bits(bits)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Input(format!("scale must be positive, got {scale}")));
        }
        let limit = limit_for(bits);
        if q.iter().any(|&v| i32::from(v) < -limit || i32::from(v) > limit) {
            return Err(Error::Input(format!(
                "quantized entries exceed {bits}-bit symmetric range [{}, {limit}]",
                -limit
            )));
        }
        Ok(Self { q, scale, bits })
    }

    pub fn values(&self) -> &Array2<i8> {
        &self.q
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn n_features(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.q.ncols()
    }

    /// Exact size of the packed weight payload in bits.
    pub fn weight_bits(&self) -> u64 {
        self.q.len() as u64 * u64::from(self.bits)
    }

    /// Back to float weights, `q * scale`.
    pub fn dequantize(&self) -> OutputWeights {
        OutputWeights::new(self.q.mapv(|v| f64::from(v) * self.scale))
            .expect("integer grid values are finite")
    }
}

fn validate_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Input(format!("bits must be in 2..=8, got {bits}")));
    }
    Ok(())
}

fn limit_for(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Symmetric per-tensor quantization: `scale = max|w| / (2^(bits-1) - 1)`,
/// entries rounded to nearest even and saturated. An all-zero layer gets
/// scale 1.
pub fn quantize(out_w: &OutputWeights, bits: u8) -> Result<QuantizedWeights> {
    validate_bits(bits)?;
    let limit = limit_for(bits);
    let max_abs = out_w.values().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        let q = Array2::<i8>::zeros((out_w.n_features(), out_w.n_classes()));
        return QuantizedWeights::new(q, 1.0, bits);
    }
    let scale = max_abs / f64::from(limit);
    let q = out_w.values().mapv(|w| {
        let r = (w / scale).round_ties_even();
        r.clamp(f64::from(-limit), f64::from(limit)) as i8
    });
    QuantizedWeights::new(q, scale, bits)
}

/// Argmax prediction with integer weights; the common scale cannot change
/// an argmax, so scores are left unscaled. Ties go to the lowest class.
pub fn quantized_predict(qw: &QuantizedWeights, h: &FeatureMatrix) -> Result<Vec<usize>> {
    if h.n_features() != qw.n_features() {
        return Err(Error::Shape(format!(
            "features have width {}, quantized weights expect {}",
            h.n_features(),
            qw.n_features()
        )));
    }
    let wf = qw.q.mapv(f64::from);
    let scores = linalg::matmul_f32_f64(h.values().view(), wf.view());
    Ok(scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::predict;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn endpoints_map_to_extremes() {
        let w = OutputWeights::new(arr2(&[[-1.27, 1.27]])).unwrap();
        let qw = quantize(&w, 8).unwrap();
        assert!((qw.scale() - 0.01).abs() < 1e-15);
        assert_eq!(qw.values(), &arr2(&[[-127i8, 127]]));
    }

    #[test]
    fn all_zero_fallback() {
        let w = OutputWeights::new(Array2::zeros((3, 2))).unwrap();
        let qw = quantize(&w, 4).unwrap();
        assert_eq!(qw.scale(), 1.0);
        assert!(qw.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn bit_budget_matches_parameter_accounting() {
        let arch = crate::tensor::Architecture::new((28, 28, 1), vec![16, 20], 10).unwrap();
        let w = OutputWeights::new(Array2::from_elem((arch.n_features(), 10), 0.5)).unwrap();
        let qw = quantize(&w, 8).unwrap();
        let (_, elm_bits) = crate::tensor::param_bits(&arch);
        assert_eq!(qw.weight_bits(), elm_bits);
    }

    #[test]
    fn rejects_bad_bits() {
        let w = OutputWeights::new(arr2(&[[1.0]])).unwrap();
        assert!(quantize(&w, 1).is_err());
        assert!(quantize(&w, 9).is_err());
    }

    #[test]
    fn lossless_grid_weights_predict_identically() {
        let mut rng = crate::rng::SplitMix64::new(3);
        let mut w = Array2::from_shape_fn((6, 4), |_| (rng.next_below(255) as f64 - 127.0) * 0.25);
        // Pin the max so the scale is exactly the 0.25 grid step.
        w[(0, 0)] = 127.0 * 0.25;
        let w = OutputWeights::new(w).unwrap();
        let qw = quantize(&w, 8).unwrap();
        // Weights sit exactly on the grid, so dequantization is exact.
        let deq = qw.dequantize();
        for (a, b) in w.values().iter().zip(deq.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let h = FeatureMatrix::new(Array2::from_shape_fn((10, 6), |_| {
            rng.next_below(100) as f32 / 10.0 - 5.0
        }))
        .unwrap();
        assert_eq!(
            quantized_predict(&qw, &h).unwrap(),
            predict(&w, &h).unwrap()
        );
    }

    #[test]
    fn sign_toy() {
        let qw = QuantizedWeights::new(arr2(&[[3i8, -3]]), 0.5, 8).unwrap();
        let h = FeatureMatrix::new(arr2(&[[2.0f32], [-2.0]])).unwrap();
        assert_eq!(quantized_predict(&qw, &h).unwrap(), vec![0, 1]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let qw = QuantizedWeights::new(arr2(&[[1i8], [2]]), 1.0, 8).unwrap();
        let h = FeatureMatrix::new(arr2(&[[1.0f32, 2.0, 3.0]])).unwrap();
        assert!(quantized_predict(&qw, &h).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_scale(
            vals in proptest::collection::vec(-1000.0f64..1000.0, 1..60),
            bits in 2u8..=8,
        ) {
            let n = vals.len();
            let w = OutputWeights::new(Array2::from_shape_vec((n, 1), vals).unwrap()).unwrap();
            let qw = quantize(&w, bits).unwrap();
            let deq = qw.dequantize();
            for (a, b) in w.values().iter().zip(deq.values()) {
                prop_assert!((a - b).abs() <= qw.scale() / 2.0 + 1e-12);
            }
        }

        #[test]
        fn scale_never_changes_argmax(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            feats in proptest::collection::vec(-5.0f32..5.0, 9),
        ) {
            let w = Array2::from_shape_vec((3, 4), vals).unwrap();
            let qw = quantize(&OutputWeights::new(w).unwrap(), 6).unwrap();
            let h = FeatureMatrix::new(Array2::from_shape_vec((3, 3), feats).unwrap()).unwrap();
            let unscaled = quantized_predict(&qw, &h).unwrap();
            let scaled = predict(&qw.dequantize(), &h).unwrap();
            prop_assert_eq!(unscaled, scaled);
        }
    }
}
