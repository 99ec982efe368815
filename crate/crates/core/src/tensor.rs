//! Forward-path primitives: binary depthwise convolution, cover-all max
//! pooling, flattening, and the shape arithmetic that fixes feature
//! dimensions.
//!
//! Layout is channels-last throughout: a [`Tensor4`] stores `(N, H, W, C)`
//! row-major, so the `C` values of one pixel are contiguous. Convolution
//! kernels are 3x3 with pad 1 / stride 1; pooling is 4x4 with stride 2 /
//! pad 1 in cover-all mode (a final partial window is emitted).

use crate::error::{Error, Result};
use crate::solver::FeatureMatrix;
use ndarray::Array2;
use rayon::prelude::*;

/// Dense 4-D tensor, `(batch N, height H, width W, channels C)`, channels
/// last, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    data: Vec<f32>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Tensor4 {
    pub fn new(data: Vec<f32>, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, h, w, c) = shape;
        if n < 1 || h < 1 || w < 1 || c < 1 {
            return Err(Error::Shape(format!(
                "all tensor dimensions must be >= 1, got ({n},{h},{w},{c})"
            )));
        }
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!(
                "data length {} != {}*{}*{}*{}",
                data.len(),
                n,
                h,
                w,
                c
            )));
        }
        Ok(Self { data, n, h, w, c })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, h, w, c) = shape;
        Self::new(vec![0.0; n * h * w * c], shape)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Flattened view of one sample in `(H, W, C)` row-major order.
    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.h * self.w * self.c;
        &self.data[i * len..(i + 1) * len]
    }

    /// A new tensor holding samples `range` of `self`.
    pub fn slice_samples(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n {
            return Err(Error::Shape(format!(
                "sample range {start}..{end} out of 0..{}",
                self.n
            )));
        }
        let len = self.h * self.w * self.c;
        Self::new(
            self.data[start * len..end * len].to_vec(),
            (end - start, self.h, self.w, self.c),
        )
    }

    #[inline]
    fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }
}

/// Model structure: input shape, per-layer channel multipliers, output size.
///
/// Convolution and pooling hyperparameters are fixed by the model family and
/// exposed as constants.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    /// `(H, W, C)` of one input image.
    pub input_shape: (usize, usize, usize),
    /// Channel multiplier per macro-layer (1 to 3 entries).
    pub multipliers: Vec<usize>,
    pub n_classes: usize,
}

impl Architecture {
    pub const KERNEL_SIZE: usize = 3;
    pub const CONV_PAD: usize = 1;
    pub const CONV_STRIDE: usize = 1;
    pub const POOL_SIZE: usize = 4;
    pub const POOL_STRIDE: usize = 2;
    pub const POOL_PAD: usize = 1;

    pub fn new(
        input_shape: (usize, usize, usize),
        multipliers: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let (h, w, c) = input_shape;
        if h < 1 || w < 1 || c < 1 {
            return Err(Error::InvalidArchitecture(format!(
                "input shape ({h},{w},{c}) has a zero dimension"
            )));
        }
        if multipliers.is_empty() || multipliers.len() > 3 {
            return Err(Error::InvalidArchitecture(format!(
                "need 1 to 3 layers, got {}",
                multipliers.len()
            )));
        }
        if multipliers.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArchitecture(
                "channel multipliers must be positive".into(),
            ));
        }
        if n_classes < 1 {
            return Err(Error::InvalidArchitecture("n_classes must be >= 1".into()));
        }
        let arch = Self {
            input_shape,
            multipliers,
            n_classes,
        };
        // Rejects architectures whose pooling chain collapses a spatial dim.
        arch.feature_shape()?;
        Ok(arch)
    }

    pub fn n_layers(&self) -> usize {
        self.multipliers.len()
    }

    /// Input channel count of each layer (the depthwise chain multiplies
    /// channels: `C_{l+1} = M_l * C_l`).
    pub fn layer_in_channels(&self) -> Vec<usize> {
        let mut c = self.input_shape.2;
        let mut out = Vec::with_capacity(self.n_layers());
        for &m in &self.multipliers {
            out.push(c);
            c *= m;
        }
        out
    }

    /// `(H, W, C)` of the final feature map after all conv+pool stages.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_shape;
        for &m in &self.multipliers {
            c *= m;
            h = pool_out_size(h, Self::POOL_SIZE, Self::POOL_STRIDE, Self::POOL_PAD)?;
            w = pool_out_size(w, Self::POOL_SIZE, Self::POOL_STRIDE, Self::POOL_PAD)?;
        }
        Ok((h, w, c))
    }

    /// Flattened feature dimension fed to the output layer.
    pub fn n_features(&self) -> usize {
        let (h, w, c) = self
            .feature_shape()
            .expect("validated at construction");
        h * w * c
    }

    /// Ratio of feature dimension to input pixel count.
    pub fn expansion_factor(&self) -> f64 {
        let (h, w, c) = self.input_shape;
        self.n_features() as f64 / (h * w * c) as f64
    }
}

/// Weight bit accounting: `(conv_bits, elm_bits)`.
///
/// One bit per binary kernel weight (biases excluded); the output layer is
/// counted at 8 bits per weight.
pub fn param_bits(arch: &Architecture) -> (u64, u64) {
    let conv: u64 = arch
        .layer_in_channels()
        .iter()
        .zip(&arch.multipliers)
        .map(|(&c, &m)| 9 * (m * c) as u64)
        .sum();
    let elm = arch.n_features() as u64 * arch.n_classes as u64 * 8;
    (conv, elm)
}

/// One layer of binary depthwise kernels: signs in `{-1,+1}` with shape
/// `(multiplier M, in_channels C, 3, 3)` row-major, plus one bias per output
/// channel (`M*C` entries, output channel index `c*M + m`).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayer {
    pub multiplier: usize,
    pub in_channels: usize,
    signs: Vec<i8>,
    biases: Vec<f32>,
}

impl KernelLayer {
    pub fn new(
        multiplier: usize,
        in_channels: usize,
        signs: Vec<i8>,
        biases: Vec<f32>,
    ) -> Result<Self> {
        if signs.len() != multiplier * in_channels * 9 {
            return Err(Error::Shape(format!(
                "kernel layer needs {} signs, got {}",
                multiplier * in_channels * 9,
                signs.len()
            )));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Input("kernel weights must be exactly -1 or +1".into()));
        }
        if biases.len() != multiplier * in_channels {
            return Err(Error::Shape(format!(
                "kernel layer needs {} biases, got {}",
                multiplier * in_channels,
                biases.len()
            )));
        }
        Ok(Self {
            multiplier,
            in_channels,
            signs,
            biases,
        })
    }

    pub fn zero_biased(multiplier: usize, in_channels: usize, signs: Vec<i8>) -> Result<Self> {
        let biases = vec![0.0; multiplier * in_channels];
        Self::new(multiplier, in_channels, signs, biases)
    }

    pub fn out_channels(&self) -> usize {
        self.multiplier * self.in_channels
    }

    /// Sign of tap `(ky, kx)` of the kernel for `(multiplier slot m,
    /// input channel c)`.
    #[inline]
    pub fn sign(&self, m: usize, c: usize, ky: usize, kx: usize) -> i8 {
        self.signs[((m * self.in_channels + c) * 3 + ky) * 3 + kx]
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn set_biases(&mut self, biases: Vec<f32>) -> Result<()> {
        if biases.len() != self.out_channels() {
            return Err(Error::Shape(format!(
                "expected {} biases, got {}",
                self.out_channels(),
                biases.len()
            )));
        }
        self.biases = biases;
        Ok(())
    }
}

/// The binary kernels and biases for every layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    layers: Vec<KernelLayer>,
}

impl KernelSet {
    pub fn new(layers: Vec<KernelLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].in_channels != pair[0].out_channels() {
                return Err(Error::Shape(format!(
                    "layer chain broken: {} out channels feed a layer expecting {}",
                    pair[0].out_channels(),
                    pair[1].in_channels
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[KernelLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KernelLayer] {
        &mut self.layers
    }

    /// Total number of binary weights.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.signs.len()).sum()
    }

    /// Check this kernel set realizes `arch`.
    pub fn matches(&self, arch: &Architecture) -> Result<()> {
        let chans = arch.layer_in_channels();
        if self.layers.len() != arch.n_layers() {
            return Err(Error::Shape(format!(
                "kernel set has {} layers, architecture has {}",
                self.layers.len(),
                arch.n_layers()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != chans[i] || layer.multiplier != arch.multipliers[i] {
                return Err(Error::Shape(format!(
                    "layer {i}: kernels are ({}, {}), architecture wants ({}, {})",
                    layer.multiplier, layer.in_channels, arch.multipliers[i], chans[i]
                )));
            }
        }
        Ok(())
    }
}

/// Output length of one pooled axis in cover-all mode:
/// `ceil((in + 2p - k)/s) + 1`. The final window may be partial but must
/// still cover at least one real cell.
pub fn pool_out_size(in_size: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if in_size < 1 || k < 1 || s < 1 {
        return Err(Error::InvalidArchitecture(format!(
            "pool_out_size(in={in_size}, k={k}, s={s}, p={p})"
        )));
    }
    let num = in_size as i64 + 2 * p as i64 - k as i64;
    let s = s as i64;
    let out = num.div_euclid(s) + i64::from(num.rem_euclid(s) != 0) + 1;
    if out < 1 {
        return Err(Error::InvalidArchitecture(format!(
            "pooling collapses axis of size {in_size} to {out}"
        )));
    }
    // Every window must read at least one real cell: the first window ends at
    // k - p - 1 and the last starts at (out-1)*s - p.
    let k = k as i64;
    let p = p as i64;
    if k - p < 1 || (out - 1) * s - p > in_size as i64 - 1 {
        return Err(Error::InvalidArchitecture(format!(
            "pooling window falls entirely in padding (in={in_size}, k={k}, s={s}, p={p})"
        )));
    }
    Ok(out as usize)
}

/// Binary depthwise 3x3 convolution, pad 1, stride 1.
///
/// Output shape `(N, H, W, M*C)`, output channel `c*M + m`. Since weights are
/// signs, each output is a multiply-free signed accumulation of the valid
/// taps (out-of-image taps contribute 0), in fixed `(ky, kx)` order, plus the
/// channel bias.
pub fn depthwise_conv3x3(x: &Tensor4, layer: &KernelLayer) -> Result<Tensor4> {
    if x.c != layer.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernels expect {}",
            x.c, layer.in_channels
        )));
    }
    let (n, h, w, c) = x.shape();
    let m = layer.multiplier;
    let oc = m * c;

    // Sign-bit masks per (c, m): accumulation adds value with its IEEE sign
    // bit conditionally flipped, which is exact negation.
    let mut masks = vec![0u32; c * m * 9];
    for ci in 0..c {
        for mi in 0..m {
            for t in 0..9 {
                if layer.sign(mi, ci, t / 3, t % 3) < 0 {
                    masks[(ci * m + mi) * 9 + t] = 0x8000_0000;
                }
            }
        }
    }

    let mut out = vec![0.0f32; n * h * w * oc];
    let sample_len = h * w * oc;
    out.par_chunks_mut(sample_len).enumerate().for_each(|(ni, dst)| {
        let mut vals = [0.0f32; 9];
        let mut taps: [usize; 9] = [0; 9];
        for y in 0..h {
            for xx in 0..w {
                // Valid taps at this position, in (ky, kx) order.
                let mut n_taps = 0;
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        taps[n_taps] = ky * 3 + kx;
                        n_taps += 1;
                    }
                }
                let dst_px = &mut dst[(y * w + xx) * oc..(y * w + xx) * oc + oc];
                for ci in 0..c {
                    for (slot, &t) in taps[..n_taps].iter().enumerate() {
                        vals[slot] = x.at(ni, y + t / 3 - 1, xx + t % 3 - 1, ci);
                    }
                    for mi in 0..m {
                        let kmask = &masks[(ci * m + mi) * 9..(ci * m + mi) * 9 + 9];
                        let mut acc = 0.0f32;
                        for (slot, &t) in taps[..n_taps].iter().enumerate() {
                            acc += f32::from_bits(vals[slot].to_bits() ^ kmask[t]);
                        }
                        dst_px[ci * m + mi] = acc + layer.biases[ci * m + mi];
                    }
                }
            }
        }
    });
    Tensor4::new(out, (n, h, w, oc))
}

/// Max pooling with cover-all output sizing. Padding behaves as negative
/// infinity: only real cells are read, and every window must contain at
/// least one.
pub fn maxpool_coverall(x: &Tensor4, k: usize, s: usize, p: usize) -> Result<Tensor4> {
    let (n, h, w, c) = x.shape();
    let oh = pool_out_size(h, k, s, p)?;
    let ow = pool_out_size(w, k, s, p)?;

    let mut out = vec![0.0f32; n * oh * ow * c];
    let sample_len = oh * ow * c;
    out.par_chunks_mut(sample_len).enumerate().for_each(|(ni, dst)| {
        for oy in 0..oh {
            let y0 = (oy * s) as isize - p as isize;
            let ry0 = y0.max(0) as usize;
            let ry1 = ((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * s) as isize - p as isize;
                let rx0 = x0.max(0) as usize;
                let rx1 = ((x0 + k as isize).min(w as isize)) as usize;
                debug_assert!(ry0 < ry1 && rx0 < rx1, "window with no real cells");
                let dst_px = &mut dst[(oy * ow + ox) * c..(oy * ow + ox) * c + c];
                dst_px.fill(f32::NEG_INFINITY);
                for y in ry0..ry1 {
                    for xx in rx0..rx1 {
                        for ci in 0..c {
                            let v = x.at(ni, y, xx, ci);
                            if v > dst_px[ci] {
                                dst_px[ci] = v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor4::new(out, (n, oh, ow, c))
}

/// Run the full conv+pool stack and flatten each sample in `(H, W, C)`
/// row-major order into one row of the feature matrix.
pub fn feature_expand(
    x: &Tensor4,
    arch: &Architecture,
    kernels: &KernelSet,
) -> Result<FeatureMatrix> {
    let (h, w, c) = arch.input_shape;
    if (x.h, x.w, x.c) != (h, w, c) {
        return Err(Error::Shape(format!(
            "input shape ({},{},{}) does not match architecture ({h},{w},{c})",
            x.h, x.w, x.c
        )));
    }
    kernels.matches(arch)?;
    let n_features = arch.n_features();
    let n = x.batch();

    let mut out = Array2::<f32>::zeros((n, n_features));
    // Samples stream through in chunks so per-layer intermediates stay small;
    // chunks write disjoint row ranges.
    const CHUNK: usize = 256;
    let flat = out
        .as_slice_mut()
        .expect("freshly allocated array is contiguous");
    flat.par_chunks_mut(CHUNK * n_features)
        .enumerate()
        .try_for_each(|(chunk_idx, dst)| -> Result<()> {
            let start = chunk_idx * CHUNK;
            let end = (start + CHUNK).min(n);
            let mut t = x.slice_samples(start, end)?;
            for layer in kernels.layers() {
                t = depthwise_conv3x3(&t, layer)?;
                t = maxpool_coverall(
                    &t,
                    Architecture::POOL_SIZE,
                    Architecture::POOL_STRIDE,
                    Architecture::POOL_PAD,
                )?;
            }
            debug_assert_eq!(t.sample(0).len(), n_features);
            dst.copy_from_slice(t.data());
            Ok(())
        })?;
    FeatureMatrix::new(out)
}
