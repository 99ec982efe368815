//! Bit-exact model container.
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! "LBCN"            4 bytes magic
//! format_version    u32 (currently 1)
//! header_len        u32
//! header            UTF-8 JSON, header_len bytes
//! payload           sections below, sizes derivable from the header
//! checksum          u32, CRC-32 of header bytes ++ payload bytes
//! ```
//!
//! Payload sections in order: packed kernel signs (1 bit per weight, bit
//! 1 means +1, row-major `(M, C, ky, kx)` per layer, each layer padded to a
//! byte); biases as f64 per output channel in layer order (present only when
//! `has_biases`); output weights either as row-major f64 or, when quantized,
//! as b-bit two's-complement integers packed LSB-first plus one f64 scale.

use crate::error::{Error, Result};
use crate::quant::QuantizedWeights;
use crate::solver::{FeatureMatrix, OutputWeights};
use crate::tensor::{param_bits, Architecture, KernelLayer, KernelSet, Tensor4};
use ndarray::Array2;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LBCN";
pub const FORMAT_VERSION: u32 = 1;

/// How inputs must be scaled before expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Divide255,
}

/// Where the model came from; everything optional.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub master_seed: Option<u64>,
    pub trial_seed: Option<u64>,
    pub accuracy: Option<f64>,
}

/// Output layer in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelWeights {
    Float(OutputWeights),
    Quantized(QuantizedWeights),
}

impl ModelWeights {
    pub fn n_features(&self) -> usize {
        match self {
            ModelWeights::Float(w) => w.n_features(),
            ModelWeights::Quantized(q) => q.n_features(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelWeights::Float(w) => w.n_classes(),
            ModelWeights::Quantized(q) => q.n_classes(),
        }
    }
}

/// A complete trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub kernels: KernelSet,
    pub weights: ModelWeights,
    pub class_names: Option<Vec<String>>,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

impl Model {
    pub fn new(
        arch: Architecture,
        kernels: KernelSet,
        weights: ModelWeights,
        class_names: Option<Vec<String>>,
        normalization: Normalization,
        provenance: Provenance,
    ) -> Result<Self> {
        kernels.matches(&arch)?;
        if weights.n_features() != arch.n_features() || weights.n_classes() != arch.n_classes {
            return Err(Error::Shape(format!(
                "weights are {}x{}, architecture wants {}x{}",
                weights.n_features(),
                weights.n_classes(),
                arch.n_features(),
                arch.n_classes
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != arch.n_classes {
                return Err(Error::Input(format!(
                    "{} class names for {} classes",
                    names.len(),
                    arch.n_classes
                )));
            }
        }
        Ok(Self {
            arch,
            kernels,
            weights,
            class_names,
            normalization,
            provenance,
        })
    }

    /// Expand raw images (applying the model's normalization tag) and
    /// predict class indices.
    pub fn predict_images(&self, images: &Tensor4) -> Result<Vec<usize>> {
        let normalized;
        let input = match self.normalization {
            Normalization::Divide255 => {
                let data: Vec<f32> = images.data().iter().map(|&v| v / 255.0).collect();
                normalized = Tensor4::new(data, images.shape())?;
                &normalized
            }
            Normalization::None => images,
        };
        let feats = crate::tensor::feature_expand(input, &self.arch, &self.kernels)?;
        self.predict_features(&feats)
    }

    /// Predict from already-expanded features.
    pub fn predict_features(&self, feats: &FeatureMatrix) -> Result<Vec<usize>> {
        match &self.weights {
            ModelWeights::Float(w) => crate::solver::predict(w, feats),
            ModelWeights::Quantized(q) => crate::quant::quantized_predict(q, feats),
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct QuantDescriptor {
    bits: u8,
    scale: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    architecture: Architecture,
    class_names: Option<Vec<String>>,
    normalization: Normalization,
    quantization: Option<QuantDescriptor>,
    has_biases: bool,
    provenance: Provenance,
}

/// Pack ±1 signs, one bit each, LSB-first; bit 1 means +1.
pub fn pack_signs(signs: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; signs.len().div_ceil(8)];
    for (i, &s) in signs.iter().enumerate() {
        if s > 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_signs`] for a known sign count.
pub fn unpack_signs(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() < count.div_ceil(8) {
        return Err(Error::Truncated("kernel sign section".into()));
    }
    Ok((0..count)
        .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
        .collect())
}

/// Pack b-bit two's-complement integers LSB-first into a bitstream.
pub fn pack_ints(values: &[i8], bits: u8) -> Vec<u8> {
    let bits = usize::from(bits);
    let mut out = vec![0u8; (values.len() * bits).div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        let u = (v as u8) & ((1u16 << bits) - 1) as u8;
        for b in 0..bits {
            if u >> b & 1 == 1 {
                let pos = i * bits + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

/// Inverse of [`pack_ints`], sign-extending each field.
pub fn unpack_ints(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<i8>> {
    let bits_us = usize::from(bits);
    if bytes.len() < (count * bits_us).div_ceil(8) {
        return Err(Error::Truncated("quantized weight section".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut u = 0u8;
        for b in 0..bits_us {
            let pos = i * bits_us + b;
            if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                u |= 1 << b;
            }
        }
        // Sign-extend from bit (bits-1).
        let shift = 8 - bits;
        out.push(((u << shift) as i8) >> shift);
    }
    Ok(out)
}

fn payload_bytes(model: &Model) -> Vec<u8> {
    let mut payload = Vec::new();
    for layer in model.kernels.layers() {
        payload.extend_from_slice(&pack_signs(layer.signs()));
    }
    let has_biases = model
        .kernels
        .layers()
        .iter()
        .any(|l| l.biases().iter().any(|&b| b != 0.0));
    if has_biases {
        for layer in model.kernels.layers() {
            for &b in layer.biases() {
                payload.extend_from_slice(&f64::from(b).to_le_bytes());
            }
        }
    }
    match &model.weights {
        ModelWeights::Float(w) => {
            for &v in w.values().iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        ModelWeights::Quantized(q) => {
            let flat: Vec<i8> = q.values().iter().copied().collect();
            payload.extend_from_slice(&pack_ints(&flat, q.bits()));
            payload.extend_from_slice(&q.scale().to_le_bytes());
        }
    }
    payload
}

/// Serialize a model to its on-disk byte form.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let has_biases = model
        .kernels
        .layers()
        .iter()
        .any(|l| l.biases().iter().any(|&b| b != 0.0));
    let header = Header {
        architecture: model.arch.clone(),
        class_names: model.class_names.clone(),
        normalization: model.normalization,
        quantization: match &model.weights {
            ModelWeights::Float(_) => None,
            ModelWeights::Quantized(q) => Some(QuantDescriptor {
                bits: q.bits(),
                scale: q.scale(),
            }),
        },
        has_biases,
        provenance: model.provenance.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload = payload_bytes(model);

    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header_bytes);
    hasher.update(&payload);
    let crc = hasher.finalize();

    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

struct RawFile<'a> {
    header: Header,
    payload: &'a [u8],
}

fn split_file(bytes: &[u8]) -> Result<RawFile<'_>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("file shorter than fixed fields".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < header_len + 4 {
        return Err(Error::Truncated("header section".into()));
    }
    let header_bytes = &body[..header_len];
    let payload = &body[header_len..body.len() - 4];
    let stored_crc = u32::from_le_bytes(
        body[body.len() - 4..].try_into().expect("4 bytes"),
    );
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header_bytes);
    hasher.update(payload);
    if hasher.finalize() != stored_crc {
        return Err(Error::ChecksumMismatch);
    }
    let header: Header = serde_json::from_slice(header_bytes)?;
    Ok(RawFile { header, payload })
}

/// Deserialize a model from its on-disk byte form.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let RawFile { header, payload } = split_file(bytes)?;
    let arch = Architecture::new(
        header.architecture.input_shape,
        header.architecture.multipliers.clone(),
        header.architecture.n_classes,
    )?;
    let chans = arch.layer_in_channels();

    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Truncated(format!("{what} section")))?;
        let s = &payload[pos..end];
        pos = end;
        Ok(s)
    };

    let mut layers = Vec::with_capacity(arch.n_layers());
    for (l, (&m, &c)) in arch.multipliers.iter().zip(&chans).enumerate() {
        let n_signs = m * c * 9;
        let raw = take(n_signs.div_ceil(8), &format!("layer {l} kernels"))?;
        let signs = unpack_signs(raw, n_signs)?;
        layers.push((m, c, signs));
    }
    let mut kernel_layers = Vec::with_capacity(layers.len());
    for (l, (m, c, signs)) in layers.into_iter().enumerate() {
        let biases: Vec<f32> = if header.has_biases {
            let raw = take(m * c * 8, &format!("layer {l} biases"))?;
            raw.chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")) as f32)
                .collect()
        } else {
            vec![0.0; m * c]
        };
        kernel_layers.push(KernelLayer::new(m, c, signs, biases)?);
    }
    let kernels = KernelSet::new(kernel_layers)?;

    let n_f = arch.n_features();
    let n_cls = arch.n_classes;
    let weights = match &header.quantization {
        None => {
            let raw = take(n_f * n_cls * 8, "float weights")?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            ModelWeights::Float(OutputWeights::new(
                Array2::from_shape_vec((n_f, n_cls), vals).expect("sized above"),
            )?)
        }
        Some(qd) => {
            let raw = take((n_f * n_cls * usize::from(qd.bits)).div_ceil(8), "quantized weights")?;
            let ints = unpack_ints(raw, n_f * n_cls, qd.bits)?;
            let scale_raw = take(8, "quantization scale")?;
            let scale = f64::from_le_bytes(scale_raw.try_into().expect("8 bytes"));
            if scale.to_bits() != qd.scale.to_bits() {
                return Err(Error::Format(
                    "payload scale disagrees with header".into(),
                ));
            }
            ModelWeights::Quantized(QuantizedWeights::new(
                Array2::from_shape_vec((n_f, n_cls), ints).expect("sized above"),
                scale,
                qd.bits,
            )?)
        }
    };
    if pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - pos
        )));
    }

    Model::new(
        arch,
        kernels,
        weights,
        header.class_names,
        header.normalization,
        header.provenance,
    )
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}

/// Header-level report: everything inspectable without decoding payloads.
#[derive(Clone, Debug, serde::Serialize)]
pub struct InspectReport {
    pub architecture: Architecture,
    pub n_features: usize,
    pub expansion_factor: f64,
    pub conv_bits: u64,
    pub elm_bits: u64,
    pub quantization_bits: Option<u8>,
    pub quantization_scale: Option<f64>,
    pub has_biases: bool,
    pub class_names: Option<Vec<String>>,
    pub normalization: Normalization,
    pub provenance: Provenance,
    pub file_bytes: u64,
}

/// Read magic, version, and header; verify the checksum; never decode the
/// payload sections.
pub fn inspect(path: &Path) -> Result<InspectReport> {
    let bytes = fs::read(path)?;
    let RawFile { header, .. } = split_file(&bytes)?;
    let arch = Architecture::new(
        header.architecture.input_shape,
        header.architecture.multipliers.clone(),
        header.architecture.n_classes,
    )?;
    let (conv_bits, elm_bits) = param_bits(&arch);
    Ok(InspectReport {
        n_features: arch.n_features(),
        expansion_factor: arch.expansion_factor(),
        conv_bits,
        elm_bits,
        quantization_bits: header.quantization.as_ref().map(|q| q.bits),
        quantization_scale: header.quantization.as_ref().map(|q| q.scale),
        has_biases: header.has_biases,
        class_names: header.class_names,
        normalization: header.normalization,
        provenance: header.provenance,
        architecture: arch,
        file_bytes: bytes.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;
    use crate::rng::SplitMix64;
    use crate::search::generate_kernels;

    fn random_model(seed: u64, quantized: bool, with_biases: bool) -> Model {
        let mut rng = SplitMix64::new(seed);
        let h = 6 + rng.next_below(6) as usize;
        let w = 6 + rng.next_below(6) as usize;
        let n_layers = 1 + rng.next_below(2) as usize;
        let mults: Vec<usize> = (0..n_layers)
            .map(|_| 1 + rng.next_below(3) as usize)
            .collect();
        let n_classes = 2 + rng.next_below(4) as usize;
        let arch = Architecture::new((h, w, 1), mults, n_classes).unwrap();
        let mut kernels = generate_kernels(&arch, rng.next_u64());
        if with_biases {
            for layer in kernels.layers_mut() {
                let n = layer.out_channels();
                let biases: Vec<f32> =
                    (0..n).map(|_| rng.next_below(100) as f32 / 16.0 - 3.0).collect();
                layer.set_biases(biases).unwrap();
            }
        }
        let w = Array2::from_shape_fn((arch.n_features(), n_classes), |_| {
            rng.next_below(20001) as f64 / 1000.0 - 10.0
        });
        let float = OutputWeights::new(w).unwrap();
        let weights = if quantized {
            let bits = 2 + (rng.next_below(7) as u8);
            ModelWeights::Quantized(quantize(&float, bits).unwrap())
        } else {
            ModelWeights::Float(float)
        };
        let class_names = if rng.next_below(2) == 1 {
            Some((0..n_classes).map(|i| format!("class{i}")).collect())
        } else {
            None
        };
        Model::new(
            arch,
            kernels,
            weights,
            class_names,
            if seed % 2 == 0 {
                Normalization::Divide255
            } else {
                Normalization::None
            },
            Provenance {
                master_seed: Some(rng.next_u64()),
                trial_seed: Some(rng.next_u64()),
                accuracy: Some(rng.next_below(10001) as f64 / 10000.0),
            },
        )
        .unwrap()
    }

    #[test]
    fn sign_packing_round_trips() {
        let mut rng = SplitMix64::new(1);
        for len in [1usize, 7, 8, 9, 144, 2880] {
            let signs: Vec<i8> = (0..len).map(|_| rng.next_sign()).collect();
            let packed = pack_signs(&signs);
            assert_eq!(packed.len(), len.div_ceil(8));
            assert_eq!(unpack_signs(&packed, len).unwrap(), signs);
        }
    }

    #[test]
    fn int_packing_round_trips_all_widths() {
        let mut rng = SplitMix64::new(2);
        for bits in 2u8..=8 {
            let limit = (1i32 << (bits - 1)) - 1;
            let vals: Vec<i8> = (0..131)
                .map(|_| (rng.next_below((2 * limit + 1) as u64) as i32 - limit) as i8)
                .collect();
            let packed = pack_ints(&vals, bits);
            assert_eq!(packed.len(), (131 * usize::from(bits)).div_ceil(8));
            assert_eq!(unpack_ints(&packed, 131, bits).unwrap(), vals);
        }
    }

    #[test]
    fn kernel_section_sizes_for_16_20() {
        // Layer sizes for the (16,20) MNIST model: 9*16 = 144 signs, then
        // 9*20*16 = 2880 signs.
        assert_eq!(pack_signs(&vec![1i8; 144]).len(), 18);
        assert_eq!(pack_signs(&vec![1i8; 2880]).len(), 360);
    }

    #[test]
    fn round_trip_corpus() {
        for seed in 0..50u64 {
            let model = random_model(seed, seed % 3 == 0, seed % 5 == 0);
            let bytes = model_to_bytes(&model).unwrap();
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(model, back, "seed {seed}");
        }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let model = random_model(7, false, true);
        let (h, w, c) = model.arch.input_shape;
        let mut rng = SplitMix64::new(3);
        let data: Vec<f32> = (0..20 * h * w * c).map(|_| rng.next_below(256) as f32).collect();
        let images = Tensor4::new(data, (20, h, w, c)).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(
            model.predict_images(&images).unwrap(),
            back.predict_images(&images).unwrap()
        );
    }

    #[test]
    fn corrupted_checksum_is_detected() {
        let model = random_model(11, true, false);
        let mut bytes = model_to_bytes(&model).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::ChecksumMismatch)
        ));
        // Flip a payload byte instead: also a checksum failure.
        let mut bytes2 = model_to_bytes(&model).unwrap();
        let mid = bytes2.len() - 20;
        bytes2[mid] ^= 0x80;
        assert!(matches!(
            model_from_bytes(&bytes2),
            Err(Error::ChecksumMismatch)
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_distinct() {
        let model = random_model(13, false, false);
        let mut bytes = model_to_bytes(&model).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::BadMagic)));

        let mut bytes = model_to_bytes(&model).unwrap();
        bytes[4] = 9;
        // CRC excludes the version field, so this fails on version first.
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let model = random_model(17, false, false);
        let bytes = model_to_bytes(&model).unwrap();
        assert!(matches!(
            model_from_bytes(&bytes[..3]),
            Err(Error::BadMagic)
        ));
        assert!(model_from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn inspect_reports_header_facts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lbcn");

        let arch = Architecture::new((28, 28, 1), vec![40, 4], 10).unwrap();
        let kernels = generate_kernels(&arch, 21);
        let w = OutputWeights::new(Array2::from_elem((arch.n_features(), 10), 0.25)).unwrap();
        let model = Model::new(
            arch,
            kernels,
            ModelWeights::Quantized(quantize(&w, 8).unwrap()),
            None,
            Normalization::Divide255,
            Provenance::default(),
        )
        .unwrap();
        save_model(&model, &path).unwrap();

        let report = inspect(&path).unwrap();
        assert_eq!(report.conv_bits, 1800);
        assert_eq!(report.elm_bits, 627_200);
        assert_eq!(report.quantization_bits, Some(8));
        assert!(report.quantization_scale.is_some());
        assert_eq!(report.n_features, 7840);

        let orl = Architecture::new((64, 64, 1), vec![5, 4], 40).unwrap();
        assert_eq!(orl.expansion_factor(), 1.25);
    }

    #[test]
    fn zero_biases_are_omitted_from_payload() {
        let base = random_model(23, false, false);
        let with = {
            let mut m = base.clone();
            for layer in m.kernels.layers_mut() {
                let n = layer.out_channels();
                layer.set_biases(vec![1.5; n]).unwrap();
            }
            m
        };
        let bias_bytes: usize = with
            .kernels
            .layers()
            .iter()
            .map(|l| l.out_channels() * 8)
            .sum();
        let plain = model_to_bytes(&base).unwrap();
        let biased = model_to_bytes(&with).unwrap();
        // Payload grows by the bias section; the header shrinks by one byte
        // ("true" vs "false").
        assert_eq!(biased.len() - plain.len(), bias_bytes - 1);
    }
}
