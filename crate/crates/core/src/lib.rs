//! Core library for light binary convolutional models: binary depthwise
//! feature expansion, closed-form output-layer training, seeded kernel
//! search, gradient refinement, quantization, and a bit-exact model file.

pub mod data;
pub mod error;
pub mod linalg;
pub mod quant;
pub mod refine;
pub mod rng;
pub mod search;
pub mod solver;
pub mod store;
pub mod tensor;

pub use data::{load_idx, load_pnm_dir, load_pnm_file, normalize, one_hot, save_idx,
    split_stratified, Dataset};
pub use error::{Error, Result};
pub use quant::{quantize, quantized_predict, QuantizedWeights};
pub use refine::{refine_output, softmax_xent_loss_grad, FeatureStore, RefineConfig, RefineTrace};
pub use rng::{derive, SplitMix64};
pub use search::{
    generate_kernels, random_search, run_trial, SearchConfig, SearchReport, TrialOutcome,
    TrialRecord,
};
pub use solver::{
    accuracy, predict, solve_detailed, solve_output_weights, Branch, FeatureMatrix,
    OneHotTargets, OutputWeights, RidgeSolution, SolverConfig,
};
pub use store::{
    inspect, load_model, model_from_bytes, model_to_bytes, save_model, InspectReport, Model,
    ModelWeights, Normalization, Provenance,
};
pub use tensor::{
    depthwise_conv3x3, feature_expand, maxpool_coverall, param_bits, pool_out_size, Architecture,
    KernelLayer, KernelSet, Tensor4,
};
