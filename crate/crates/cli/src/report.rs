//! Stable JSON run report. Every key is always present; fields that do not
//! apply to a subcommand serialize as null.

use lbcnn_core::refine::RefineTrace;
use lbcnn_core::search::SearchReport;
use lbcnn_core::store::InspectReport;
use lbcnn_core::tensor::Architecture;
use serde::Serialize;

#[derive(Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub config: serde_json::Value,
    pub dataset: Option<DatasetSummary>,
    pub architecture: Option<Architecture>,
    pub n_features: Option<usize>,
    pub expansion_factor: Option<f64>,
    pub param_bits: Option<ParamBits>,
    pub timings: Timings,
    pub accuracies: Accuracies,
    pub search: Option<SearchReport>,
    pub refine: Option<RefineTrace>,
    pub seeds: Seeds,
    pub confusion_matrix: Option<Vec<Vec<u64>>>,
    pub prediction: Option<Prediction>,
    pub model: Option<InspectReport>,
    pub model_out: Option<String>,
}

impl RunReport {
    pub fn new(command: &'static str, config: serde_json::Value) -> Self {
        Self {
            command,
            config,
            dataset: None,
            architecture: None,
            n_features: None,
            expansion_factor: None,
            param_bits: None,
            timings: Timings::default(),
            accuracies: Accuracies::default(),
            search: None,
            refine: None,
            seeds: Seeds::default(),
            confusion_matrix: None,
            prediction: None,
            model: None,
            model_out: None,
        }
    }

    /// Fill the architecture block and everything derived from it.
    pub fn set_architecture(&mut self, arch: &Architecture) {
        let (conv_bits, elm_bits) = lbcnn_core::tensor::param_bits(arch);
        self.n_features = Some(arch.n_features());
        self.expansion_factor = Some(arch.expansion_factor());
        self.param_bits = Some(ParamBits {
            conv_bits,
            elm_bits,
        });
        self.architecture = Some(arch.clone());
    }
}

#[derive(Serialize)]
pub struct DatasetSummary {
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub shape: (usize, usize, usize),
    pub n_classes: usize,
}

#[derive(Serialize)]
pub struct ParamBits {
    pub conv_bits: u64,
    pub elm_bits: u64,
}

#[derive(Serialize, Default)]
pub struct Timings {
    pub expand_s: Option<f64>,
    pub solve_s: Option<f64>,
    pub refine_s: Option<f64>,
}

#[derive(Serialize, Default)]
pub struct Accuracies {
    pub elm_test: Option<f64>,
    pub refined_test: Option<f64>,
    pub quantized_test: Option<f64>,
}

#[derive(Serialize, Default)]
pub struct Seeds {
    pub master: Option<u64>,
    pub best_trial: Option<u64>,
    pub split: Option<u64>,
    pub shuffle: Option<u64>,
}

#[derive(Serialize)]
pub struct Prediction {
    pub class_index: usize,
    pub class_name: Option<String>,
}
