//! One function per subcommand. Each resolves its inputs, runs the matching
//! library operation, and fills a [`RunReport`].

use crate::report::{
    Accuracies, DatasetSummary, Prediction, RunReport, Seeds, Timings,
};
use crate::{
    CliError, DataArgs, DataFormat, EvalArgs, InspectArgs, PredictArgs, QuantizeArgs, RefineArgs,
    SearchArgs,
};
use lbcnn_core::data::{load_idx, load_pnm_dir, load_pnm_file, normalize, split_stratified, Dataset};
use lbcnn_core::error::Error;
use lbcnn_core::quant::quantize;
use lbcnn_core::refine::{refine_output, RefineConfig, DEFAULT_MEMORY_BUDGET};
use lbcnn_core::search::{random_search, SearchConfig};
use lbcnn_core::solver::{self, SolverConfig};
use lbcnn_core::store::{
    inspect, load_model, save_model, Model, ModelWeights, Normalization, Provenance,
};
use lbcnn_core::tensor::{feature_expand, Architecture, Tensor4};
use std::path::{Path, PathBuf};
use std::time::Instant;

type CmdResult = Result<RunReport, CliError>;

/// Samples per prediction slab; bounds feature-matrix memory during eval.
const EVAL_SLAB: usize = 1024;

fn load_one(format: DataFormat, spec: &str, role: &str) -> Result<Dataset, CliError> {
    match format {
        DataFormat::Idx => {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 2 {
                return Err(CliError::Usage(format!(
                    "--{role} with idx format takes IMAGES,LABELS; got {spec:?}"
                )));
            }
            Ok(load_idx(Path::new(parts[0]), Path::new(parts[1]))?)
        }
        DataFormat::Pnm => Ok(load_pnm_dir(Path::new(spec))?),
    }
}

/// Put both sets on a shared class count so a small test set missing the
/// top classes still lines up with the training set.
fn unify_classes(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset), CliError> {
    if let (Some(a), Some(b)) = (&train.class_names, &test.class_names) {
        if a != b {
            return Err(CliError::from(Error::Input(format!(
                "train and test class names differ: {a:?} vs {b:?}"
            ))));
        }
    }
    let k = train.n_classes.max(test.n_classes);
    let widen = |ds: Dataset| -> Result<Dataset, Error> {
        if ds.n_classes == k {
            Ok(ds)
        } else {
            Dataset::new(ds.images, ds.labels, k, ds.class_names)
        }
    };
    Ok((widen(train)?, widen(test)?))
}

/// Resolve a training and a test set: explicit --test, or a stratified
/// split of --train.
fn load_train_test(data: &DataArgs, seed: u64) -> Result<(Dataset, Dataset, bool), CliError> {
    let train_spec = data
        .train
        .as_deref()
        .ok_or_else(|| CliError::Usage("--train is required".into()))?;
    let train = load_one(data.data_format, train_spec, "train")?;
    if let Some(test_spec) = data.test.as_deref() {
        let test = load_one(data.data_format, test_spec, "test")?;
        let (train, test) = unify_classes(train, test)?;
        Ok((train, test, false))
    } else if let Some(fraction) = data.split {
        let (train, test) = split_stratified(&train, fraction, seed)?;
        Ok((train, test, true))
    } else {
        Err(CliError::Usage(
            "need --test or --split to get a held-out set".into(),
        ))
    }
}

fn summary(train: Option<&Dataset>, test: Option<&Dataset>) -> Option<DatasetSummary> {
    let any = train.or(test)?;
    let (_, h, w, c) = any.images.shape();
    Some(DatasetSummary {
        n_train: train.map(Dataset::len),
        n_test: test.map(Dataset::len),
        shape: (h, w, c),
        n_classes: train.map_or_else(|| test.map(|d| d.n_classes).unwrap_or(0), |d| d.n_classes),
    })
}

fn config_json<T: serde::Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("flag structs serialize")
}

fn out_or_model(out: &Option<PathBuf>, model: &Path) -> PathBuf {
    out.clone().unwrap_or_else(|| model.to_path_buf())
}

pub fn cmd_search(args: &SearchArgs) -> CmdResult {
    if args.filters.is_empty() || args.filters.len() > 3 || args.filters.contains(&0) {
        return Err(CliError::Usage(format!(
            "--filters takes 1 to 3 positive counts, got {:?}",
            args.filters
        )));
    }
    let (train_raw, test_raw, used_split) = load_train_test(&args.data, args.seed)?;
    let train = normalize(&train_raw)?;
    let test = normalize(&test_raw)?;
    drop((train_raw, test_raw));

    let (_, h, w, c) = train.images.shape();
    let arch = Architecture::new((h, w, c), args.filters.clone(), train.n_classes)?;
    let cfg = SearchConfig {
        trials: args.trials,
        master_seed: args.seed,
        arch: arch.clone(),
        solver: SolverConfig {
            c: args.reg,
            ..SolverConfig::default()
        },
        max_train_samples: args.data.max_train,
    };
    let (kernels, weights, search_report) = random_search(&cfg, &train, &test)?;
    let best = &search_report.trials[search_report.best_trial];

    let model = Model::new(
        arch.clone(),
        kernels,
        ModelWeights::Float(weights),
        train.class_names.clone(),
        Normalization::Divide255,
        Provenance {
            master_seed: Some(args.seed),
            trial_seed: Some(best.seed),
            accuracy: Some(search_report.best_accuracy),
        },
    )?;
    save_model(&model, &args.out)?;

    let mut report = RunReport::new("search", config_json(args));
    let effective_train = args.data.max_train.map_or(train.len(), |m| m.min(train.len()));
    report.dataset = summary(Some(&train), Some(&test));
    if let Some(ds) = &mut report.dataset {
        ds.n_train = Some(effective_train);
    }
    report.set_architecture(&arch);
    report.timings = Timings {
        expand_s: Some(best.expand_s),
        solve_s: Some(best.solve_s),
        refine_s: None,
    };
    report.accuracies = Accuracies {
        elm_test: Some(search_report.best_accuracy),
        ..Accuracies::default()
    };
    report.seeds = Seeds {
        master: Some(args.seed),
        best_trial: Some(best.seed),
        split: used_split.then_some(args.seed),
        shuffle: None,
    };
    report.search = Some(search_report);
    report.model = Some(inspect(&args.out)?);
    report.model_out = Some(args.out.display().to_string());
    Ok(report)
}

fn require_float(model: &Model, op: &str) -> Result<(), CliError> {
    match model.weights {
        ModelWeights::Float(_) => Ok(()),
        ModelWeights::Quantized(_) => Err(CliError::from(Error::Input(format!(
            "{op} needs a full-precision model, this one is quantized"
        )))),
    }
}

fn check_model_data(model: &Model, ds: &Dataset, name: &str) -> Result<(), CliError> {
    let (_, h, w, c) = ds.images.shape();
    if (h, w, c) != model.arch.input_shape {
        let (mh, mw, mc) = model.arch.input_shape;
        return Err(CliError::from(Error::Shape(format!(
            "{name} images are {h}x{w}x{c}, model wants {mh}x{mw}x{mc}"
        ))));
    }
    if ds.n_classes > model.arch.n_classes {
        return Err(CliError::from(Error::Shape(format!(
            "{name} set has {} classes, model has {}",
            ds.n_classes, model.arch.n_classes
        ))));
    }
    Ok(())
}

pub fn cmd_refine(args: &RefineArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    require_float(&model, "refine")?;
    let (train_raw, test_raw, used_split) = load_train_test(&args.data, args.shuffle_seed)?;
    check_model_data(&model, &train_raw, "train")?;
    check_model_data(&model, &test_raw, "test")?;
    let mut train = normalize(&train_raw)?;
    let test = normalize(&test_raw)?;
    drop((train_raw, test_raw));
    if let Some(m) = args.data.max_train {
        if m < train.len() {
            train = train.head(m)?;
        }
    }

    let t0 = Instant::now();
    let h_test = feature_expand(&test.images, &model.arch, &model.kernels)?;
    let expand_s = t0.elapsed().as_secs_f64();
    let initial = match &model.weights {
        ModelWeights::Float(w) => w.clone(),
        ModelWeights::Quantized(_) => unreachable!("checked above"),
    };
    let baseline_pred = solver::predict(&initial, &h_test)?;
    let baseline_acc = solver::accuracy(&baseline_pred, &test.labels)?;

    let cfg = RefineConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        shuffle_seed: args.shuffle_seed,
    };
    let t1 = Instant::now();
    let (refined, trace) = refine_output(
        &model.arch,
        &model.kernels,
        &train,
        &initial,
        &cfg,
        DEFAULT_MEMORY_BUDGET,
    )?;
    let refine_s = t1.elapsed().as_secs_f64();

    let refined_pred = solver::predict(&refined, &h_test)?;
    let refined_acc = solver::accuracy(&refined_pred, &test.labels)?;

    let out = out_or_model(&args.out, &args.model);
    let updated = Model::new(
        model.arch.clone(),
        model.kernels.clone(),
        ModelWeights::Float(refined),
        model.class_names.clone(),
        model.normalization,
        Provenance {
            accuracy: Some(refined_acc),
            ..model.provenance.clone()
        },
    )?;
    save_model(&updated, &out)?;

    let mut report = RunReport::new("refine", config_json(args));
    report.dataset = summary(Some(&train), Some(&test));
    report.set_architecture(&model.arch);
    report.timings = Timings {
        expand_s: Some(expand_s),
        solve_s: None,
        refine_s: Some(refine_s),
    };
    report.accuracies = Accuracies {
        elm_test: Some(baseline_acc),
        refined_test: Some(refined_acc),
        quantized_test: None,
    };
    report.seeds = Seeds {
        master: model.provenance.master_seed,
        best_trial: model.provenance.trial_seed,
        split: used_split.then_some(args.shuffle_seed),
        shuffle: Some(args.shuffle_seed),
    };
    report.refine = Some(trace);
    report.model = Some(inspect(&out)?);
    report.model_out = Some(out.display().to_string());
    Ok(report)
}

pub fn cmd_quantize(args: &QuantizeArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    require_float(&model, "quantize")?;
    let float = match &model.weights {
        ModelWeights::Float(w) => w,
        ModelWeights::Quantized(_) => unreachable!("checked above"),
    };
    let quantized = quantize(float, args.bits)?;
    let out = out_or_model(&args.out, &args.model);
    let updated = Model::new(
        model.arch.clone(),
        model.kernels.clone(),
        ModelWeights::Quantized(quantized),
        model.class_names.clone(),
        model.normalization,
        model.provenance.clone(),
    )?;
    save_model(&updated, &out)?;

    let mut report = RunReport::new("quantize", config_json(args));
    report.set_architecture(&model.arch);
    report.seeds = Seeds {
        master: model.provenance.master_seed,
        best_trial: model.provenance.trial_seed,
        ..Seeds::default()
    };
    report.model = Some(inspect(&out)?);
    report.model_out = Some(out.display().to_string());
    Ok(report)
}

/// Predict in fixed-size slabs so eval memory stays bounded by the slab,
/// not the dataset.
fn predict_slabbed(model: &Model, images: &Tensor4) -> Result<Vec<usize>, Error> {
    let n = images.batch();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_SLAB).min(n);
        let slab = images.slice_samples(start, end)?;
        preds.extend(model.predict_images(&slab)?);
        start = end;
    }
    Ok(preds)
}

/// Resolve the set eval scores against: --test, the held-out side of
/// --split, or all of --train.
fn load_eval_set(data: &DataArgs, seed: u64) -> Result<(Dataset, bool), CliError> {
    if let Some(spec) = data.test.as_deref() {
        return Ok((load_one(data.data_format, spec, "test")?, false));
    }
    let train_spec = data
        .train
        .as_deref()
        .ok_or_else(|| CliError::Usage("need --test or --train".into()))?;
    let full = load_one(data.data_format, train_spec, "train")?;
    match data.split {
        Some(fraction) => {
            let (_, held_out) = split_stratified(&full, fraction, seed)?;
            Ok((held_out, true))
        }
        None => Ok((full, false)),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let (eval_set, used_split) = load_eval_set(&args.data, args.seed)?;
    check_model_data(&model, &eval_set, "eval")?;

    let t0 = Instant::now();
    let preds = predict_slabbed(&model, &eval_set.images)?;
    let expand_s = t0.elapsed().as_secs_f64();
    let acc = solver::accuracy(&preds, &eval_set.labels)?;

    let k = model.arch.n_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    for (&truth, &pred) in eval_set.labels.iter().zip(&preds) {
        confusion[truth][pred] += 1;
    }

    let mut report = RunReport::new("eval", config_json(args));
    report.dataset = summary(None, Some(&eval_set));
    report.set_architecture(&model.arch);
    report.timings = Timings {
        expand_s: Some(expand_s),
        ..Timings::default()
    };
    report.accuracies = match model.weights {
        ModelWeights::Float(_) => Accuracies {
            elm_test: Some(acc),
            ..Accuracies::default()
        },
        ModelWeights::Quantized(_) => Accuracies {
            quantized_test: Some(acc),
            ..Accuracies::default()
        },
    };
    report.seeds = Seeds {
        master: model.provenance.master_seed,
        best_trial: model.provenance.trial_seed,
        split: used_split.then_some(args.seed),
        shuffle: None,
    };
    report.confusion_matrix = Some(confusion);
    report.model = Some(inspect(&args.model)?);
    Ok(report)
}

pub fn cmd_predict(args: &PredictArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let image = load_pnm_file(&args.image)?;
    let (_, h, w, c) = image.shape();
    if (h, w, c) != model.arch.input_shape {
        let (mh, mw, mc) = model.arch.input_shape;
        return Err(CliError::from(Error::Shape(format!(
            "image is {h}x{w}x{c}, model wants {mh}x{mw}x{mc}"
        ))));
    }
    let class_index = model.predict_images(&image)?[0];
    let class_name = model
        .class_names
        .as_ref()
        .map(|names| names[class_index].clone());

    let mut report = RunReport::new("predict", config_json(args));
    report.set_architecture(&model.arch);
    report.prediction = Some(Prediction {
        class_index,
        class_name,
    });
    report.model = Some(inspect(&args.model)?);
    Ok(report)
}

pub fn cmd_inspect(args: &InspectArgs) -> CmdResult {
    let header = inspect(&args.model)?;
    let mut report = RunReport::new("inspect", config_json(args));
    report.set_architecture(&header.architecture);
    report.seeds = Seeds {
        master: header.provenance.master_seed,
        best_trial: header.provenance.trial_seed,
        ..Seeds::default()
    };
    report.model = Some(header);
    Ok(report)
}
