//! Batch pipeline commands behind the CLI: dataset generation, training,
//! evaluation, full-field prediction, and selective-learning experiments.
//! Every run echoes its configuration to `runspec.json` and emits CSV (plus
//! optional SVG) artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::BayesNet;
use crate::fields;
use crate::geometry::{
    sample_bc, sample_structure, Family, GeometryError, PoreCount, PoreShape, StructureSpec,
};
use crate::io::{self, IoError};
use crate::net::{NetError, Network, NetworkConfig};
use crate::patchset::{self, DatasetManifest, PatchError, PatchGeometry, PatchSample};
use crate::rng;
use crate::trainer::{
    self, ALConfig, Acquisition, LossKind, Model, RunHistory, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("dataset directory missing or unreadable: {0}")]
    DatasetMissing(String),
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

fn write_runspec<C: Serialize>(out_dir: &Path, command: &str, cfg: &C) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(IoError::from)?;
    #[derive(Serialize)]
    struct RunSpec<'a, C> {
        command: &'a str,
        config: &'a C,
        toolkit_version: &'a str,
    }
    io::write_json(
        &out_dir.join("runspec.json"),
        &RunSpec { command, config: cfg, toolkit_version: env!("CARGO_PKG_VERSION") },
    )?;
    Ok(())
}

fn family_from_str(s: &str) -> Result<Family, PipelineError> {
    match s {
        "one_ellipse" => Ok(Family::OneEllipse),
        "three_ellipses" => Ok(Family::ThreeEllipses),
        "clamped_strip" => Ok(Family::ClampedStrip),
        other => Err(PipelineError::ConfigInvalid(format!("unknown family {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// gen

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub family: String,
    pub count: usize,
    pub seed: u64,
    /// Domain edge length for the linear families (model units).
    #[serde(default = "default_domain")]
    pub domain: f64,
    /// Pore count range, inclusive.
    #[serde(default)]
    pub n_pores: Option<(usize, usize)>,
    #[serde(default = "default_pore_shape")]
    pub pore_shape: String,
    #[serde(default)]
    pub bc_seed_offset: u64,
}

fn default_domain() -> f64 {
    192.0
}

fn default_pore_shape() -> String {
    "disk".into()
}

impl GenConfig {
    pub fn structure_spec(&self) -> Result<StructureSpec, PipelineError> {
        let family = family_from_str(&self.family)?;
        let mut spec = match family {
            Family::OneEllipse => StructureSpec::one_ellipse(self.domain),
            Family::ThreeEllipses => StructureSpec::three_ellipses(self.domain),
            Family::ClampedStrip => StructureSpec::clamped_strip(),
        };
        if let Some((lo, hi)) = self.n_pores {
            spec.n_pores = if lo == hi { PoreCount::Fixed(lo) } else { PoreCount::Range(lo, hi) };
        }
        spec.pore_shape = match self.pore_shape.as_str() {
            "disk" => PoreShape::Disk,
            "ellipse" => PoreShape::Ellipse,
            other => {
                return Err(PipelineError::ConfigInvalid(format!("unknown pore shape {other:?}")))
            }
        };
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GenReport {
    pub n_structures_requested: usize,
    pub n_structures_ok: usize,
    pub n_patches: usize,
    pub warnings: Vec<String>,
}

/// Generates a patch dataset: per structure, sample geometry and boundary
/// conditions, run the macro (pore-free) and micro FE models, rasterise,
/// extract and scale patches. Structure failures are logged and skipped;
/// per-structure results are cached under `parts/` so reruns resume.
pub fn cmd_gen(cfg: &GenConfig, out_dir: &Path) -> Result<GenReport, PipelineError> {
    crate::init_threads();
    write_runspec(out_dir, "gen", cfg)?;
    let spec = cfg.structure_spec()?;
    let family = family_from_str(&cfg.family)?;
    let geom = PatchGeometry::default();

    let mut report = GenReport { n_structures_requested: cfg.count, ..Default::default() };
    let mut all: Vec<PatchSample> = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..cfg.count {
        let structure_seed = rng_seed(cfg.seed, i as u64);
        seeds.push(structure_seed);
        let part_dir = out_dir.join("parts").join(format!("{i:04}"));
        if let Ok((samples, _)) = patchset::read_dataset(&part_dir) {
            report.n_structures_ok += 1;
            all.extend(samples);
            continue;
        }
        match generate_structure_patches(&spec, family, structure_seed, cfg.bc_seed_offset, geom) {
            Ok(samples) => {
                let manifest =
                    DatasetManifest::new(samples.len(), geom, &cfg.family, vec![structure_seed]);
                patchset::write_dataset(&samples, &manifest, &part_dir)?;
                report.n_structures_ok += 1;
                all.extend(samples);
            }
            Err(e) => {
                report.warnings.push(format!("structure {i} (seed {structure_seed}): {e}"));
            }
        }
    }
    report.n_patches = all.len();
    let manifest = DatasetManifest::new(all.len(), geom, &cfg.family, seeds);
    patchset::write_dataset(&all, &manifest, out_dir)?;
    io::write_json(&out_dir.join("gen_report.json"), &report)?;
    Ok(report)
}

fn generate_structure_patches(
    spec: &StructureSpec,
    family: Family,
    structure_seed: u64,
    bc_seed_offset: u64,
    geom: PatchGeometry,
) -> Result<Vec<PatchSample>, PipelineError> {
    let structure = sample_structure(spec, structure_seed)?;
    let bc = match sample_bc(family, structure_seed.wrapping_add(bc_seed_offset)) {
        crate::geometry::BoundaryCondition::FarField(ff) => {
            crate::geometry::BoundaryCondition::FarField(ff.with_center(structure.center()))
        }
        other => other,
    };
    let theory = trainer::theory_for(&structure);
    let bundle = trainer::fe_images(&structure, &bc, theory, None)?;
    let samples = patchset::extract_patches(
        &bundle.macro_stress,
        &bundle.geometry,
        &bundle.micro_tresca,
        geom,
        structure_seed,
    )?;
    Ok(samples)
}

fn rng_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed
        .wrapping_add(k.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x61c8864680b583eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCmdConfig {
    pub dataset: String,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// "deterministic" or "bayesian".
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_filters")]
    pub filters: (usize, usize, usize),
    #[serde(default = "default_residual")]
    pub n_residual: usize,
    #[serde(default)]
    pub rotations: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Predictive sample count for Bayesian models.
    #[serde(default = "default_t_passes")]
    pub t_passes: usize,
    #[serde(default = "default_true")]
    pub prior_trainable: bool,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub resume: bool,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_model() -> String {
    "deterministic".into()
}
fn default_filters() -> (usize, usize, usize) {
    (32, 64, 128)
}
fn default_residual() -> usize {
    5
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_t_passes() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_thresholds() -> Vec<f64> {
    vec![0.05, 0.10, 0.15, 0.20, 0.30]
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    epochs_trained: usize,
    model: String,
}

/// Splits samples by structure id so no structure feeds both sides.
pub fn split_structurewise(
    samples: Vec<PatchSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<PatchSample>, Vec<PatchSample>) {
    let mut ids: Vec<u64> = Vec::new();
    for s in &samples {
        if !ids.contains(&s.provenance.structure_id) {
            ids.push(s.provenance.structure_id);
        }
    }
    let mut r = rng::stream_rng(seed, 0x5eed);
    let order = rng::shuffled_indices(ids.len(), &mut r);
    let target = (samples.len() as f64 * val_fraction).round() as usize;
    let mut val_ids = Vec::new();
    let mut val_count = 0usize;
    for &oi in &order {
        if val_count >= target {
            break;
        }
        let id = ids[oi];
        val_count += samples.iter().filter(|s| s.provenance.structure_id == id).count();
        val_ids.push(id);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if val_ids.contains(&s.provenance.structure_id) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

pub fn cmd_train(cfg: &TrainCmdConfig, out_dir: &Path) -> Result<RunHistory, PipelineError> {
    crate::init_threads();
    write_runspec(out_dir, "train", cfg)?;
    let (samples, _manifest) = patchset::read_dataset(Path::new(&cfg.dataset))
        .map_err(|e| PipelineError::DatasetMissing(format!("{}: {e}", cfg.dataset)))?;
    if samples.is_empty() {
        return Err(PipelineError::ConfigInvalid("dataset is empty".into()));
    }
    let (train_set, val_set) = split_structurewise(samples, cfg.val_fraction, cfg.seed);

    let net_cfg = NetworkConfig {
        filters: cfg.filters,
        n_residual: cfg.n_residual,
        ..NetworkConfig::default()
    };
    let ckpt_dir = out_dir.join("checkpoint");
    let mut epoch_offset = 0usize;
    let mut model: Model<f32> = match cfg.model.as_str() {
        "deterministic" => {
            if cfg.resume && ckpt_dir.join("params.json").exists() {
                let state: TrainState = io::read_json(&out_dir.join("train_state.json"))?;
                epoch_offset = state.epochs_trained;
                Model::Deterministic(Network::load(&ckpt_dir)?)
            } else {
                Model::Deterministic(Network::build(net_cfg, cfg.seed)?)
            }
        }
        "bayesian" => {
            if cfg.resume && ckpt_dir.join("params.json").exists() {
                let state: TrainState = io::read_json(&out_dir.join("train_state.json"))?;
                epoch_offset = state.epochs_trained;
                Model::Bayesian(BayesNet::load(&ckpt_dir, cfg.prior_trainable)?)
            } else {
                Model::Bayesian(BayesNet::build(net_cfg, cfg.seed, cfg.prior_trainable)?)
            }
        }
        other => return Err(PipelineError::ConfigInvalid(format!("unknown model {other:?}"))),
    };

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
        loss: match model {
            Model::Deterministic(_) => LossKind::MseRoi,
            Model::Bayesian(_) => LossKind::Elbo,
        },
        rotations: cfg.rotations,
        thresholds: cfg.thresholds.clone(),
        primary_threshold: 0.10,
        keep_best: true,
        ..TrainConfig::default()
    };
    let mut history = trainer::train(&mut model, &train_set, &val_set, &train_cfg)?;
    for e in &mut history.epochs {
        e.epoch += epoch_offset;
    }

    model.save(&ckpt_dir)?;
    io::write_json(
        &out_dir.join("train_state.json"),
        &TrainState { epochs_trained: epoch_offset + cfg.epochs, model: cfg.model.clone() },
    )?;
    write_history_csv(&history, out_dir)?;
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let pairs = trainer::roi_max_pairs(&model, eval_set)?;
    write_accuracy_curve_csv(&pairs, &cfg.thresholds, &out_dir.join("accuracy_curve.csv"))?;
    let curve = trainer::accuracy_curve(&pairs, &cfg.thresholds);
    let svg = svg_line_chart(
        "accuracy vs threshold",
        "threshold",
        "accuracy",
        &[("accuracy", curve.iter().map(|(t, o)| (*t, o.accuracy)).collect())],
    );
    std::fs::write(out_dir.join("accuracy_vs_threshold.svg"), svg).map_err(IoError::from)?;
    let loss_series: Vec<(f64, f64)> =
        history.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
    let svg = svg_line_chart("training loss", "epoch", "loss", &[("train", loss_series)]);
    std::fs::write(out_dir.join("loss_vs_epoch.svg"), svg).map_err(IoError::from)?;
    Ok(history)
}

fn write_history_csv(history: &RunHistory, out_dir: &Path) -> Result<(), PipelineError> {
    let mut csv = String::from("epoch,train_loss");
    for t in &history.thresholds {
        write!(csv, ",acc@{t}").unwrap();
    }
    csv.push_str(",n_excluded\n");
    let mut timings = String::from("epoch,wall_s\n");
    for e in &history.epochs {
        write!(csv, "{},{}", e.epoch, e.train_loss).unwrap();
        for a in &e.val_accuracy {
            write!(csv, ",{a}").unwrap();
        }
        writeln!(csv, ",{}", e.n_excluded).unwrap();
        writeln!(timings, "{},{}", e.epoch, e.wall_s).unwrap();
    }
    std::fs::write(out_dir.join("history.csv"), csv).map_err(IoError::from)?;
    // Wall time is diagnostic only and excluded from determinism contracts.
    std::fs::write(out_dir.join("timings.csv"), timings).map_err(IoError::from)?;
    Ok(())
}

fn write_accuracy_curve_csv(
    pairs: &trainer::MaxPairs,
    thresholds: &[f64],
    path: &Path,
) -> Result<(), PipelineError> {
    let mut csv = String::from("threshold,accuracy,n_counted,n_excluded\n");
    for (t, o) in trainer::accuracy_curve(pairs, thresholds) {
        writeln!(csv, "{t},{},{},{}", o.accuracy, o.n_counted, o.n_excluded).unwrap();
    }
    std::fs::write(path, csv).map_err(IoError::from)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCmdConfig {
    pub dataset: String,
    pub checkpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
}

#[derive(Serialize)]
pub struct EvalMetrics {
    pub n_samples: usize,
    pub n_excluded: usize,
    pub accuracy: Vec<(f64, f64)>,
}

pub fn cmd_eval(cfg: &EvalCmdConfig, out_dir: &Path) -> Result<EvalMetrics, PipelineError> {
    crate::init_threads();
    write_runspec(out_dir, "eval", cfg)?;
    let (samples, _) = patchset::read_dataset(Path::new(&cfg.dataset))
        .map_err(|e| PipelineError::DatasetMissing(format!("{}: {e}", cfg.dataset)))?;
    let model = load_model(&PathBuf::from(&cfg.checkpoint), &cfg.model)?;
    let pairs = trainer::roi_max_pairs(&model, &samples)?;
    write_accuracy_curve_csv(&pairs, &cfg.thresholds, &out_dir.join("accuracy_curve.csv"))?;
    let curve = trainer::accuracy_curve(&pairs, &cfg.thresholds);
    let svg = svg_line_chart(
        "accuracy vs threshold",
        "threshold",
        "accuracy",
        &[("accuracy", curve.iter().map(|(t, o)| (*t, o.accuracy)).collect())],
    );
    std::fs::write(out_dir.join("accuracy_vs_threshold.svg"), svg).map_err(IoError::from)?;
    let metrics = EvalMetrics {
        n_samples: samples.len(),
        n_excluded: curve.first().map_or(0, |(_, o)| o.n_excluded),
        accuracy: curve.iter().map(|(t, o)| (*t, o.accuracy)).collect(),
    };
    io::write_json(&out_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn load_model(checkpoint: &Path, kind: &str) -> Result<Model<f32>, PipelineError> {
    if !checkpoint.join("params.json").exists() {
        return Err(PipelineError::CheckpointMissing(checkpoint.display().to_string()));
    }
    match kind {
        "deterministic" => Ok(Model::Deterministic(Network::load(checkpoint)?)),
        "bayesian" => Ok(Model::Bayesian(BayesNet::load(checkpoint, true)?)),
        other => Err(PipelineError::ConfigInvalid(format!("unknown model {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// predict

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictCmdConfig {
    pub family: String,
    pub structure_seed: u64,
    pub checkpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_domain")]
    pub domain: f64,
    #[serde(default)]
    pub n_pores: Option<(usize, usize)>,
    #[serde(default = "default_pore_shape")]
    pub pore_shape: String,
}

#[derive(Serialize)]
pub struct PredictReport {
    pub max_truth: f64,
    pub max_prediction: f64,
    pub max_value_rel_error: f64,
    pub mean_abs_error: f64,
    pub rmse: f64,
    pub max_abs_error: f64,
}

/// Full-field prediction with the FE oracle: writes truth, reconstruction
/// and absolute-error images plus an error report.
pub fn cmd_predict(cfg: &PredictCmdConfig, out_dir: &Path) -> Result<PredictReport, PipelineError> {
    crate::init_threads();
    write_runspec(out_dir, "predict", cfg)?;
    let gen = GenConfig {
        family: cfg.family.clone(),
        count: 1,
        seed: 0,
        domain: cfg.domain,
        n_pores: cfg.n_pores,
        pore_shape: cfg.pore_shape.clone(),
        bc_seed_offset: 0,
    };
    let spec = gen.structure_spec()?;
    let family = family_from_str(&cfg.family)?;
    let structure = sample_structure(&spec, cfg.structure_seed)?;
    let bc = match sample_bc(family, cfg.structure_seed) {
        crate::geometry::BoundaryCondition::FarField(ff) => {
            crate::geometry::BoundaryCondition::FarField(ff.with_center(structure.center()))
        }
        other => other,
    };
    let model = load_model(&PathBuf::from(&cfg.checkpoint), &cfg.model)?;
    let report =
        trainer::evaluate_full_structure(&model, &structure, &bc, trainer::theory_for(&structure))?;
    fields::write_field_image(&out_dir.join("truth"), &report.truth)?;
    fields::write_field_image(&out_dir.join("reconstruction"), &report.reconstruction)?;
    fields::write_field_image(&out_dir.join("abs_error"), &report.abs_error)?;
    let out = PredictReport {
        max_truth: report.max_truth,
        max_prediction: report.max_prediction,
        max_value_rel_error: report.max_value_rel_error,
        mean_abs_error: report.mean_abs_error,
        rmse: report.rmse,
        max_abs_error: report.max_abs_error,
    };
    io::write_json(&out_dir.join("report.json"), &out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// al

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlCmdConfig {
    pub dataset: String,
    pub initial: usize,
    pub pool: usize,
    pub val: usize,
    pub query_rate: usize,
    /// "max_variance" or "random".
    #[serde(default = "default_acquisition")]
    pub acquisition: String,
    #[serde(default = "default_al_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_al_t")]
    pub t_passes: usize,
    #[serde(default = "default_al_epochs")]
    pub retrain_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_al_filters")]
    pub filters: (usize, usize, usize),
    #[serde(default = "default_residual")]
    pub n_residual: usize,
    #[serde(default)]
    pub use_plateau: bool,
}

fn default_acquisition() -> String {
    "max_variance".into()
}
fn default_al_seeds() -> Vec<u64> {
    vec![0]
}
fn default_al_t() -> usize {
    10
}
fn default_al_epochs() -> usize {
    10
}
fn default_al_filters() -> (usize, usize, usize) {
    (8, 16, 32)
}

#[derive(Serialize)]
pub struct AlSummary {
    pub seeds: Vec<u64>,
    pub histories: Vec<RunHistory>,
}

/// Selective-learning experiment over one or more seeds; emits per-seed and
/// aggregated CSV plus an accuracy-vs-labeled SVG.
pub fn cmd_al(cfg: &AlCmdConfig, out_dir: &Path) -> Result<AlSummary, PipelineError> {
    crate::init_threads();
    write_runspec(out_dir, "al", cfg)?;
    let (samples, _) = patchset::read_dataset(Path::new(&cfg.dataset))
        .map_err(|e| PipelineError::DatasetMissing(format!("{}: {e}", cfg.dataset)))?;
    if samples.len() < cfg.initial + cfg.pool + cfg.val {
        return Err(PipelineError::ConfigInvalid(format!(
            "dataset holds {} samples; {} required",
            samples.len(),
            cfg.initial + cfg.pool + cfg.val
        )));
    }
    let acquisition = match cfg.acquisition.as_str() {
        "max_variance" => Acquisition::MaxVariance,
        "random" => Acquisition::Random,
        other => return Err(PipelineError::ConfigInvalid(format!("unknown acquisition {other:?}"))),
    };
    let net_cfg = NetworkConfig {
        filters: cfg.filters,
        n_residual: cfg.n_residual,
        ..NetworkConfig::default()
    };

    let mut histories = Vec::new();
    for &seed in &cfg.seeds {
        // Split deterministically per experiment seed.
        let mut r = rng::stream_rng(seed, 0xa1);
        let order = rng::shuffled_indices(samples.len(), &mut r);
        let initial: Vec<PatchSample> =
            order[..cfg.initial].iter().map(|&i| samples[i].clone()).collect();
        let pool: Vec<PatchSample> =
            order[cfg.initial..cfg.initial + cfg.pool].iter().map(|&i| samples[i].clone()).collect();
        let val: Vec<PatchSample> = order[cfg.initial + cfg.pool..cfg.initial + cfg.pool + cfg.val]
            .iter()
            .map(|&i| samples[i].clone())
            .collect();

        let mut model = Model::Bayesian(BayesNet::<f32>::build(net_cfg, seed, true)?);
        let al_cfg = ALConfig {
            query_rate: cfg.query_rate,
            acquisition,
            t_passes: cfg.t_passes,
            retrain_epochs: cfg.retrain_epochs,
            seed,
            batch: cfg.batch,
            lr: cfg.lr,
            use_plateau: cfg.use_plateau,
            ..Default::default()
        };
        let history = trainer::selective_learning(&mut model, &initial, &pool, &val, &al_cfg)?;
        histories.push(history);
    }

    write_al_csv(&cfg.seeds, &histories, out_dir)?;
    let series: Vec<(&str, Vec<(f64, f64)>)> = vec![(
        "mean acc@0.10",
        aggregate_primary(&histories).into_iter().map(|(l, m, _)| (l as f64, m)).collect(),
    )];
    let svg = svg_line_chart("accuracy vs labeled", "labeled", "accuracy", &series);
    std::fs::write(out_dir.join("accuracy_vs_labeled.svg"), svg).map_err(IoError::from)?;
    Ok(AlSummary { seeds: cfg.seeds.clone(), histories })
}

/// Mean and half-width of the normal 95% confidence band of the primary
/// accuracy per iteration over the runs.
pub fn aggregate_primary(histories: &[RunHistory]) -> Vec<(usize, f64, f64)> {
    if histories.is_empty() {
        return Vec::new();
    }
    let primary = |h: &RunHistory, i: usize| -> Option<(usize, f64)> {
        let r = h.al.get(i)?;
        let idx = h.thresholds.iter().position(|&t| (t - 0.10).abs() < 1e-12).unwrap_or(0);
        Some((r.labeled, r.accuracy[idx]))
    };
    let n_iter = histories.iter().map(|h| h.al.len()).min().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..n_iter {
        let vals: Vec<(usize, f64)> = histories.iter().filter_map(|h| primary(h, i)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().map(|v| v.1).sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v.1 - mean) * (v.1 - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let ci = 1.96 * (var / n).sqrt();
        out.push((vals[0].0, mean, ci));
    }
    out
}

fn write_al_csv(
    seeds: &[u64],
    histories: &[RunHistory],
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let mut csv = String::from("seed,iteration,labeled,train_loss");
    if let Some(h) = histories.first() {
        for t in &h.thresholds {
            write!(csv, ",acc@{t}").unwrap();
        }
    }
    csv.push('\n');
    for (seed, h) in seeds.iter().zip(histories) {
        for r in &h.al {
            write!(csv, "{seed},{},{},{}", r.iteration, r.labeled, r.train_loss).unwrap();
            for a in &r.accuracy {
                write!(csv, ",{a}").unwrap();
            }
            csv.push('\n');
        }
    }
    std::fs::write(out_dir.join("al_history.csv"), csv).map_err(IoError::from)?;

    let mut summary = String::from("labeled,mean_acc,ci95\n");
    for (labeled, mean, ci) in aggregate_primary(histories) {
        writeln!(summary, "{labeled},{mean},{ci}").unwrap();
    }
    std::fs::write(out_dir.join("al_summary.csv"), summary).map_err(IoError::from)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// svg

/// Minimal polyline chart; enough for accuracy/loss curves without a raster
/// toolchain.
pub fn svg_line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    let (mut x0, mut x1) = (f64::MAX, f64::MIN);
    let (mut y0, mut y1) = (f64::MAX, f64::MIN);
    for (_, pts) in series {
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || y1 <= y0 {
        y0 = 0.0;
        y1 = 1.0;
    }
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let colors = ["#d95f02", "#1b9e77", "#7570b3", "#e7298a"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    write!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    )
    .unwrap();
    write!(
        svg,
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#777\"/>\n",
        W - ML - MR,
        H - MT - MB
    )
    .unwrap();
    for (i, frac) in [0.0f64, 0.5, 1.0].iter().enumerate() {
        let xv = x0 + frac * (x1 - x0);
        let yv = y0 + frac * (y1 - y0);
        write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xv:.3}</text>\n",
            sx(xv),
            H - MB + 18.0
        )
        .unwrap();
        write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.3}</text>\n",
            ML - 6.0,
            sy(yv) + 4.0
        )
        .unwrap();
        let _ = i;
    }
    write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\n",
        W / 2.0,
        H - 12.0
    )
    .unwrap();
    write!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        )
        .unwrap();
        write!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n",
            W - MR - 150.0,
            MT + 16.0 + 16.0 * si as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
