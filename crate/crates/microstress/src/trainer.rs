//! Training loops for the deterministic and Bayesian networks, the
//! max-in-ROI accuracy metric and threshold curves, uncertainty-ranked
//! acquisition, the selective-learning loop, and full-structure evaluation
//! against the FE oracle.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::BayesNet;
use crate::fem::{self, FemError, MeshParams, Theory};
use crate::fields::{self, FieldImage};
use crate::geometry::{BinaryImage, BoundaryCondition, Family, GridSpec, Structure};
use crate::net::{Mode, NetError, Network};
use crate::patchset::{self, PatchError, PatchGeometry, PatchSample, Provenance};
use crate::rng::{self, streams};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::tape::Tape;
use crate::tensor::{Real, RoiRect, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("operation requires a Bayesian model")]
    NotBayesian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    MseRoi,
    Elbo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Rotation augmentation count (0, 6 or 12 in the reference protocol).
    pub rotations: usize,
    pub thresholds: Vec<f64>,
    /// Threshold used for best-checkpoint selection and plateau rules.
    pub primary_threshold: f64,
    /// Restore the best-validation parameters at the end of training.
    pub keep_best: bool,
    /// Validate every k-th epoch (and the last); records in between repeat
    /// the previous measurement.
    pub eval_every: usize,
    /// Multiply the learning rate by `lr_decay` at each epoch fraction in
    /// `lr_decay_at` (e.g. [0.6, 0.85]).
    pub lr_decay_at: Vec<f64>,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            loss: LossKind::MseRoi,
            rotations: 0,
            thresholds: vec![0.05, 0.10, 0.15, 0.20, 0.30],
            primary_threshold: 0.10,
            keep_best: true,
            eval_every: 1,
            lr_decay_at: Vec::new(),
            lr_decay: 0.3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch < 2 {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch(
                "epochs >= 1 and batch >= 2 required".into(),
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy per configured threshold.
    pub val_accuracy: Vec<f64>,
    pub n_excluded: usize,
    /// Diagnostic only; excluded from determinism comparisons.
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlRecord {
    pub iteration: usize,
    pub labeled: usize,
    pub accuracy: Vec<f64>,
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub thresholds: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub al: Vec<AlRecord>,
}

impl RunHistory {
    /// Equality ignoring wall-clock diagnostics.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.thresholds == other.thresholds
            && self.al == other.al
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss == b.train_loss
                    && a.val_accuracy == b.val_accuracy
                    && a.n_excluded == b.n_excluded
            })
    }
}

/// A deterministic or Bayesian surrogate under training/evaluation.
pub enum Model<T: Real> {
    Deterministic(Network<T>),
    Bayesian(BayesNet<T>),
}

impl<T: Real> Model<T> {
    pub fn cfg(&self) -> &crate::net::NetworkConfig {
        match self {
            Model::Deterministic(n) => &n.cfg,
            Model::Bayesian(b) => &b.net.cfg,
        }
    }

    pub fn as_bayes(&self) -> Option<&BayesNet<T>> {
        match self {
            Model::Bayesian(b) => Some(b),
            _ => None,
        }
    }

    /// Point predictions (MAP weights for the Bayesian model) for a batch of
    /// samples: the scaled ROI image per sample.
    pub fn predict_scaled_rois(&self, samples: &[&PatchSample]) -> Result<Vec<Vec<f32>>, TrainError> {
        let cfg = *self.cfg();
        let roi = cfg.roi();
        let p = cfg.patch_px;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let mut data = Vec::with_capacity(chunk.len() * 4 * p * p);
            for s in chunk {
                data.extend(s.input.iter().map(|&v| T::from_f64(v as f64)));
            }
            let x = Tensor4::from_vec(chunk.len(), 4, p, p, data);
            let y = match self {
                Model::Deterministic(net) => net.forward_infer(&x)?,
                Model::Bayesian(b) => {
                    // MAP weights: materialise mu exactly.
                    b.net.forward_infer_with(&b.materialize_map(), &x)?
                }
            };
            for i in 0..chunk.len() {
                let mut roi_img = Vec::with_capacity(roi.area());
                for yy in roi.y0..roi.y1 {
                    for xx in roi.x0..roi.x1 {
                        roi_img.push(y.at(i, 0, yy, xx).to_f64() as f32);
                    }
                }
                out.push(roi_img);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<(), NetError> {
        match self {
            Model::Deterministic(n) => n.save(dir),
            Model::Bayesian(b) => b.save(dir),
        }
    }
}

/// Unscaled (true Tresca) ROI maxima for predictions and targets.
#[derive(Clone, Debug, Default)]
pub struct MaxPairs {
    pub y_nn: Vec<f64>,
    pub y_fe: Vec<f64>,
}

pub fn roi_max_pairs<T: Real>(
    model: &Model<T>,
    samples: &[PatchSample],
) -> Result<MaxPairs, TrainError> {
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let preds = model.predict_scaled_rois(&refs)?;
    let mut pairs = MaxPairs::default();
    for (s, pred) in samples.iter().zip(&preds) {
        let unscaled = patchset::unscale_prediction(pred, s.s_out);
        let y_nn = unscaled.iter().cloned().fold(f64::MIN, f64::max);
        let roi = s.geom_roi();
        let p = s.geom.patch_px;
        let mut y_fe = f64::MIN;
        for yy in roi.y0..roi.y1 {
            for xx in roi.x0..roi.x1 {
                y_fe = y_fe.max(s.target[yy * p + xx] as f64 * s.s_out as f64);
            }
        }
        pairs.y_nn.push(y_nn);
        pairs.y_fe.push(y_fe);
    }
    Ok(pairs)
}

impl PatchSample {
    pub fn geom_roi(&self) -> RoiRect {
        RoiRect::centered(self.geom.patch_px, self.geom.roi_px)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyOutcome {
    pub accuracy: f64,
    pub n_counted: usize,
    /// Samples with a zero truth maximum; excluded and reported.
    pub n_excluded: usize,
}

/// Fraction of samples whose ROI-max relative error is within the threshold.
pub fn accuracy(pairs: &MaxPairs, threshold: f64) -> AccuracyOutcome {
    assert!(threshold > 0.0);
    let mut accepted = 0usize;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (&nn, &fe) in pairs.y_nn.iter().zip(&pairs.y_fe) {
        if fe == 0.0 {
            excluded += 1;
            continue;
        }
        counted += 1;
        if ((nn - fe) / fe).abs() <= threshold {
            accepted += 1;
        }
    }
    AccuracyOutcome {
        accuracy: if counted > 0 { accepted as f64 / counted as f64 } else { 0.0 },
        n_counted: counted,
        n_excluded: excluded,
    }
}

pub fn accuracy_curve(pairs: &MaxPairs, thresholds: &[f64]) -> Vec<(f64, AccuracyOutcome)> {
    thresholds.iter().map(|&t| (t, accuracy(pairs, t))).collect()
}

/// Identity baseline of the surrogate task: predict the macro Tresca field
/// directly (no microscale correction).
pub fn identity_baseline_pairs(samples: &[PatchSample]) -> MaxPairs {
    let mut pairs = MaxPairs::default();
    for s in samples {
        let macro_tresca = s.macro_tresca();
        let roi = s.geom_roi();
        let p = s.geom.patch_px;
        let mut y_nn = f64::MIN;
        let mut y_fe = f64::MIN;
        for yy in roi.y0..roi.y1 {
            for xx in roi.x0..roi.x1 {
                y_nn = y_nn.max(macro_tresca[yy * p + xx]);
                y_fe = y_fe.max(s.target[yy * p + xx] as f64 * s.s_out as f64);
            }
        }
        pairs.y_nn.push(y_nn);
        pairs.y_fe.push(y_fe);
    }
    pairs
}

fn batch_tensors<T: Real>(samples: &[&PatchSample]) -> (Tensor4<T>, Tensor4<T>) {
    let p = samples[0].geom.patch_px;
    let n = samples.len();
    let mut x = Vec::with_capacity(n * 4 * p * p);
    let mut t = Vec::with_capacity(n * p * p);
    for s in samples {
        x.extend(s.input.iter().map(|&v| T::from_f64(v as f64)));
        t.extend(s.target.iter().map(|&v| T::from_f64(v as f64)));
    }
    (Tensor4::from_vec(n, 4, p, p, x), Tensor4::from_vec(n, 1, p, p, t))
}

/// Epoch-loop training with seeded shuffling; returns the history and leaves
/// the model at its best-validation parameters (when configured).
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[PatchSample],
    val_set: &[PatchSample],
    cfg: &TrainConfig,
) -> Result<RunHistory, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train_data: Vec<PatchSample> = if cfg.rotations > 0 {
        patchset::augment_dataset(train_set, cfg.rotations)
    } else {
        train_set.to_vec()
    };
    let roi = model.cfg().roi();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut adam_det = match model {
        Model::Deterministic(net) => Some(AdamState::new(adam_cfg, &net.params)),
        _ => None,
    };
    let mut adam_bayes = match model {
        Model::Bayesian(b) => Some(b.new_adam(adam_cfg)),
        _ => None,
    };

    let mut history = RunHistory { thresholds: cfg.thresholds.clone(), ..Default::default() };
    let primary_idx = cfg
        .thresholds
        .iter()
        .position(|&t| (t - cfg.primary_threshold).abs() < 1e-12)
        .unwrap_or(0);
    type Snapshot<T> = (Vec<Tensor4<T>>, Vec<crate::net::BnState<T>>);
    let mut best: Option<(f64, Snapshot<T>)> = None;
    let mut global_step = 0u64;

    let mut last_eval: Option<(Vec<f64>, usize)> = None;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        // Step-wise decay on epoch-fraction boundaries.
        let decay_steps = cfg
            .lr_decay_at
            .iter()
            .filter(|&&frac| (epoch as f64) >= frac * cfg.epochs as f64)
            .count();
        let lr_now = cfg.lr * cfg.lr_decay.powi(decay_steps as i32);
        if let Some(a) = adam_det.as_mut() {
            a.cfg.lr = lr_now;
        }
        if let Some(a) = adam_bayes.as_mut() {
            a.cfg.lr = lr_now;
        }
        let mut order =
            rng::keyed_rng(cfg.seed, streams::SHUFFLE, epoch as u64);
        let idx = rng::shuffled_indices(train_data.len(), &mut order);
        let n_batches = idx.len() / cfg.batch + usize::from(idx.len() % cfg.batch >= 2);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&PatchSample> = chunk.iter().map(|&i| &train_data[i]).collect();
            let (x, target) = batch_tensors::<T>(&samples);
            match (cfg.loss, &mut *model) {
                (LossKind::MseRoi, Model::Deterministic(net)) => {
                    let mut tape = Tape::new();
                    let param_ids: Vec<_> =
                        net.params.iter().map(|p| tape.param(p.clone())).collect();
                    let x_id = tape.input(x);
                    let pred = net.forward_graph(&mut tape, x_id, &param_ids, Mode::Train)?;
                    let loss = tape.mse_roi(pred, target, roi)?;
                    loss_sum += tape.value(loss).item();
                    loss_count += 1;
                    let mut grads = tape.backward(loss)?;
                    let g: Vec<_> = param_ids.iter().map(|&id| grads.take(id)).collect();
                    adam_det.as_mut().unwrap().step(&mut net.params, &g);
                }
                (LossKind::Elbo, Model::Bayesian(b)) => {
                    let noise = b.draw_noise(cfg.seed, global_step);
                    let mut tape = Tape::new();
                    let g = b.build_elbo(
                        &mut tape,
                        x,
                        target,
                        roi,
                        n_batches.max(1),
                        &noise,
                        Mode::Train,
                    )?;
                    loss_sum += tape.value(g.loss).item();
                    loss_count += 1;
                    b.apply_grads(adam_bayes.as_mut().unwrap(), &g, &tape)?;
                }
                (LossKind::MseRoi, Model::Bayesian(_)) | (LossKind::Elbo, Model::Deterministic(_)) => {
                    return Err(TrainError::Tensor(TensorError::ShapeMismatch(
                        "loss kind does not match the model kind".into(),
                    )))
                }
            }
            global_step += 1;
        }

        let do_eval = epoch % cfg.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs;
        let (val_accuracy, n_excluded) = if val_set.is_empty() {
            (vec![0.0; cfg.thresholds.len()], 0)
        } else if do_eval {
            let pairs = roi_max_pairs(model, val_set)?;
            let curve = accuracy_curve(&pairs, &cfg.thresholds);
            let out: (Vec<f64>, usize) =
                (curve.iter().map(|(_, o)| o.accuracy).collect(), curve[0].1.n_excluded);
            last_eval = Some(out.clone());
            out
        } else {
            last_eval.clone().unwrap_or((vec![0.0; cfg.thresholds.len()], 0))
        };
        if cfg.keep_best && do_eval && !val_set.is_empty() {
            let score = val_accuracy[primary_idx];
            let better = best.as_ref().map_or(true, |(b, _)| score > *b);
            if better {
                let snapshot = match &*model {
                    Model::Deterministic(net) => (net.params.clone(), net.bn_state.clone()),
                    Model::Bayesian(b) => (b.train_params.clone(), b.net.bn_state.clone()),
                };
                best = Some((score, snapshot));
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
            val_accuracy,
            n_excluded,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, (params, bn_state))) = best {
        match model {
            Model::Deterministic(net) => {
                net.params = params;
                net.bn_state = bn_state;
            }
            Model::Bayesian(b) => {
                b.train_params = params;
                b.net.bn_state = bn_state;
            }
        }
    }
    Ok(history)
}

/// Per-sample max ROI predictive variance over the pool, batching the T
/// stochastic passes so each weight draw runs the whole pool once.
pub fn uncertainty_scores<T: Real>(
    bayes: &BayesNet<T>,
    pool: &[PatchSample],
    t_passes: usize,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    assert!(t_passes >= 2);
    let cfg = bayes.net.cfg;
    let roi = cfg.roi();
    let p = cfg.patch_px;
    let n = pool.len();
    let mut mean = vec![0.0f64; n * p * p];
    let mut m2 = vec![0.0f64; n * p * p];
    for pass in 0..t_passes {
        let noise = bayes.draw_noise(seed, pass as u64);
        let params = bayes.materialize(&noise);
        let mut offset = 0usize;
        for chunk in pool.chunks(16) {
            let refs: Vec<&PatchSample> = chunk.iter().collect();
            let (x, _) = batch_tensors::<T>(&refs);
            let y = bayes.net.forward_infer_with(&params, &x)?;
            for i in 0..chunk.len() {
                let base = (offset + i) * p * p;
                // Welford in pass order: deterministic.
                let count = (pass + 1) as f64;
                for yy in 0..p {
                    for xx in 0..p {
                        let v = y.at(i, 0, yy, xx).to_f64();
                        let idx = base + yy * p + xx;
                        let delta = v - mean[idx];
                        mean[idx] += delta / count;
                        m2[idx] += delta * (v - mean[idx]);
                    }
                }
            }
            offset += chunk.len();
        }
    }
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * p * p;
        let mut best = f64::MIN;
        for yy in roi.y0..roi.y1 {
            for xx in roi.x0..roi.x1 {
                best = best.max(m2[base + yy * p + xx] / (t_passes - 1) as f64);
            }
        }
        scores.push(best);
    }
    Ok(scores)
}

/// Pool indices sorted by descending uncertainty, ties broken by index.
pub fn acquisition_rank<T: Real>(
    bayes: &BayesNet<T>,
    pool: &[PatchSample],
    t_passes: usize,
    seed: u64,
) -> Result<Vec<usize>, TrainError> {
    let scores = uncertainty_scores(bayes, pool, t_passes, seed)?;
    Ok(rank_by_scores(&scores))
}

pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Acquisition {
    MaxVariance,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ALConfig {
    pub query_rate: usize,
    pub acquisition: Acquisition,
    /// Stochastic forward passes for the uncertainty estimate.
    pub t_passes: usize,
    pub retrain_epochs: usize,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub thresholds: Vec<f64>,
    pub primary_threshold: f64,
    /// Stop when the primary accuracy improves by less than this (percentage
    /// points / 100) over two consecutive iterations.
    pub plateau_delta: f64,
    pub use_plateau: bool,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            query_rate: 50,
            acquisition: Acquisition::MaxVariance,
            t_passes: 10,
            retrain_epochs: 10,
            seed: 0,
            batch: 8,
            lr: 1e-3,
            thresholds: vec![0.05, 0.10, 0.15, 0.20, 0.30],
            primary_threshold: 0.10,
            plateau_delta: 0.005,
            use_plateau: false,
        }
    }
}

/// Pool-based selective learning: rank the pool, move the top `query_rate`
/// samples into the labeled set, retrain warm, evaluate, repeat until the
/// pool empties (or the accuracy plateaus when enabled). The labeled and
/// pool sets stay an exact partition throughout.
pub fn selective_learning<T: Real>(
    model: &mut Model<T>,
    initial_labeled: &[PatchSample],
    pool: &[PatchSample],
    val_set: &[PatchSample],
    cfg: &ALConfig,
) -> Result<RunHistory, TrainError> {
    if matches!(cfg.acquisition, Acquisition::MaxVariance) && model.as_bayes().is_none() {
        return Err(TrainError::NotBayesian);
    }
    let train_cfg = TrainConfig {
        epochs: cfg.retrain_epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
        loss: match model {
            Model::Deterministic(_) => LossKind::MseRoi,
            Model::Bayesian(_) => LossKind::Elbo,
        },
        rotations: 0,
        thresholds: cfg.thresholds.clone(),
        primary_threshold: cfg.primary_threshold,
        keep_best: false,
        ..TrainConfig::default()
    };
    let primary_idx = cfg
        .thresholds
        .iter()
        .position(|&t| (t - cfg.primary_threshold).abs() < 1e-12)
        .unwrap_or(0);

    let mut labeled: Vec<PatchSample> = initial_labeled.to_vec();
    let mut remaining: Vec<PatchSample> = pool.to_vec();
    let total = labeled.len() + remaining.len();
    let mut history = RunHistory { thresholds: cfg.thresholds.clone(), ..Default::default() };

    let mut iteration = 0usize;
    let mut train_cfg_iter = train_cfg.clone();
    train_cfg_iter.seed = splitmix_seed(cfg.seed, iteration as u64);
    let h = train(model, &labeled, val_set, &train_cfg_iter)?;
    record_al(&mut history, model, val_set, iteration, labeled.len(), &h, &cfg.thresholds)?;
    debug_assert_eq!(labeled.len() + remaining.len(), total);

    while !remaining.is_empty() {
        iteration += 1;
        let take = cfg.query_rate.min(remaining.len());
        let chosen: Vec<usize> = match cfg.acquisition {
            Acquisition::MaxVariance => {
                let bayes = model.as_bayes().ok_or(TrainError::NotBayesian)?;
                let rank = acquisition_rank(
                    bayes,
                    &remaining,
                    cfg.t_passes,
                    splitmix_seed(cfg.seed, 1000 + iteration as u64),
                )?;
                rank[..take].to_vec()
            }
            Acquisition::Random => {
                let mut r = rng::keyed_rng(cfg.seed, streams::SHUFFLE, 5000 + iteration as u64);
                let order = rng::shuffled_indices(remaining.len(), &mut r);
                order[..take].to_vec()
            }
        };
        // Move the chosen samples to the labeled set (descending index drain
        // keeps the remaining order stable for determinism).
        let mut sorted = chosen.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        for i in sorted {
            labeled.push(remaining.swap_remove(i));
        }
        debug_assert_eq!(labeled.len() + remaining.len(), total);

        let mut cfg_iter = train_cfg.clone();
        cfg_iter.seed = splitmix_seed(cfg.seed, iteration as u64);
        let h = train(model, &labeled, val_set, &cfg_iter)?;
        record_al(&mut history, model, val_set, iteration, labeled.len(), &h, &cfg.thresholds)?;

        if cfg.use_plateau && history.al.len() >= 3 {
            let n = history.al.len();
            let a2 = history.al[n - 1].accuracy[primary_idx];
            let a1 = history.al[n - 2].accuracy[primary_idx];
            let a0 = history.al[n - 3].accuracy[primary_idx];
            if a2 - a1 < cfg.plateau_delta && a1 - a0 < cfg.plateau_delta {
                break;
            }
        }
    }
    Ok(history)
}

fn record_al<T: Real>(
    history: &mut RunHistory,
    model: &Model<T>,
    val_set: &[PatchSample],
    iteration: usize,
    labeled: usize,
    train_history: &RunHistory,
    thresholds: &[f64],
) -> Result<(), TrainError> {
    let pairs = roi_max_pairs(model, val_set)?;
    let curve = accuracy_curve(&pairs, thresholds);
    history.al.push(AlRecord {
        iteration,
        labeled,
        accuracy: curve.iter().map(|(_, o)| o.accuracy).collect(),
        train_loss: train_history.epochs.last().map_or(0.0, |e| e.train_loss),
    });
    Ok(())
}

fn splitmix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9e3779b97f4a7c15)).wrapping_add(0x243f6a8885a308d3);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Everything the patch pipeline needs from one FE solve of a structure.
pub struct FieldBundle {
    /// Fine grid padded by the ROI offset.
    pub grid: GridSpec,
    pub macro_stress: FieldImage,
    pub geometry: BinaryImage,
    pub micro_tresca: FieldImage,
}

/// Mesh defaults per family: fine spacing R/3; the linear families carry a
/// buffer annulus (factor 3) and a fine margin covering the patch padding.
pub fn default_mesh_params(structure: &Structure) -> MeshParams {
    let r = structure.spec.micro_radius;
    match structure.spec.family {
        Family::ClampedStrip => MeshParams { h: r / 3.0, buffer_factor: 1.0, fine_margin: 0.0, refine_levels: 1 },
        _ => MeshParams { h: r / 3.0, buffer_factor: 3.0, fine_margin: 5.0 * r, refine_levels: 1 },
    }
}

pub fn theory_for(structure: &Structure) -> Theory {
    match structure.spec.family {
        Family::ClampedStrip => Theory::FiniteStrain,
        _ => Theory::Linear,
    }
}

pub const FINITE_STRAIN_STEPS: usize = 10;

/// Runs the macroscale (pore-free) and microscale FE models and rasterises
/// the patch-pipeline images on the padded grid.
pub fn fe_images(
    structure: &Structure,
    bc: &BoundaryCondition,
    theory: Theory,
    mesh_params: Option<MeshParams>,
) -> Result<FieldBundle, TrainError> {
    let params = mesh_params.unwrap_or_else(|| default_mesh_params(structure));
    let grid = GridSpec::covering(structure).padded(PatchGeometry::default().roi_offset());
    let mat = fem::Material::default();

    let solve = |s: &Structure| -> Result<(fem::TriMesh, fem::StressField), TrainError> {
        let mesh = fem::build_mesh_with(s, &params)?;
        let (u, stress) = match (theory, bc) {
            (Theory::Linear, _) => {
                let u = fem::solve_linear(&mesh, &mat, bc)?;
                let s = fem::element_stress(&mesh, &u, &mat, Theory::Linear)?;
                (u, s)
            }
            (Theory::FiniteStrain, BoundaryCondition::Strip(sb)) => {
                let (u, _) = fem::solve_finite_strain(&mesh, &mat, sb, FINITE_STRAIN_STEPS)?;
                let s = fem::element_stress(&mesh, &u, &mat, Theory::FiniteStrain)?;
                (u, s)
            }
            (Theory::FiniteStrain, _) => {
                return Err(TrainError::Fem(FemError::Validation(
                    "finite strain requires a strip boundary condition".into(),
                )))
            }
        };
        let _ = u;
        Ok((mesh, stress))
    };

    let (micro_mesh, micro_stress) = solve(structure)?;
    let macro_structure = structure.macro_model();
    let (macro_mesh, macro_stress) = solve(&macro_structure)?;

    let (macro_img, _macro_mask) = fields::rasterize_stress(&macro_mesh, &macro_stress, &grid);
    let (micro_img, micro_mask) = fields::rasterize_stress(&micro_mesh, &micro_stress, &grid);
    let micro_tresca = fields::tresca_image(&micro_img);

    Ok(FieldBundle { grid, macro_stress: macro_img, geometry: micro_mask, micro_tresca })
}

/// Full-structure evaluation report.
pub struct FullFieldReport {
    pub grid: GridSpec,
    pub truth: FieldImage,
    pub reconstruction: FieldImage,
    pub abs_error: FieldImage,
    pub max_truth: f64,
    pub max_prediction: f64,
    pub max_value_rel_error: f64,
    pub mean_abs_error: f64,
    pub rmse: f64,
    pub max_abs_error: f64,
}

/// Reconstructs the full micro-Tresca field from per-patch predictions and
/// reports errors against the FE truth over the valid interior.
pub fn evaluate_full_structure<T: Real>(
    model: &Model<T>,
    structure: &Structure,
    bc: &BoundaryCondition,
    theory: Theory,
) -> Result<FullFieldReport, TrainError> {
    let bundle = fe_images(structure, bc, theory, None)?;
    evaluate_on_bundle(model, &bundle)
}

pub fn evaluate_on_bundle<T: Real>(
    model: &Model<T>,
    bundle: &FieldBundle,
) -> Result<FullFieldReport, TrainError> {
    let geom = PatchGeometry::default();
    let grid = bundle.grid;
    let windows = patchset::tile_for_reconstruction(&grid, geom)?;
    let p = geom.patch_px;
    let n_px = p * p;
    let mut predictions: Vec<Vec<f64>> = Vec::with_capacity(windows.len());
    for win in &windows {
        // Cut the raw patch at this window and scale it like extraction does.
        let (x0, y0) = win.patch;
        let mut stress = [vec![0.0; n_px], vec![0.0; n_px], vec![0.0; n_px]];
        let mut geo = vec![0.0; n_px];
        for yy in 0..p {
            for xx in 0..p {
                let i = yy * p + xx;
                for c in 0..3 {
                    stress[c][i] = bundle.macro_stress.at(c, x0 + xx, y0 + yy);
                }
                geo[i] = bundle.geometry.at(x0 + xx, y0 + yy) as f64;
            }
        }
        let zeros = vec![0.0; n_px];
        match patchset::scale_patch(
            [&stress[0], &stress[1], &stress[2]],
            &geo,
            &zeros,
            geom,
            Provenance { structure_id: 0, window: (x0 as i64, y0 as i64) },
        ) {
            Ok(sample) => {
                let pred = model.predict_scaled_rois(&[&sample])?;
                predictions.push(patchset::unscale_prediction(&pred[0], sample.s_out));
            }
            Err(PatchError::ZeroStressPatch) => {
                predictions.push(vec![0.0; geom.roi_px * geom.roi_px]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let reconstruction = patchset::reconstruct(&predictions, &windows, &grid, geom)?;

    let off = geom.roi_offset();
    let mut abs_error = FieldImage::zeros(grid, 1);
    let mut max_truth = 0.0f64;
    let mut max_pred = 0.0f64;
    let mut sum_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut count = 0usize;
    for yy in off..grid.ny - off {
        for xx in off..grid.nx - off {
            if bundle.geometry.at(xx, yy) == 0 {
                continue;
            }
            let t = bundle.micro_tresca.at(0, xx, yy);
            let r = reconstruction.at(0, xx, yy);
            let e = (t - r).abs();
            abs_error.set(0, xx, yy, e);
            max_truth = max_truth.max(t);
            max_pred = max_pred.max(r);
            sum_abs += e;
            sum_sq += e * e;
            max_abs = max_abs.max(e);
            count += 1;
        }
    }
    let count = count.max(1);
    Ok(FullFieldReport {
        grid,
        truth: bundle.micro_tresca.clone(),
        reconstruction,
        abs_error,
        max_truth,
        max_prediction: max_pred,
        max_value_rel_error: if max_truth > 0.0 { (max_pred - max_truth).abs() / max_truth } else { 0.0 },
        mean_abs_error: sum_abs / count as f64,
        rmse: (sum_sq / count as f64).sqrt(),
        max_abs_error: max_abs,
    })
}
