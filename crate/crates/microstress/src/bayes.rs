//! Bayes-by-Backprop variational layers over the surrogate network:
//! factorised Gaussian posteriors via the reparameterisation trick, one
//! shared learnable Gaussian prior per layer (empirical Bayes), the
//! KL-plus-likelihood objective, and Monte-Carlo predictive statistics.

use std::collections::BTreeMap;
use std::path::Path;

use crate::net::{load_named_arrays, save_named_arrays, Mode, NetError, Network, NetworkConfig};
use crate::rng::{self, streams, NormalSource};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{softplus, Real, RoiRect, Tensor4, TensorError};

/// rho giving sigma about 6.7e-3 at initialisation.
pub const RHO_INIT: f64 = -5.0;
/// rho whose softplus is numerically zero; deterministic checkpoints load
/// with this spread.
pub const RHO_NEAR_ZERO: f64 = -40.0;

/// softplus^-1(1): prior spread initialised to N(0, 1).
fn rho_for_unit_sigma() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Closed-form KL between two univariate Gaussians.
pub fn kl_gaussians_scalar(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln()
        + (sigma_q * sigma_q + (mu_q - mu_p) * (mu_q - mu_p)) / (2.0 * sigma_p * sigma_p)
        - 0.5
}

#[derive(Clone, Copy, Debug)]
enum TrainSlot {
    Mu,
    Rho,
    BnAffine { param_idx: usize },
    PriorMu,
    PriorRho,
}

/// Variational wrapper around [`Network`]: conv/dense weights and biases
/// carry (mu, rho) posteriors, batch-norm affine parameters stay
/// deterministic, and every layer owns one scalar prior.
pub struct BayesNet<T: Real> {
    /// Architecture, BN running statistics, and the scratch buffer that
    /// materialised weights are written into.
    pub net: Network<T>,
    /// All trainable tensors: mu and rho per weight slot, BN affine, then
    /// prior scalars per layer.
    pub train_params: Vec<Tensor4<T>>,
    slots: Vec<TrainSlot>,
    /// net.params indices that are variational.
    weight_slots: Vec<usize>,
    /// Layer id per weight slot (weight and bias of a layer share a prior).
    slot_layer: Vec<usize>,
    pub n_layers: usize,
    pub prior_trainable: bool,
    /// Reduction mode: sigma pinned to exactly zero, weights are mu bitwise.
    pub pinned_sigma_zero: bool,
}

/// Per-pixel Monte-Carlo predictive statistics over T weight draws.
pub struct PredictiveResult {
    pub mean: Tensor4<f64>,
    /// Unbiased sample variance.
    pub variance: Tensor4<f64>,
    pub t: usize,
}

impl<T: Real> BayesNet<T> {
    pub fn build(cfg: NetworkConfig, seed: u64, prior_trainable: bool) -> Result<Self, NetError> {
        let net = Network::build(cfg, seed)?;
        Ok(Self::wrap(net, RHO_INIT, prior_trainable))
    }

    /// Wraps a deterministic network: mu := its weights, rho := `rho_init`.
    pub fn wrap(net: Network<T>, rho_init: f64, prior_trainable: bool) -> Self {
        let weight_slots: Vec<usize> =
            (0..net.params.len()).filter(|&i| net.is_weight[i]).collect();
        let n_layers = net.layers.len();
        let mut slot_layer = vec![0usize; weight_slots.len()];
        for (l, group) in net.layers.iter().enumerate() {
            for &p in &group.params {
                if let Some(s) = weight_slots.iter().position(|&w| w == p) {
                    slot_layer[s] = l;
                }
            }
        }
        let mut train_params = Vec::new();
        let mut slots = Vec::new();
        for &p in &weight_slots {
            train_params.push(net.params[p].clone());
            slots.push(TrainSlot::Mu);
        }
        for &p in &weight_slots {
            let t = &net.params[p];
            train_params.push(Tensor4::from_vec(
                t.n,
                t.c,
                t.h,
                t.w,
                vec![T::from_f64(rho_init); t.len()],
            ));
            slots.push(TrainSlot::Rho);
        }
        for i in 0..net.params.len() {
            if !net.is_weight[i] {
                train_params.push(net.params[i].clone());
                slots.push(TrainSlot::BnAffine { param_idx: i });
            }
        }
        for _ in 0..n_layers {
            train_params.push(Tensor4::scalar(T::ZERO));
            slots.push(TrainSlot::PriorMu);
        }
        for _ in 0..n_layers {
            train_params.push(Tensor4::scalar(T::from_f64(rho_for_unit_sigma())));
            slots.push(TrainSlot::PriorRho);
        }
        Self {
            net,
            train_params,
            slots,
            weight_slots,
            slot_layer,
            n_layers,
            prior_trainable,
            pinned_sigma_zero: false,
        }
    }

    pub fn n_weight_slots(&self) -> usize {
        self.weight_slots.len()
    }

    fn mu_index(&self, slot: usize) -> usize {
        slot
    }

    fn rho_index(&self, slot: usize) -> usize {
        self.weight_slots.len() + slot
    }

    fn bn_base(&self) -> usize {
        2 * self.weight_slots.len()
    }

    fn n_bn(&self) -> usize {
        self.net.params.len() - self.weight_slots.len()
    }

    fn prior_mu_index(&self, layer: usize) -> usize {
        self.bn_base() + self.n_bn() + layer
    }

    fn prior_rho_index(&self, layer: usize) -> usize {
        self.bn_base() + self.n_bn() + self.n_layers + layer
    }

    pub fn mu(&self, slot: usize) -> &Tensor4<T> {
        &self.train_params[self.mu_index(slot)]
    }

    pub fn rho(&self, slot: usize) -> &Tensor4<T> {
        &self.train_params[self.rho_index(slot)]
    }

    pub fn prior(&self, layer: usize) -> (f64, f64) {
        (
            self.train_params[self.prior_mu_index(layer)].item(),
            self.train_params[self.prior_rho_index(layer)].item(),
        )
    }

    /// Draws per-slot noise for one forward pass (one draw per layer
    /// parameter, shared by the whole batch).
    pub fn draw_noise(&self, seed: u64, pass: u64) -> Vec<Tensor4<T>> {
        let mut src = NormalSource::new(rng::keyed_rng(seed, streams::BAYES_NOISE, pass));
        self.weight_slots
            .iter()
            .map(|&p| {
                let t = &self.net.params[p];
                let mut buf = vec![0.0f64; t.len()];
                src.fill(&mut buf);
                Tensor4::from_vec(
                    t.n,
                    t.c,
                    t.h,
                    t.w,
                    buf.into_iter().map(T::from_f64).collect(),
                )
            })
            .collect()
    }

    /// Materialises sampled weights into a parameter buffer:
    /// w = mu + softplus(rho) * eps, or exactly mu when sigma is pinned.
    pub fn materialize(&self, noise: &[Tensor4<T>]) -> Vec<Tensor4<T>> {
        if self.pinned_sigma_zero {
            return self.materialize_map();
        }
        let mut params = self.map_buffer();
        for (s, &p) in self.weight_slots.iter().enumerate() {
            let rho = self.rho(s);
            let eps = &noise[s];
            let w = &mut params[p];
            for k in 0..w.len() {
                let sigma = T::from_f64(softplus(rho.data[k].to_f64()));
                w.data[k] = w.data[k] + sigma * eps.data[k];
            }
        }
        params
    }

    /// Parameter buffer at the posterior mode: weights are mu exactly.
    pub fn materialize_map(&self) -> Vec<Tensor4<T>> {
        self.map_buffer()
    }

    fn map_buffer(&self) -> Vec<Tensor4<T>> {
        let mut params = self.net.params.clone();
        for (i, slot) in self.slots.iter().enumerate() {
            if let TrainSlot::BnAffine { param_idx } = slot {
                params[*param_idx] = self.train_params[i].clone();
            }
        }
        for (s, &p) in self.weight_slots.iter().enumerate() {
            params[p] = self.mu(s).clone();
        }
        params
    }

    /// Builds the stochastic forward + ELBO graph for one minibatch.
    /// loss = mse_roi + (1/minibatch_count) * sum of per-layer KL terms.
    pub fn build_elbo(
        &mut self,
        tape: &mut Tape<T>,
        x: Tensor4<T>,
        target: Tensor4<T>,
        roi: RoiRect,
        minibatch_count: usize,
        noise: &[Tensor4<T>],
        mode: Mode,
    ) -> Result<ElboGraph, TensorError> {
        assert_eq!(noise.len(), self.weight_slots.len());
        let train_ids: Vec<NodeId> =
            self.train_params.iter().map(|t| tape.param(t.clone())).collect();

        let mut param_nodes: Vec<NodeId> = vec![NodeId(0); self.net.params.len()];
        for (i, slot) in self.slots.iter().enumerate() {
            if let TrainSlot::BnAffine { param_idx } = slot {
                param_nodes[*param_idx] = train_ids[i];
            }
        }
        for (s, &p) in self.weight_slots.iter().enumerate() {
            let mu_id = train_ids[self.mu_index(s)];
            if self.pinned_sigma_zero {
                param_nodes[p] = mu_id;
            } else {
                let rho_id = train_ids[self.rho_index(s)];
                param_nodes[p] = tape.reparam(mu_id, rho_id, noise[s].clone())?;
            }
        }

        let x_id = tape.input(x);
        let pred = self.net.forward_graph(tape, x_id, &param_nodes, mode)?;
        let mse = tape.mse_roi(pred, target, roi)?;

        let mut kl_sum: Option<NodeId> = None;
        for (s, _) in self.weight_slots.iter().enumerate() {
            let layer = self.slot_layer[s];
            let kl = tape.kl_shared_prior(
                train_ids[self.mu_index(s)],
                train_ids[self.rho_index(s)],
                train_ids[self.prior_mu_index(layer)],
                train_ids[self.prior_rho_index(layer)],
            )?;
            kl_sum = Some(match kl_sum {
                None => kl,
                Some(prev) => tape.add(prev, kl)?,
            });
        }
        let kl_sum = kl_sum.expect("network has variational layers");
        let kl_scaled = tape.scale(kl_sum, 1.0 / minibatch_count as f64);
        let loss = tape.add(mse, kl_scaled)?;
        Ok(ElboGraph { loss, mse, kl: kl_sum, pred, train_ids })
    }

    /// Applies one Adam update from an ELBO backward pass; prior gradients
    /// are dropped when the prior is frozen.
    pub fn apply_grads(
        &mut self,
        adam: &mut AdamState<T>,
        graph: &ElboGraph,
        tape: &Tape<T>,
    ) -> Result<(), TensorError> {
        let mut grads_out: Vec<Option<Tensor4<T>>> = vec![None; self.train_params.len()];
        let mut grads = tape.backward(graph.loss)?;
        for (i, id) in graph.train_ids.iter().enumerate() {
            let g = grads.take(*id);
            let frozen_prior = !self.prior_trainable
                && matches!(self.slots[i], TrainSlot::PriorMu | TrainSlot::PriorRho);
            if !frozen_prior {
                grads_out[i] = g;
            }
        }
        adam.step(&mut self.train_params, &grads_out);
        Ok(())
    }

    pub fn new_adam(&self, cfg: AdamConfig) -> AdamState<T> {
        AdamState::new(cfg, &self.train_params)
    }

    /// Monte-Carlo predictive mean and unbiased variance over `t` stochastic
    /// passes with frozen BN statistics; pass-index noise streams keep the
    /// reduction deterministic.
    pub fn predictive(
        &self,
        x: &Tensor4<T>,
        t: usize,
        seed: u64,
    ) -> Result<PredictiveResult, TensorError> {
        assert!(t >= 2, "predictive sampling needs at least 2 passes");
        let outputs: Vec<Tensor4<T>> = (0..t)
            .map(|pass| {
                let noise = self.draw_noise(seed, pass as u64);
                let params = self.materialize(&noise);
                self.net.forward_infer_with(&params, x)
            })
            .collect::<Result<_, _>>()?;
        let n = outputs[0].len();
        let mut mean = vec![0.0f64; n];
        for out in &outputs {
            for (m, v) in mean.iter_mut().zip(&out.data) {
                *m += v.to_f64();
            }
        }
        for m in &mut mean {
            *m /= t as f64;
        }
        let mut var = vec![0.0f64; n];
        for out in &outputs {
            for ((v, m), o) in var.iter_mut().zip(&mean).zip(&out.data) {
                let d = o.to_f64() - *m;
                *v += d * d;
            }
        }
        for v in &mut var {
            *v /= (t - 1) as f64;
        }
        let o0 = &outputs[0];
        Ok(PredictiveResult {
            mean: Tensor4::from_vec(o0.n, o0.c, o0.h, o0.w, mean),
            variance: Tensor4::from_vec(o0.n, o0.c, o0.h, o0.w, var),
            t,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        let mut arrays: Vec<(String, Tensor4<T>)> = Vec::new();
        for (s, &p) in self.weight_slots.iter().enumerate() {
            let name = &self.net.names[p];
            arrays.push((format!("bayes.{name}.mu"), self.mu(s).clone()));
            arrays.push((format!("bayes.{name}.rho"), self.rho(s).clone()));
        }
        for (i, slot) in self.slots.iter().enumerate() {
            if let TrainSlot::BnAffine { param_idx } = slot {
                arrays.push((self.net.names[*param_idx].clone(), self.train_params[i].clone()));
            }
        }
        for l in 0..self.n_layers {
            arrays.push((
                format!("bayes.layer{l}.prior_mu"),
                self.train_params[self.prior_mu_index(l)].clone(),
            ));
            arrays.push((
                format!("bayes.layer{l}.prior_rho"),
                self.train_params[self.prior_rho_index(l)].clone(),
            ));
        }
        for (i, s) in self.net.bn_state.iter().enumerate() {
            arrays.push((
                format!("bn_state{i}.mean"),
                Tensor4::from_vec(1, s.mean.len(), 1, 1, s.mean.clone()),
            ));
            arrays.push((
                format!("bn_state{i}.var"),
                Tensor4::from_vec(1, s.var.len(), 1, 1, s.var.clone()),
            ));
        }
        save_named_arrays(dir, &arrays, &self.net.cfg)
    }

    pub fn load(dir: &Path, prior_trainable: bool) -> Result<Self, NetError> {
        let (cfg, arrays) = load_named_arrays::<T>(dir)?;
        let net = Network::build(cfg, 0)?;
        let mut bn = Self::wrap(net, RHO_INIT, prior_trainable);
        bn.restore(&arrays)?;
        Ok(bn)
    }

    /// Loads a deterministic checkpoint as mu with near-zero sigma.
    pub fn load_from_deterministic(dir: &Path, prior_trainable: bool) -> Result<Self, NetError> {
        let net = Network::<T>::load(dir)?;
        Ok(Self::wrap(net, RHO_NEAR_ZERO, prior_trainable))
    }

    fn restore(&mut self, arrays: &BTreeMap<String, Tensor4<T>>) -> Result<(), NetError> {
        for (s, &p) in self.weight_slots.iter().enumerate() {
            let name = &self.net.names[p];
            let mu = arrays
                .get(&format!("bayes.{name}.mu"))
                .ok_or_else(|| NetError::CheckpointArray(format!("bayes.{name}.mu")))?;
            let rho = arrays
                .get(&format!("bayes.{name}.rho"))
                .ok_or_else(|| NetError::CheckpointArray(format!("bayes.{name}.rho")))?;
            let (mi, ri) = (self.mu_index(s), self.rho_index(s));
            self.train_params[mi] = mu.clone();
            self.train_params[ri] = rho.clone();
        }
        for i in 0..self.train_params.len() {
            if let TrainSlot::BnAffine { param_idx } = self.slots[i] {
                let name = self.net.names[param_idx].clone();
                let t = arrays
                    .get(&name)
                    .ok_or_else(|| NetError::CheckpointArray(name.clone()))?;
                self.train_params[i] = t.clone();
            }
        }
        for l in 0..self.n_layers {
            let (mi, ri) = (self.prior_mu_index(l), self.prior_rho_index(l));
            if let Some(t) = arrays.get(&format!("bayes.layer{l}.prior_mu")) {
                self.train_params[mi] = t.clone();
            }
            if let Some(t) = arrays.get(&format!("bayes.layer{l}.prior_rho")) {
                self.train_params[ri] = t.clone();
            }
        }
        for (i, s) in self.net.bn_state.iter_mut().enumerate() {
            if let (Some(m), Some(v)) = (
                arrays.get(&format!("bn_state{i}.mean")),
                arrays.get(&format!("bn_state{i}.var")),
            ) {
                s.mean = m.data.clone();
                s.var = v.data.clone();
            }
        }
        Ok(())
    }
}

/// Node handles of one ELBO construction.
pub struct ElboGraph {
    pub loss: NodeId,
    pub mse: NodeId,
    pub kl: NodeId,
    pub pred: NodeId,
    pub train_ids: Vec<NodeId>,
}

/// mean +- z * std at the given level; the conventional z = 1.96 at 95%.
pub fn credible_interval(pr: &PredictiveResult, level: f64) -> (Tensor4<f64>, Tensor4<f64>) {
    assert!(level > 0.0 && level < 1.0, "level in (0, 1)");
    let z = z_for_level(level);
    let mut lower = pr.mean.clone();
    let mut upper = pr.mean.clone();
    for i in 0..pr.mean.len() {
        let half = z * pr.variance.data[i].max(0.0).sqrt();
        lower.data[i] -= half;
        upper.data[i] += half;
    }
    (lower, upper)
}

pub fn z_for_level(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-12 {
        return 1.96;
    }
    inverse_normal_cdf(0.5 + 0.5 * level)
}

/// Acklam's rational approximation of the standard normal quantile.
fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inverse_normal_cdf(1.0 - p)
    }
}

/// Max predictive variance over the ROI (channel 0 of a one-image batch).
pub fn uncertainty_score(pr: &PredictiveResult, roi: RoiRect) -> Result<f64, TensorError> {
    if roi.area() == 0 {
        return Err(TensorError::EmptyMask);
    }
    let mut best = f64::MIN;
    for y in roi.y0..roi.y1 {
        for x in roi.x0..roi.x1 {
            best = best.max(pr.variance.at(0, 0, y, x));
        }
    }
    Ok(best)
}
