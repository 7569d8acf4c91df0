//! Define-by-run reverse-mode tape. Operations append nodes; `backward`
//! walks the record in exact reverse creation order, accumulating gradients
//! additively at fan-out.

use super::ops::{self, BnSaved, ConvSpec};
use super::{sigmoid_f64, softplus, Real, RoiRect, Tensor4, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op<T: Real> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec, col: Vec<T> },
    ConvT2d { x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, saved: BnSaved<T> },
    BnInfer { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, var: Vec<T> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: T },
    ChannelScale { x: NodeId, s: NodeId },
    GlobalAvgPool { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    MseRoi { pred: NodeId, target: Tensor4<T>, roi: RoiRect },
    Reparam { mu: NodeId, rho: NodeId, noise: Tensor4<T> },
    KlSharedPrior { mu: NodeId, rho: NodeId, prior_mu: NodeId, prior_rho: NodeId },
}

struct Node<T: Real> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor4<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    ) -> Result<NodeId, TensorError> {
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let (y, col) =
            ops::conv2d_forward_cols(self.value(x), self.value(w), self.value(b), spec)?;
        // Keep the columns only when a backward pass will need them.
        let col = if rg { col } else { Vec::new() };
        Ok(self.push(y, Op::Conv2d { x, w, b, spec, col }, rg))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
        out_hw: (usize, usize),
    ) -> Result<NodeId, TensorError> {
        let y =
            ops::conv2d_transpose_forward(self.value(x), self.value(w), self.value(b), spec, out_hw)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::ConvT2d { x, w, b, spec }, rg))
    }

    /// Train-mode batch norm; updates the running statistics in place.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [T],
        running_var: &mut [T],
    ) -> Result<NodeId, TensorError> {
        let (y, saved) = ops::batchnorm_train(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, Op::BnTrain { x, gamma, beta, saved }, rg))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<NodeId, TensorError> {
        let y = ops::batchnorm_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            Op::BnInfer { x, gamma, beta, mean: running_mean.to_vec(), var: running_var.to_vec() },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::relu(self.value(x));
        let rg = self.needs(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = ops::sigmoid(self.value(x));
        let rg = self.needs(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let y = ops::softplus_t(self.value(x));
        let rg = self.needs(x);
        self.push(y, Op::Softplus { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        for (v, &u) in y.data.iter_mut().zip(&self.value(b).data) {
            *v += u;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(TensorError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        for (v, &u) in y.data.iter_mut().zip(&self.value(b).data) {
            *v = *v * u;
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kt = T::from_f64(k);
        let y = self.value(x).map(|v| v * kt);
        let rg = self.needs(x);
        self.push(y, Op::Scale { x, k: kt }, rg)
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let y = ops::channel_scale(self.value(x), self.value(s))?;
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(y, Op::ChannelScale { x, s }, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = ops::global_avg_pool(self.value(x));
        let rg = self.needs(x);
        self.push(y, Op::GlobalAvgPool { x }, rg)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Dense { x, w, b }, rg))
    }

    pub fn mse_roi(
        &mut self,
        pred: NodeId,
        target: Tensor4<T>,
        roi: RoiRect,
    ) -> Result<NodeId, TensorError> {
        let v = ops::mse_roi(self.value(pred), &target, roi)?;
        let rg = self.needs(pred);
        Ok(self.push(Tensor4::scalar(v), Op::MseRoi { pred, target, roi }, rg))
    }

    /// w = mu + softplus(rho) * noise, differentiable in (mu, rho) with the
    /// noise draw held fixed.
    pub fn reparam(
        &mut self,
        mu: NodeId,
        rho: NodeId,
        noise: Tensor4<T>,
    ) -> Result<NodeId, TensorError> {
        let m = self.value(mu);
        let r = self.value(rho);
        if !m.same_shape(r) || !m.same_shape(&noise) {
            return Err(TensorError::ShapeMismatch("reparam: mu/rho/noise shapes".into()));
        }
        let mut y = m.clone();
        for i in 0..y.data.len() {
            let sigma = T::from_f64(softplus(r.data[i].to_f64()));
            y.data[i] = m.data[i] + sigma * noise.data[i];
        }
        let rg = self.needs(mu) || self.needs(rho);
        Ok(self.push(y, Op::Reparam { mu, rho, noise }, rg))
    }

    /// Closed-form KL between the factorised Gaussian q = N(mu, softplus(rho)^2)
    /// and a shared scalar prior N(prior_mu, softplus(prior_rho)^2), summed
    /// over all weights of the layer.
    pub fn kl_shared_prior(
        &mut self,
        mu: NodeId,
        rho: NodeId,
        prior_mu: NodeId,
        prior_rho: NodeId,
    ) -> Result<NodeId, TensorError> {
        if !self.value(mu).same_shape(self.value(rho)) {
            return Err(TensorError::ShapeMismatch("kl: mu/rho shapes".into()));
        }
        if self.value(prior_mu).len() != 1 || self.value(prior_rho).len() != 1 {
            return Err(TensorError::ShapeMismatch("kl: prior parameters must be scalars".into()));
        }
        let mp = self.value(prior_mu).data[0].to_f64();
        let sp = softplus(self.value(prior_rho).data[0].to_f64());
        let mut acc = 0.0f64;
        {
            let m = self.value(mu);
            let r = self.value(rho);
            for i in 0..m.data.len() {
                let mq = m.data[i].to_f64();
                let sq = softplus(r.data[i].to_f64());
                acc += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
            }
        }
        let rg = self.needs(mu) || self.needs(rho) || self.needs(prior_mu) || self.needs(prior_rho);
        Ok(self.push(
            Tensor4::scalar(T::from_f64(acc)),
            Op::KlSharedPrior { mu, rho, prior_mu, prior_rho },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// fan-out contributions accumulate additively.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::ShapeMismatch("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = grads[i].take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, spec, col } => {
                    let g = ops::conv2d_backward_with(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *spec,
                        self.needs(*x),
                        if col.is_empty() { None } else { Some(col) },
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, g.dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.db);
                    }
                }
                Op::ConvT2d { x, w, b, spec } => {
                    let g = ops::conv2d_transpose_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *spec,
                        self.needs(*x),
                    );
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, g.dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.db);
                    }
                }
                Op::BnTrain { x, gamma, beta, saved } => {
                    let (dx, dg, db) =
                        ops::batchnorm_train_backward(self.value(*x), self.value(*gamma), saved, &dy);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, db);
                    }
                }
                Op::BnInfer { x, gamma, beta, mean, var } => {
                    let (dx, dg, db) = ops::batchnorm_infer_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        &dy,
                    );
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, db);
                    }
                }
                Op::Relu { x } => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &dy));
                }
                Op::Sigmoid { x } => {
                    accumulate(&mut grads, *x, ops::sigmoid_backward(&self.nodes[i].value, &dy));
                }
                Op::Softplus { x } => {
                    accumulate(&mut grads, *x, ops::softplus_backward(self.value(*x), &dy));
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.clone());
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let mut da = dy.clone();
                        for (v, &u) in da.data.iter_mut().zip(&self.value(*b).data) {
                            *v = *v * u;
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = dy.clone();
                        for (v, &u) in db.data.iter_mut().zip(&self.value(*a).data) {
                            *v = *v * u;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    accumulate(&mut grads, *x, dy.map(|v| v * k));
                }
                Op::ChannelScale { x, s } => {
                    let (dx, ds) = ops::channel_scale_backward(self.value(*x), self.value(*s), &dy);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*s) {
                        accumulate(&mut grads, *s, ds);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    accumulate(&mut grads, *x, ops::global_avg_pool_backward(self.value(*x), &dy));
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &dy);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MseRoi { pred, target, roi } => {
                    let dp = ops::mse_roi_backward(self.value(*pred), target, *roi, dy.data[0]);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Reparam { mu, rho, noise } => {
                    if self.needs(*mu) {
                        accumulate(&mut grads, *mu, dy.clone());
                    }
                    if self.needs(*rho) {
                        let r = self.value(*rho);
                        let mut dr = dy.clone();
                        for k in 0..dr.data.len() {
                            let gate = sigmoid_f64(r.data[k].to_f64());
                            dr.data[k] = dr.data[k] * noise.data[k] * T::from_f64(gate);
                        }
                        accumulate(&mut grads, *rho, dr);
                    }
                }
                Op::KlSharedPrior { mu, rho, prior_mu, prior_rho } => {
                    let g = dy.data[0].to_f64();
                    let m = self.value(*mu);
                    let r = self.value(*rho);
                    let mp = self.value(*prior_mu).data[0].to_f64();
                    let rp = self.value(*prior_rho).data[0].to_f64();
                    let sp = softplus(rp);
                    let sp2 = sp * sp;
                    let mut dmu = Tensor4::zeros(m.n, m.c, m.h, m.w);
                    let mut drho = Tensor4::zeros(m.n, m.c, m.h, m.w);
                    let mut dmp = 0.0;
                    let mut dsp = 0.0;
                    for k in 0..m.data.len() {
                        let mq = m.data[k].to_f64();
                        let rq = r.data[k].to_f64();
                        let sq = softplus(rq);
                        dmu.data[k] = T::from_f64(g * (mq - mp) / sp2);
                        drho.data[k] =
                            T::from_f64(g * (-1.0 / sq + sq / sp2) * sigmoid_f64(rq));
                        dmp += g * (mp - mq) / sp2;
                        dsp += g * (1.0 / sp - (sq * sq + (mq - mp) * (mq - mp)) / (sp2 * sp));
                    }
                    if self.needs(*mu) {
                        accumulate(&mut grads, *mu, dmu);
                    }
                    if self.needs(*rho) {
                        accumulate(&mut grads, *rho, drho);
                    }
                    if self.needs(*prior_mu) {
                        accumulate(&mut grads, *prior_mu, Tensor4::scalar(T::from_f64(dmp)));
                    }
                    if self.needs(*prior_rho) {
                        let d = dsp * sigmoid_f64(rp);
                        accumulate(&mut grads, *prior_rho, Tensor4::scalar(T::from_f64(d)));
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor4<T>>], id: NodeId, delta: Tensor4<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert!(g.same_shape(&delta));
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
