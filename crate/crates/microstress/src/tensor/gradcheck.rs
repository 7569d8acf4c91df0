//! Central finite-difference verification of reverse-mode gradients.
//!
//! 64-bit only; the caller supplies a graph builder that maps parameter
//! leaves to a scalar loss.

use super::tape::{NodeId, Tape};
use super::Tensor4;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst relative error between reverse-mode and central finite differences
/// over every element of every parameter.
///
/// `build` must construct the same graph for identical parameter values
/// (stochastic pieces must be frozen by the caller).
pub fn grad_check<F>(params: &[Tensor4<f64>], eps: f64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |values: &[Tensor4<f64>]| -> (f64, Vec<Option<Tensor4<f64>>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let mut grads = tape.backward(loss).expect("backward");
        let gs = ids.iter().map(|&id| grads.take(id)).collect();
        (tape.value(loss).data[0], gs)
    };

    let (_, analytic) = eval(params);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor4<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data[k];
            work[pi].data[k] = orig + eps;
            let (lp, _) = eval_loss_only(&work, &build);
            work[pi].data[k] = orig - eps;
            let (lm, _) = eval_loss_only(&work, &build);
            work[pi].data[k] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pi].as_ref().map_or(0.0, |g| g.data[k]);
            let denom = fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

fn eval_loss_only<F>(values: &[Tensor4<f64>], build: &F) -> (f64, ())
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = values.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    (tape.value(loss).data[0], ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::ops::ConvSpec;
    use crate::tensor::RoiRect;
    use rand::Rng;

    fn rand_t(r: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv2d_grad_check() {
        let mut r = stream_rng(11, 0);
        let x = rand_t(&mut r, 2, 4, 5, 5);
        let w = rand_t(&mut r, 3, 4, 3, 3);
        let b = rand_t(&mut r, 1, 3, 1, 1);
        let target = rand_t(&mut r, 2, 3, 5, 5);
        let roi = RoiRect { x0: 1, y0: 1, x1: 4, y1: 4 };
        let err = grad_check(&[x, w, b], DEFAULT_EPS, |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], ConvSpec { stride: 1, pad: 1 }).unwrap();
            tape.mse_roi(y, target.clone(), roi).unwrap()
        });
        assert!(err <= 1e-5, "conv2d grad error {err}");
    }

    #[test]
    fn conv2d_transpose_grad_check() {
        let mut r = stream_rng(12, 0);
        let x = rand_t(&mut r, 2, 3, 3, 3);
        let w = rand_t(&mut r, 3, 2, 3, 3);
        let b = rand_t(&mut r, 1, 2, 1, 1);
        let target = rand_t(&mut r, 2, 2, 5, 5);
        let roi = RoiRect { x0: 0, y0: 0, x1: 5, y1: 5 };
        let err = grad_check(&[x, w, b], DEFAULT_EPS, |tape, ids| {
            let y = tape
                .conv2d_transpose(ids[0], ids[1], ids[2], ConvSpec { stride: 2, pad: 1 }, (5, 5))
                .unwrap();
            tape.mse_roi(y, target.clone(), roi).unwrap()
        });
        assert!(err <= 1e-5, "conv2d_transpose grad error {err}");
    }

    #[test]
    fn batchnorm_grad_check() {
        let mut r = stream_rng(13, 0);
        let x = rand_t(&mut r, 3, 2, 4, 4);
        let gamma = rand_t(&mut r, 1, 2, 1, 1);
        let beta = rand_t(&mut r, 1, 2, 1, 1);
        let target = rand_t(&mut r, 3, 2, 4, 4);
        let roi = RoiRect { x0: 0, y0: 0, x1: 4, y1: 4 };
        let err = grad_check(&[x, gamma, beta], DEFAULT_EPS, |tape, ids| {
            let mut rm = vec![0.0; 2];
            let mut rv = vec![1.0; 2];
            let y = tape.batchnorm_train(ids[0], ids[1], ids[2], &mut rm, &mut rv).unwrap();
            tape.mse_roi(y, target.clone(), roi).unwrap()
        });
        assert!(err <= 1e-4, "batchnorm grad error {err}");
    }

    #[test]
    fn dense_se_path_grad_check() {
        let mut r = stream_rng(14, 0);
        let x = rand_t(&mut r, 2, 8, 4, 4);
        let w1 = rand_t(&mut r, 2, 8, 1, 1);
        let b1 = rand_t(&mut r, 1, 2, 1, 1);
        let w2 = rand_t(&mut r, 8, 2, 1, 1);
        let b2 = rand_t(&mut r, 1, 8, 1, 1);
        let target = rand_t(&mut r, 2, 8, 4, 4);
        let roi = RoiRect { x0: 0, y0: 0, x1: 4, y1: 4 };
        let err = grad_check(&[x, w1, b1, w2, b2], DEFAULT_EPS, |tape, ids| {
            let pooled = tape.global_avg_pool(ids[0]);
            let d1 = tape.dense(pooled, ids[1], ids[2]).unwrap();
            let a1 = tape.relu(d1);
            let d2 = tape.dense(a1, ids[3], ids[4]).unwrap();
            let gate = tape.sigmoid(d2);
            let y = tape.channel_scale(ids[0], gate).unwrap();
            tape.mse_roi(y, target.clone(), roi).unwrap()
        });
        assert!(err <= 1e-4, "SE path grad error {err}");
    }

    #[test]
    fn reparam_kl_grad_check() {
        let mut r = stream_rng(15, 0);
        let mu = rand_t(&mut r, 1, 1, 2, 3);
        let rho = rand_t(&mut r, 1, 1, 2, 3);
        let pm = rand_t(&mut r, 1, 1, 1, 1);
        let pr = rand_t(&mut r, 1, 1, 1, 1);
        let noise = rand_t(&mut r, 1, 1, 2, 3);
        let target = rand_t(&mut r, 1, 1, 2, 3);
        let roi = RoiRect { x0: 0, y0: 0, x1: 3, y1: 2 };
        let err = grad_check(&[mu, rho, pm, pr], DEFAULT_EPS, |tape, ids| {
            let w = tape.reparam(ids[0], ids[1], noise.clone()).unwrap();
            let fit = tape.mse_roi(w, target.clone(), roi).unwrap();
            let kl = tape.kl_shared_prior(ids[0], ids[1], ids[2], ids[3]).unwrap();
            let kl_scaled = tape.scale(kl, 0.1);
            tape.add(fit, kl_scaled).unwrap()
        });
        assert!(err <= 1e-5, "reparam/KL grad error {err}");
    }
}
