//! Solution post-processing: boundary hoop-stress recovery and raw exports.

use std::path::Path;

use serde::Serialize;

use super::{DisplacementField, Material, NodeTag, StressField, TriMesh};
use crate::io::{self, IoError};

/// Hoop stress around a traction-free circular boundary, recovered from the
/// nodal displacement trace.
///
/// On the free surface sigma_rr = tau_rt = 0, so
/// sigma_tt = E/(1-nu^2) * eps_tt with eps_tt = (u_r + du_t/dtheta) / R.
/// Ring nodes sit unevenly after snapping, so the trace is fitted with a
/// truncated Fourier series (least squares) and differentiated analytically;
/// the profile is returned on a uniform angle grid.
pub fn hoop_stress_on_circle(
    mesh: &TriMesh,
    u: &DisplacementField,
    mat: &Material,
    center: [f64; 2],
    radius: f64,
) -> Vec<(f64, f64)> {
    hoop_stress_profile(mesh, u, mat, center, radius, 8, 720)
}

pub fn hoop_stress_profile(
    mesh: &TriMesh,
    u: &DisplacementField,
    mat: &Material,
    center: [f64; 2],
    radius: f64,
    n_harmonics: usize,
    n_samples: usize,
) -> Vec<(f64, f64)> {
    let tol = 1e-6 * radius;
    let mut theta = Vec::new();
    let mut u_r = Vec::new();
    let mut u_t = Vec::new();
    for (i, p) in mesh.nodes.iter().enumerate() {
        if mesh.node_tags[i] != NodeTag::Pore {
            continue;
        }
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        let r = (dx * dx + dy * dy).sqrt();
        if (r - radius).abs() > tol {
            continue;
        }
        let th = dy.atan2(dx);
        let (er, et) = ([dx / r, dy / r], [-dy / r, dx / r]);
        let uu = u.u[i];
        theta.push(th);
        u_r.push(uu[0] * er[0] + uu[1] * er[1]);
        u_t.push(uu[0] * et[0] + uu[1] * et[1]);
    }
    let n = theta.len();
    if n < 2 * n_harmonics + 3 {
        return Vec::new();
    }
    let cr = fit_fourier(&theta, &u_r, n_harmonics);
    let ct = fit_fourier(&theta, &u_t, n_harmonics);
    let modulus = mat.surface_hoop_modulus();
    let mut out = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let th = 2.0 * std::f64::consts::PI * k as f64 / n_samples as f64 - std::f64::consts::PI;
        let ur = eval_fourier(&cr, th);
        let dut = eval_fourier_derivative(&ct, th);
        let eps_tt = (ur + dut) / radius;
        out.push((th, modulus * eps_tt));
    }
    out
}

/// Least-squares coefficients [a0, a1, b1, a2, b2, ...] of
/// f(t) = a0 + sum_k a_k cos(kt) + b_k sin(kt).
fn fit_fourier(theta: &[f64], y: &[f64], harmonics: usize) -> Vec<f64> {
    let m = 2 * harmonics + 1;
    let basis = |th: f64, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            if j % 2 == 1 {
                (k * th).cos()
            } else {
                (k * th).sin()
            }
        }
    };
    let mut ata = vec![vec![0.0f64; m]; m];
    let mut aty = vec![0.0f64; m];
    for (i, &th) in theta.iter().enumerate() {
        for r in 0..m {
            let br = basis(th, r);
            aty[r] += br * y[i];
            for c in 0..m {
                ata[r][c] += br * basis(th, c);
            }
        }
    }
    solve_dense(&mut ata, &mut aty);
    aty
}

fn eval_fourier(c: &[f64], th: f64) -> f64 {
    let mut v = c[0];
    let harmonics = (c.len() - 1) / 2;
    for k in 1..=harmonics {
        v += c[2 * k - 1] * (k as f64 * th).cos() + c[2 * k] * (k as f64 * th).sin();
    }
    v
}

fn eval_fourier_derivative(c: &[f64], th: f64) -> f64 {
    let mut v = 0.0;
    let harmonics = (c.len() - 1) / 2;
    for k in 1..=harmonics {
        let kf = k as f64;
        v += -c[2 * k - 1] * kf * (kf * th).sin() + c[2 * k] * kf * (kf * th).cos();
    }
    v
}

/// Gaussian elimination with partial pivoting; solution left in `b`.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * b[c];
        }
        b[col] = acc / a[col][col];
    }
}

/// Max tangential (hoop) stress over a circle, sampled from element-constant
/// stresses via the containing triangle at uniformly spaced angles.
pub fn max_hoop_on_circle(
    mesh: &TriMesh,
    stress: &StressField,
    center: [f64; 2],
    radius: f64,
    n_samples: usize,
) -> Option<f64> {
    let locator = crate::fields::TriLocator::new(mesh);
    let mut best: Option<f64> = None;
    for k in 0..n_samples {
        let th = 2.0 * std::f64::consts::PI * k as f64 / n_samples as f64;
        let p = [center[0] + radius * th.cos(), center[1] + radius * th.sin()];
        if let Some(t) = locator.find(p) {
            let s = stress.s[t];
            // tangential direction (-sin, cos): n^T sigma n
            let (sin, cos) = th.sin_cos();
            let stt = s[0] * sin * sin + s[1] * cos * cos - 2.0 * s[2] * sin * cos;
            best = Some(best.map_or(stt, |b: f64| b.max(stt)));
        }
    }
    best
}

#[derive(Serialize)]
struct SolutionSidecar {
    n_nodes: usize,
    n_elements: usize,
    displacement_file: String,
    displacement_shape: (usize, usize),
    stress_file: String,
    stress_shape: (usize, usize),
}

/// Writes per-node u and per-element stress as raw little-endian f64 arrays
/// with a JSON sidecar describing shapes.
pub fn export_solution(
    dir: &Path,
    u: &DisplacementField,
    stress: &StressField,
) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut flat_u = Vec::with_capacity(2 * u.u.len());
    for v in &u.u {
        flat_u.extend_from_slice(v);
    }
    let mut flat_s = Vec::with_capacity(3 * stress.s.len());
    for v in &stress.s {
        flat_s.extend_from_slice(v);
    }
    io::write_f64(&dir.join("displacement.f64"), &flat_u)?;
    io::write_f64(&dir.join("stress.f64"), &flat_s)?;
    io::write_json(
        &dir.join("solution.json"),
        &SolutionSidecar {
            n_nodes: u.u.len(),
            n_elements: stress.s.len(),
            displacement_file: "displacement.f64".into(),
            displacement_shape: (u.u.len(), 2),
            stress_file: "stress.f64".into(),
            stress_shape: (stress.s.len(), 3),
        },
    )
}
