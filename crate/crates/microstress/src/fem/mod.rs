//! Plane-strain elasticity on P1 triangles: linear and Saint-Venant-Kirchhoff
//! finite-strain solves with Dirichlet boundary conditions.

pub mod mesh;
pub mod post;
pub mod sparse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundaryCondition, StripBC};
pub use mesh::{build_mesh, build_mesh_with, ingest_mesh, write_mesh, MeshParams, NodeTag, Region, TriMesh};
use sparse::{pcg_jacobi, Csr};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("degenerate triangle {triangle} (area {area:.3e}) after snapping")]
    MeshDegenerate { triangle: usize, area: f64 },
    #[error("mesh parse error: {0}")]
    Parse(String),
    #[error("mesh validation error: {0}")]
    Validation(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("Newton diverged at load step {step} after {iterations} iterations")]
    NewtonDiverged { step: usize, iterations: usize },
    #[error("element {element} inverted (J = {j:.3e})")]
    ElementInverted { element: usize, j: f64 },
}

/// Isotropic material; Lame parameters follow the plane-strain conversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub e: f64,
    pub nu: f64,
}

impl Material {
    pub fn new(e: f64, nu: f64) -> Self {
        assert!(e > 0.0 && nu > -1.0 && nu < 0.5, "invalid material");
        Self { e, nu }
    }

    pub fn lame(&self) -> (f64, f64) {
        let lambda = self.e * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu));
        let mu = self.e / (2.0 * (1.0 + self.nu));
        (lambda, mu)
    }

    /// Effective modulus relating hoop strain to hoop stress on a
    /// traction-free boundary: E / (1 - nu^2).
    pub fn surface_hoop_modulus(&self) -> f64 {
        let (l, m) = self.lame();
        4.0 * m * (l + m) / (l + 2.0 * m)
    }
}

impl Default for Material {
    fn default() -> Self {
        Self::new(1.0, 0.3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub u: Vec<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StressFrame {
    Reference,
    /// Cauchy stress components, reported at reference element positions.
    Deformed,
}

#[derive(Clone, Debug)]
pub struct StressField {
    /// Per-element (sigma_xx, sigma_yy, tau_xy).
    pub s: Vec<[f64; 3]>,
    pub frame: StressFrame,
}

/// Per-element deformation gradient, Green-Lagrange strain and Jacobian.
#[derive(Clone, Debug)]
pub struct KinematicState {
    pub f: Vec<[[f64; 2]; 2]>,
    /// (E_xx, E_yy, E_xy)
    pub green: Vec<[f64; 3]>,
    pub j: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Theory {
    Linear,
    FiniteStrain,
}

/// P1 gradients and area for one element.
#[derive(Clone, Copy)]
struct ElementGeom {
    grads: [[f64; 2]; 3],
    area: f64,
}

fn element_geom(mesh: &TriMesh, t: usize) -> ElementGeom {
    let [a, b, c] = mesh.triangles[t];
    let (p0, p1, p2) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
    let area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
    let inv = 1.0 / area2;
    ElementGeom {
        grads: [
            [(p1[1] - p2[1]) * inv, (p2[0] - p1[0]) * inv],
            [(p2[1] - p0[1]) * inv, (p0[0] - p2[0]) * inv],
            [(p0[1] - p1[1]) * inv, (p1[0] - p0[0]) * inv],
        ],
        area: 0.5 * area2,
    }
}

/// Dirichlet values per dof (2 * node + component).
fn dirichlet_values(mesh: &TriMesh, bc: &BoundaryCondition) -> Result<Vec<Option<f64>>, FemError> {
    let mut fixed = vec![None; 2 * mesh.n_nodes()];
    match bc {
        BoundaryCondition::FarField(ff) => {
            let tag = mesh.bc_boundary_tag();
            for (i, p) in mesh.nodes.iter().enumerate() {
                if mesh.node_tags[i] == tag {
                    let u = ff.displacement(*p);
                    fixed[2 * i] = Some(u[0]);
                    fixed[2 * i + 1] = Some(u[1]);
                }
            }
        }
        BoundaryCondition::Strip(sb) => {
            let (lo, hi) = mesh.bbox();
            let tol = 1e-9 * (hi[0] - lo[0]).max(1.0);
            for (i, p) in mesh.nodes.iter().enumerate() {
                if (p[0] - lo[0]).abs() < tol {
                    fixed[2 * i] = Some(0.0);
                    fixed[2 * i + 1] = Some(0.0);
                } else if (p[0] - hi[0]).abs() < tol {
                    fixed[2 * i] = Some(0.0);
                    fixed[2 * i + 1] = Some(sb.u_y);
                }
            }
        }
    }
    let n_fixed = fixed.iter().filter(|v| v.is_some()).count();
    if n_fixed < 3 {
        return Err(FemError::SingularSystem(format!(
            "{n_fixed} constrained dofs leave rigid-body modes"
        )));
    }
    Ok(fixed)
}

const LINEAR_TOL: f64 = 1e-13;

/// Minimises the discrete quadratic energy: K u = 0 with Dirichlet
/// elimination, relative residual below 1e-10 guaranteed by construction.
pub fn solve_linear(
    mesh: &TriMesh,
    mat: &Material,
    bc: &BoundaryCondition,
) -> Result<DisplacementField, FemError> {
    let fixed = dirichlet_values(mesh, bc)?;
    solve_linear_fixed(mesh, mat, fixed)
}

fn solve_linear_fixed(
    mesh: &TriMesh,
    mat: &Material,
    fixed: Vec<Option<f64>>,
) -> Result<DisplacementField, FemError> {
    let (lambda, mu) = mat.lame();

    let n_dof = 2 * mesh.n_nodes();
    let mut free_index = vec![usize::MAX; n_dof];
    let mut n_free = 0;
    for d in 0..n_dof {
        if fixed[d].is_none() {
            free_index[d] = n_free;
            n_free += 1;
        }
    }

    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; n_free];
    for t in 0..mesh.n_triangles() {
        let geom = element_geom(mesh, t);
        let ke = linear_element_stiffness(&geom, lambda, mu);
        let tri = mesh.triangles[t];
        for (ra, &na) in tri.iter().enumerate() {
            for ia in 0..2 {
                let ga = 2 * na + ia;
                let fa = free_index[ga];
                for (rb, &nb) in tri.iter().enumerate() {
                    for ib in 0..2 {
                        let gb = 2 * nb + ib;
                        let k = ke[2 * ra + ia][2 * rb + ib];
                        if fa != usize::MAX {
                            match fixed[gb] {
                                None => trips.push((fa, free_index[gb], k)),
                                Some(v) => rhs[fa] -= k * v,
                            }
                        }
                    }
                }
            }
        }
    }

    let a = Csr::from_triplets(n_free, &mut trips);
    let out = pcg_jacobi(&a, &rhs, LINEAR_TOL, 50 * n_free.max(100))
        .ok_or_else(|| FemError::SingularSystem("conjugate gradients did not converge".into()))?;

    let mut u = vec![[0.0; 2]; mesh.n_nodes()];
    for i in 0..mesh.n_nodes() {
        for k in 0..2 {
            let d = 2 * i + k;
            u[i][k] = match fixed[d] {
                Some(v) => v,
                None => out.x[free_index[d]],
            };
        }
    }
    Ok(DisplacementField { u })
}

fn linear_element_stiffness(geom: &ElementGeom, lambda: f64, mu: f64) -> [[f64; 6]; 6] {
    let g = &geom.grads;
    let mut ke = [[0.0; 6]; 6];
    for a in 0..3 {
        for b in 0..3 {
            let (ga, gb) = (g[a], g[b]);
            // lambda grad_i grad_k + mu grad_k grad_i + mu delta_ik (ga . gb)
            let dot = ga[0] * gb[0] + ga[1] * gb[1];
            for i in 0..2 {
                for k in 0..2 {
                    let mut v = lambda * ga[i] * gb[k] + mu * gb[i] * ga[k];
                    if i == k {
                        v += mu * dot;
                    }
                    ke[2 * a + i][2 * b + k] = geom.area * v;
                }
            }
        }
    }
    ke
}

/// Per-element stress from a displacement field.
pub fn element_stress(
    mesh: &TriMesh,
    u: &DisplacementField,
    mat: &Material,
    theory: Theory,
) -> Result<StressField, FemError> {
    let (lambda, mu) = mat.lame();
    let mut s = Vec::with_capacity(mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let grad_u = displacement_gradient(mesh, u, t);
        match theory {
            Theory::Linear => {
                let exx = grad_u[0][0];
                let eyy = grad_u[1][1];
                let exy = 0.5 * (grad_u[0][1] + grad_u[1][0]);
                let tr = exx + eyy;
                s.push([lambda * tr + 2.0 * mu * exx, lambda * tr + 2.0 * mu * eyy, 2.0 * mu * exy]);
            }
            Theory::FiniteStrain => {
                let f = [
                    [1.0 + grad_u[0][0], grad_u[0][1]],
                    [grad_u[1][0], 1.0 + grad_u[1][1]],
                ];
                let j = f[0][0] * f[1][1] - f[0][1] * f[1][0];
                if j <= 0.0 {
                    return Err(FemError::ElementInverted { element: t, j });
                }
                let (spk, _green) = svk_second_piola(&f, lambda, mu);
                // sigma = (1/J) F S F^T
                let fs = mat2_mul(&f, &[[spk[0], spk[2]], [spk[2], spk[1]]]);
                let sig = mat2_mul_t(&fs, &f);
                s.push([sig[0][0] / j, sig[1][1] / j, 0.5 * (sig[0][1] + sig[1][0]) / j]);
            }
        }
    }
    Ok(StressField {
        s,
        frame: match theory {
            Theory::Linear => StressFrame::Reference,
            Theory::FiniteStrain => StressFrame::Deformed,
        },
    })
}

fn displacement_gradient(mesh: &TriMesh, u: &DisplacementField, t: usize) -> [[f64; 2]; 2] {
    let geom = element_geom(mesh, t);
    let tri = mesh.triangles[t];
    let mut g = [[0.0; 2]; 2];
    for (a, &n) in tri.iter().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                g[i][j] += u.u[n][i] * geom.grads[a][j];
            }
        }
    }
    g
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn mat2_mul_t(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[j][0] + a[i][1] * b[j][1];
        }
    }
    c
}

/// Returns ((S_xx, S_yy, S_xy), (E_xx, E_yy, E_xy)) for SVK.
fn svk_second_piola(f: &[[f64; 2]; 2], lambda: f64, mu: f64) -> ([f64; 3], [f64; 3]) {
    let exx = 0.5 * (f[0][0] * f[0][0] + f[1][0] * f[1][0] - 1.0);
    let eyy = 0.5 * (f[0][1] * f[0][1] + f[1][1] * f[1][1] - 1.0);
    let exy = 0.5 * (f[0][0] * f[0][1] + f[1][0] * f[1][1]);
    let tr = exx + eyy;
    (
        [lambda * tr + 2.0 * mu * exx, lambda * tr + 2.0 * mu * eyy, 2.0 * mu * exy],
        [exx, eyy, exy],
    )
}

const NEWTON_MAX_ITER: usize = 20;
const NEWTON_REL: f64 = 1e-8;
const NEWTON_ABS: f64 = 1e-12;

/// Newton with load stepping on the Saint-Venant-Kirchhoff residual; halves
/// the increment (doubling the step count) up to 3 times on divergence.
pub fn solve_finite_strain(
    mesh: &TriMesh,
    mat: &Material,
    bc: &StripBC,
    n_steps: usize,
) -> Result<(DisplacementField, KinematicState), FemError> {
    assert!(n_steps >= 1);
    let mut err = None;
    for attempt in 0..4 {
        let steps = n_steps << attempt;
        match newton_load_stepping(mesh, mat, bc, steps) {
            Ok(out) => return Ok(out),
            Err(e @ (FemError::NewtonDiverged { .. } | FemError::ElementInverted { .. })) => {
                err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(err.expect("retry loop ran"))
}

/// Newton iteration statistics from the last finite-strain solve.
pub struct NewtonReport {
    pub iterations_per_step: Vec<usize>,
    pub min_jacobian: f64,
}

pub fn solve_finite_strain_reported(
    mesh: &TriMesh,
    mat: &Material,
    bc: &StripBC,
    n_steps: usize,
) -> Result<(DisplacementField, KinematicState, NewtonReport), FemError> {
    newton_load_stepping_impl(mesh, mat, bc, n_steps)
}

fn newton_load_stepping(
    mesh: &TriMesh,
    mat: &Material,
    bc: &StripBC,
    n_steps: usize,
) -> Result<(DisplacementField, KinematicState), FemError> {
    newton_load_stepping_impl(mesh, mat, bc, n_steps).map(|(u, k, _)| (u, k))
}

fn newton_load_stepping_impl(
    mesh: &TriMesh,
    mat: &Material,
    bc: &StripBC,
    n_steps: usize,
) -> Result<(DisplacementField, KinematicState, NewtonReport), FemError> {
    let (lambda, mu) = mat.lame();
    let full = dirichlet_values(mesh, &BoundaryCondition::Strip(*bc))?;
    let n_dof = 2 * mesh.n_nodes();
    let mut free_index = vec![usize::MAX; n_dof];
    let mut n_free = 0;
    for d in 0..n_dof {
        if full[d].is_none() {
            free_index[d] = n_free;
            n_free += 1;
        }
    }

    let geoms: Vec<ElementGeom> = (0..mesh.n_triangles()).map(|t| element_geom(mesh, t)).collect();
    let mut u = vec![0.0f64; n_dof];
    let mut delta_prev: Option<Vec<f64>> = None;
    let mut report = NewtonReport { iterations_per_step: Vec::new(), min_jacobian: f64::MAX };

    for step in 1..=n_steps {
        let u_start = u.clone();
        let frac = step as f64 / n_steps as f64;
        // Predictor: reuse the previous converged increment; the first step
        // starts from the linear-elastic solution of its load level.
        match &delta_prev {
            Some(d) => {
                for (ud, dd) in u.iter_mut().zip(d) {
                    *ud += dd;
                }
            }
            None => {
                let lin_bc = BoundaryCondition::Strip(StripBC { u_y: frac * bc.u_y });
                if let Ok(lin) = solve_linear(mesh, mat, &lin_bc) {
                    for (i, v) in lin.u.iter().enumerate() {
                        u[2 * i] = v[0];
                        u[2 * i + 1] = v[1];
                    }
                }
            }
        }
        for d in 0..n_dof {
            if let Some(v) = full[d] {
                u[d] = frac * v;
            }
        }
        // An overshooting predictor may invert elements; fall back to the
        // plain start point.
        let mut jmin_probe = f64::MAX;
        if residual(mesh, &geoms, &u, lambda, mu, &mut jmin_probe).is_err() {
            u = u_start.clone();
            for d in 0..n_dof {
                if let Some(v) = full[d] {
                    u[d] = frac * v;
                }
            }
        }

        let mut r = residual(mesh, &geoms, &u, lambda, mu, &mut report.min_jacobian)?;
        let mut rn = free_norm(&r, &free_index);
        let r0 = rn;
        let mut converged = r0 <= NEWTON_ABS;
        let mut iters = 0;
        while !converged && iters < NEWTON_MAX_ITER {
            iters += 1;
            let mut trips = tangent_triplets(mesh, &geoms, &u, lambda, mu, &free_index);
            let a = Csr::from_triplets(n_free, &mut trips);
            let mut rhs = vec![0.0; n_free];
            for d in 0..n_dof {
                if free_index[d] != usize::MAX {
                    rhs[free_index[d]] = -r[d];
                }
            }
            let sol = pcg_jacobi(&a, &rhs, 1e-10, 60 * n_free.max(100)).ok_or(
                FemError::NewtonDiverged { step, iterations: iters },
            )?;
            // Backtracking on the residual norm; also damps across element
            // inversion, which counts as a rejected trial.
            let mut alpha = 1.0f64;
            let mut accepted = false;
            for _ in 0..12 {
                let mut trial = u.clone();
                for d in 0..n_dof {
                    if free_index[d] != usize::MAX {
                        trial[d] += alpha * sol.x[free_index[d]];
                    }
                }
                let mut jmin = f64::MAX;
                match residual(mesh, &geoms, &trial, lambda, mu, &mut jmin) {
                    Ok(r_trial) => {
                        let rn_trial = free_norm(&r_trial, &free_index);
                        if rn_trial < rn || rn_trial <= NEWTON_ABS {
                            u = trial;
                            r = r_trial;
                            rn = rn_trial;
                            report.min_jacobian = report.min_jacobian.min(jmin);
                            accepted = true;
                            break;
                        }
                    }
                    Err(FemError::ElementInverted { .. }) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(FemError::NewtonDiverged { step, iterations: iters });
            }
            converged = rn <= (NEWTON_REL * r0).max(NEWTON_ABS);
        }
        if !converged {
            return Err(FemError::NewtonDiverged { step, iterations: iters });
        }
        delta_prev = Some(u.iter().zip(&u_start).map(|(a, b)| a - b).collect());
        report.iterations_per_step.push(iters);
    }

    let disp = DisplacementField {
        u: (0..mesh.n_nodes()).map(|i| [u[2 * i], u[2 * i + 1]]).collect(),
    };
    let mut f_all = Vec::with_capacity(mesh.n_triangles());
    let mut e_all = Vec::with_capacity(mesh.n_triangles());
    let mut j_all = Vec::with_capacity(mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let g = displacement_gradient(mesh, &disp, t);
        let f = [[1.0 + g[0][0], g[0][1]], [g[1][0], 1.0 + g[1][1]]];
        let j = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let (_, green) = svk_second_piola(&f, lambda, mu);
        f_all.push(f);
        e_all.push(green);
        j_all.push(j);
    }
    Ok((disp, KinematicState { f: f_all, green: e_all, j: j_all }, report))
}

fn free_norm(r: &[f64], free_index: &[usize]) -> f64 {
    let mut s = 0.0;
    for (d, &fi) in free_index.iter().enumerate() {
        if fi != usize::MAX {
            s += r[d] * r[d];
        }
    }
    s.sqrt()
}

fn residual(
    mesh: &TriMesh,
    geoms: &[ElementGeom],
    u: &[f64],
    lambda: f64,
    mu: f64,
    min_j: &mut f64,
) -> Result<Vec<f64>, FemError> {
    let mut r = vec![0.0; u.len()];
    for (t, geom) in geoms.iter().enumerate() {
        let tri = mesh.triangles[t];
        let mut grad = [[0.0; 2]; 2];
        for (a, &n) in tri.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    grad[i][j] += u[2 * n + i] * geom.grads[a][j];
                }
            }
        }
        let f = [[1.0 + grad[0][0], grad[0][1]], [grad[1][0], 1.0 + grad[1][1]]];
        let j = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        if j <= 0.0 {
            return Err(FemError::ElementInverted { element: t, j });
        }
        *min_j = min_j.min(j);
        let (s, _) = svk_second_piola(&f, lambda, mu);
        let smat = [[s[0], s[2]], [s[2], s[1]]];
        let p = mat2_mul(&f, &smat);
        for (a, &n) in tri.iter().enumerate() {
            for i in 0..2 {
                r[2 * n + i] +=
                    geom.area * (p[i][0] * geom.grads[a][0] + p[i][1] * geom.grads[a][1]);
            }
        }
    }
    Ok(r)
}

fn tangent_triplets(
    mesh: &TriMesh,
    geoms: &[ElementGeom],
    u: &[f64],
    lambda: f64,
    mu: f64,
    free_index: &[usize],
) -> Vec<(usize, usize, f64)> {
    let mut trips = Vec::with_capacity(36 * mesh.n_triangles());
    for (t, geom) in geoms.iter().enumerate() {
        let tri = mesh.triangles[t];
        let mut grad = [[0.0; 2]; 2];
        for (a, &n) in tri.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    grad[i][j] += u[2 * n + i] * geom.grads[a][j];
                }
            }
        }
        let f = [[1.0 + grad[0][0], grad[0][1]], [grad[1][0], 1.0 + grad[1][1]]];
        let (s, _) = svk_second_piola(&f, lambda, mu);
        let smat = [[s[0], s[2]], [s[2], s[1]]];
        let fft = mat2_mul_t(&f, &f);
        // F . grad_a for each local node
        let fg: Vec<[f64; 2]> = (0..3)
            .map(|a| {
                let g = geom.grads[a];
                [f[0][0] * g[0] + f[0][1] * g[1], f[1][0] * g[0] + f[1][1] * g[1]]
            })
            .collect();
        for a in 0..3 {
            let ga = geom.grads[a];
            for b in 0..3 {
                let gb = geom.grads[b];
                let gsg = ga[0] * (smat[0][0] * gb[0] + smat[0][1] * gb[1])
                    + ga[1] * (smat[1][0] * gb[0] + smat[1][1] * gb[1]);
                let gg = ga[0] * gb[0] + ga[1] * gb[1];
                for i in 0..2 {
                    let da = free_index[2 * tri[a] + i];
                    if da == usize::MAX {
                        continue;
                    }
                    for k in 0..2 {
                        let db = free_index[2 * tri[b] + k];
                        if db == usize::MAX {
                            continue;
                        }
                        let mut v = lambda * fg[a][i] * fg[b][k] + mu * fg[b][i] * fg[a][k]
                            + mu * fft[i][k] * gg;
                        if i == k {
                            v += gsg;
                        }
                        trips.push((da, db, geom.area * v));
                    }
                }
            }
        }
    }
    trips
}

/// Central-difference check of the analytic tangent on the free dofs.
/// Returns the worst relative error entrywise against the column scale.
pub fn tangent_fd_error(mesh: &TriMesh, mat: &Material, u_seed: &[f64], eps: f64) -> f64 {
    let (lambda, mu) = mat.lame();
    let geoms: Vec<ElementGeom> = (0..mesh.n_triangles()).map(|t| element_geom(mesh, t)).collect();
    let n_dof = 2 * mesh.n_nodes();
    let free_index: Vec<usize> = (0..n_dof).collect();
    let trips = tangent_triplets(mesh, &geoms, u_seed, lambda, mu, &free_index);
    let mut dense = vec![vec![0.0; n_dof]; n_dof];
    for (r, c, v) in trips {
        dense[r][c] += v;
    }
    let mut scale = 0.0f64;
    for row in &dense {
        for v in row {
            scale = scale.max(v.abs());
        }
    }
    let mut worst = 0.0f64;
    let mut jmin = f64::MAX;
    for d in 0..n_dof {
        let mut up = u_seed.to_vec();
        let mut dn = u_seed.to_vec();
        up[d] += eps;
        dn[d] -= eps;
        let rp = residual(mesh, &geoms, &up, lambda, mu, &mut jmin).expect("fd state valid");
        let rm = residual(mesh, &geoms, &dn, lambda, mu, &mut jmin).expect("fd state valid");
        for r in 0..n_dof {
            let fd = (rp[r] - rm[r]) / (2.0 * eps);
            worst = worst.max((fd - dense[r][d]).abs() / scale);
        }
    }
    worst
}

/// Linear solve with explicit per-node Dirichlet values (test support).
pub fn solve_linear_with_values(
    mesh: &TriMesh,
    mat: &Material,
    fixed_nodes: &[Option<[f64; 2]>],
) -> Result<DisplacementField, FemError> {
    let mut fixed = vec![None; 2 * mesh.n_nodes()];
    for (i, f) in fixed_nodes.iter().enumerate() {
        if let Some(v) = f {
            fixed[2 * i] = Some(v[0]);
            fixed[2 * i + 1] = Some(v[1]);
        }
    }
    solve_linear_fixed(mesh, mat, fixed)
}
