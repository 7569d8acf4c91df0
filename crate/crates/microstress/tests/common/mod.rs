//! Shared fixtures for integration tests.

use microstress::fem::Material;
use microstress::geometry::{
    sample_structure, Ellipse, FarFieldBC, PoreCount, Structure, StructureSpec,
};

/// Pore-free square structure of the linear family.
pub fn plain_structure(domain: f64) -> Structure {
    let spec = StructureSpec { n_pores: PoreCount::Fixed(0), ..StructureSpec::one_ellipse(192.0) };
    let mut s = sample_structure(&spec, 1).expect("sampling succeeds");
    s.macro_features.clear();
    s.spec.domain_size = (domain, domain);
    s
}

/// Single circular hole of radius `r` centered in a `domain` square.
pub fn hole_structure(domain: f64, r: f64) -> Structure {
    let mut s = plain_structure(domain);
    s.micro_pores.push(Ellipse::disk([domain / 2.0, domain / 2.0], r));
    s
}

/// Pore-free clamped strip; `coarse_r` lifts the mesh-spacing bound for
/// cheap solves (no pores need resolving).
pub fn plain_strip(coarse_r: f64) -> Structure {
    let spec = StructureSpec { n_pores: PoreCount::Fixed(0), ..StructureSpec::clamped_strip() };
    let mut s = sample_structure(&spec, 1).expect("sampling succeeds");
    s.macro_features.clear();
    s.spec.micro_radius = coarse_r;
    s
}

/// Far-field tensor whose plane-strain stress state is uniaxial
/// sigma_xx = amp * E.
pub fn uniaxial_bc(center: [f64; 2], amp: f64, mat: &Material) -> FarFieldBC {
    let nu = mat.nu;
    FarFieldBC {
        e_xx: amp * (1.0 - nu * nu),
        e_xy: 0.0,
        e_yy: -amp * nu * (1.0 + nu),
        center,
    }
}

/// Analytic hoop profile of the infinite-plate circular-hole problem at
/// normalised radius rho = r/a under unit uniaxial far stress.
pub fn kirsch_hoop(rho: f64, theta: f64) -> f64 {
    let k2 = 1.0 / (rho * rho);
    let k4 = k2 * k2;
    0.5 * (1.0 + k2) - 0.5 * (1.0 + 3.0 * k4) * (2.0 * theta).cos()
}
