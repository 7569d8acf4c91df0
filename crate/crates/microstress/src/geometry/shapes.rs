//! Parametric void shapes and their geometric predicates.
//!
//! Distances are exact (bisection / ternary search to machine precision), so
//! separation invariants can be checked with the same predicates used during
//! placement.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn norm(p: Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Ellipse with arbitrary orientation. Disks use equal semi-axes.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Ellipse {
    pub center: Point,
    /// Semi-axes along the rotated x / y directions.
    pub radii: [f64; 2],
    /// Rotation of the major frame, radians.
    pub orientation: f64,
}

impl Ellipse {
    pub fn disk(center: Point, r: f64) -> Self {
        Self { center, radii: [r, r], orientation: 0.0 }
    }

    /// Point mapped into the axis-aligned ellipse frame.
    fn to_local(&self, p: Point) -> Point {
        let d = sub(p, self.center);
        let (s, c) = self.orientation.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    fn from_local(&self, q: Point) -> Point {
        let (s, c) = self.orientation.sin_cos();
        [self.center[0] + c * q[0] - s * q[1], self.center[1] + s * q[0] + c * q[1]]
    }

    /// Radial gauge: <1 inside, 1 on the curve, >1 outside.
    pub fn gauge(&self, p: Point) -> f64 {
        let q = self.to_local(p);
        let x = q[0] / self.radii[0];
        let y = q[1] / self.radii[1];
        (x * x + y * y).sqrt()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.gauge(p) < 1.0
    }

    /// Exact signed distance to the curve (negative inside).
    pub fn signed_distance(&self, p: Point) -> f64 {
        let q = self.to_local(p);
        let d = dist_point_ellipse(self.radii[0], self.radii[1], q[0].abs(), q[1].abs());
        if self.gauge(p) < 1.0 {
            -d
        } else {
            d
        }
    }

    /// Ray-curve intersection along the ray from the center through `p`.
    pub fn radial_projection(&self, p: Point) -> Point {
        let g = self.gauge(p);
        if g == 0.0 {
            // Center: project to the first axis end.
            return self.from_local([self.radii[0], 0.0]);
        }
        let q = self.to_local(p);
        self.from_local([q[0] / g, q[1] / g])
    }

    pub fn bounding_radius(&self) -> f64 {
        self.radii[0].max(self.radii[1])
    }
}

/// Distance from a first-quadrant point to an axis-aligned ellipse
/// (robust bisection, Eberly's formulation).
fn dist_point_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    // Fold so e0 >= e1 by swapping axes if needed.
    let (e0, e1, y0, y1) = if e0 >= e1 { (e0, e1, y0, y1) } else { (e1, e0, y1, y0) };
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1) * (e0 / e1);
                let sbar = ellipse_root(r0, z0, z1, g);
                let x0 = r0 * y0 / (sbar + r0);
                let x1 = y1 / (sbar + 1.0);
                ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt()
            } else {
                0.0
            }
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if denom0 > 0.0 && numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e0 * xde0;
            let x1 = e1 * (1.0 - xde0 * xde0).max(0.0).sqrt();
            ((x0 - y0).powi(2) + x1 * x1).sqrt()
        } else {
            (y0 - e0).abs()
        }
    }
}

fn ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { (n0 * n0 + z1 * z1).sqrt() - 1.0 };
    let mut s = 0.0;
    for _ in 0..1074 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Convex hull of two disks (the tapered capsule of the clamped-strip family).
///
/// The hull equals the union of disks centered on the segment with linearly
/// interpolated radius, which gives a one-parameter containment test.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Capsule {
    pub c1: Point,
    pub r1: f64,
    pub c2: Point,
    pub r2: f64,
}

impl Capsule {
    /// min over t of |p - c(t)| - r(t); convex in t, ternary search.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let f = |t: f64| {
            let c = [
                self.c1[0] + t * (self.c2[0] - self.c1[0]),
                self.c1[1] + t * (self.c2[1] - self.c1[1]),
            ];
            dist(p, c) - (self.r1 + t * (self.r2 - self.r1))
        };
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) <= f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
    }

    pub fn contains(&self, p: Point) -> bool {
        self.signed_distance(p) < 0.0
    }

    /// Closest boundary point (via the minimizing interpolated disk).
    pub fn project(&self, p: Point) -> Point {
        let eval = |t: f64| {
            let c = [
                self.c1[0] + t * (self.c2[0] - self.c1[0]),
                self.c1[1] + t * (self.c2[1] - self.c1[1]),
            ];
            (c, self.r1 + t * (self.r2 - self.r1))
        };
        let f = |t: f64| {
            let (c, r) = eval(t);
            dist(p, c) - r
        };
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) <= f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let mut t = 0.5 * (lo + hi);
        if f(0.0) < f(t) {
            t = 0.0;
        }
        if f(1.0) < f(t) {
            t = 1.0;
        }
        let (c, r) = eval(t);
        let d = sub(p, c);
        let n = norm(d);
        if n == 0.0 {
            return [c[0] + r, c[1]];
        }
        [c[0] + d[0] * r / n, c[1] + d[1] * r / n]
    }

    pub fn bounding_radius_from(&self, p: Point) -> f64 {
        (dist(p, self.c1) + self.r1).max(dist(p, self.c2) + self.r2)
    }
}

/// Any material void: macroscale ellipse/capsule features or microscale pores.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum Void {
    Ellipse(Ellipse),
    Capsule(Capsule),
}

impl Void {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Void::Ellipse(e) => e.contains(p),
            Void::Capsule(c) => c.contains(p),
        }
    }

    pub fn signed_distance(&self, p: Point) -> f64 {
        match self {
            Void::Ellipse(e) => e.signed_distance(p),
            Void::Capsule(c) => c.signed_distance(p),
        }
    }

    /// Point on the curve used for mesh snapping: radial for ellipses,
    /// nearest-point for capsules.
    pub fn snap_target(&self, p: Point) -> Point {
        match self {
            Void::Ellipse(e) => e.radial_projection(p),
            Void::Capsule(c) => c.project(p),
        }
    }
}
