//! Stress post-processing: principal stresses, Tresca, in-plane rotation, and
//! mesh-to-grid rasterisation of nodal or element fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fem::{StressField, TriMesh};
use crate::geometry::{BinaryImage, GridSpec};
use crate::io::{self, IoError};

/// In-plane symmetric stress tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressTensor2D {
    pub s_xx: f64,
    pub s_yy: f64,
    pub t_xy: f64,
}

impl StressTensor2D {
    pub fn new(s_xx: f64, s_yy: f64, t_xy: f64) -> Self {
        Self { s_xx, s_yy, t_xy }
    }

    pub fn trace(&self) -> f64 {
        self.s_xx + self.s_yy
    }

    pub fn det(&self) -> f64 {
        self.s_xx * self.s_yy - self.t_xy * self.t_xy
    }
}

/// (sigma_max, sigma_min): mean +- sqrt(((xx - yy)/2)^2 + txy^2).
pub fn principal_stresses(s: &StressTensor2D) -> (f64, f64) {
    let mean = 0.5 * (s.s_xx + s.s_yy);
    let half = 0.5 * (s.s_xx - s.s_yy);
    let r = (half * half + s.t_xy * s.t_xy).sqrt();
    (mean + r, mean - r)
}

/// Maximum-shear equivalent stress, (sigma_max - sigma_min) / 2.
pub fn tresca(s: &StressTensor2D) -> f64 {
    let half = 0.5 * (s.s_xx - s.s_yy);
    (half * half + s.t_xy * s.t_xy).sqrt()
}

/// Sum of absolute principal stresses; the output intensity scale.
pub fn abs_principal_sum(s: &StressTensor2D) -> f64 {
    let (a, b) = principal_stresses(s);
    a.abs() + b.abs()
}

/// Component transform under an in-plane rotation by theta.
pub fn rotate_stress(s: &StressTensor2D, theta: f64) -> StressTensor2D {
    let (sin, cos) = theta.sin_cos();
    let (c2, s2, sc) = (cos * cos, sin * sin, sin * cos);
    StressTensor2D {
        s_xx: s.s_xx * c2 + s.s_yy * s2 + 2.0 * s.t_xy * sc,
        s_yy: s.s_xx * s2 + s.s_yy * c2 - 2.0 * s.t_xy * sc,
        t_xy: (s.s_yy - s.s_xx) * sc + s.t_xy * (c2 - s2),
    }
}

/// Angle that zeroes the rotated shear component. Zero when the tensor is
/// already shear-free and equibiaxial (any angle is principal there).
pub fn principal_angle(s: &StressTensor2D) -> f64 {
    if s.t_xy == 0.0 && s.s_xx == s.s_yy {
        return 0.0;
    }
    0.5 * (2.0 * s.t_xy).atan2(s.s_xx - s.s_yy)
}

/// Multi-channel image over a pixel grid; f64 during generation.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldImage {
    pub grid: GridSpec,
    pub channels: usize,
    /// Channel-major: channel c at `c * nx * ny + iy * nx + ix`.
    pub data: Vec<f64>,
}

impl FieldImage {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self { grid, channels, data: vec![0.0; channels * grid.len()] }
    }

    #[inline]
    pub fn at(&self, channel: usize, ix: usize, iy: usize) -> f64 {
        self.data[channel * self.grid.len() + iy * self.grid.nx + ix]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, ix: usize, iy: usize, v: f64) {
        self.data[channel * self.grid.len() + iy * self.grid.nx + ix] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.grid.len()..(c + 1) * self.grid.len()]
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ImageSidecar {
    nx: usize,
    ny: usize,
    channels: usize,
    pixel_size: f64,
    origin: [f64; 2],
}

/// Raw little-endian f32 payload plus a JSON sidecar.
pub fn write_field_image(path_base: &std::path::Path, img: &FieldImage) -> Result<(), IoError> {
    let data32: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    io::write_f32(&path_base.with_extension("f32"), &data32)?;
    io::write_json(
        &path_base.with_extension("json"),
        &ImageSidecar {
            nx: img.grid.nx,
            ny: img.grid.ny,
            channels: img.channels,
            pixel_size: img.grid.pixel_size,
            origin: img.grid.origin,
        },
    )
}

pub fn read_field_image(path_base: &std::path::Path) -> Result<FieldImage, IoError> {
    let sc: ImageSidecar = io::read_json(&path_base.with_extension("json"))?;
    let grid = GridSpec::new(sc.origin, sc.pixel_size, sc.nx, sc.ny);
    let data32 = io::read_f32(&path_base.with_extension("f32"), sc.channels * grid.len())?;
    Ok(FieldImage { grid, channels: sc.channels, data: data32.iter().map(|&v| v as f64).collect() })
}

/// Field values to rasterise: constant per element or P1 per node.
#[derive(Clone, Copy)]
pub enum FieldValues<'a> {
    PerElement(&'a [f64]),
    PerNode(&'a [f64]),
}

/// Spatial index over triangles; queries return the lowest containing index.
pub struct TriLocator<'a> {
    mesh: &'a TriMesh,
    lo: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<u32>>,
}

impl<'a> TriLocator<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let (lo, hi) = mesh.bbox();
        // Bin size from the median fine edge; buffer triangles just span
        // multiple bins.
        let mut cell = f64::MAX;
        for tri in mesh.triangles.iter().take(256) {
            let (a, b) = (mesh.nodes[tri[0]], mesh.nodes[tri[1]]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            cell = cell.min(d);
        }
        let cell = (2.0 * cell).max((hi[0] - lo[0]).max(hi[1] - lo[1]) / 4096.0);
        let nx = (((hi[0] - lo[0]) / cell).ceil() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / cell).ceil() as usize + 1).max(1);
        let mut bins = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let (mut bx0, mut by0, mut bx1, mut by1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &n in tri {
                bx0 = bx0.min(mesh.nodes[n][0]);
                by0 = by0.min(mesh.nodes[n][1]);
                bx1 = bx1.max(mesh.nodes[n][0]);
                by1 = by1.max(mesh.nodes[n][1]);
            }
            let ix0 = (((bx0 - lo[0]) / cell).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let iy0 = (((by0 - lo[1]) / cell).floor() as isize).clamp(0, ny as isize - 1) as usize;
            let ix1 = (((bx1 - lo[0]) / cell).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let iy1 = (((by1 - lo[1]) / cell).floor() as isize).clamp(0, ny as isize - 1) as usize;
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    bins[iy * nx + ix].push(t as u32);
                }
            }
        }
        Self { mesh, lo, cell, nx, ny, bins }
    }

    /// Lowest-index triangle containing `p` (edges inclusive), if any.
    pub fn find(&self, p: [f64; 2]) -> Option<usize> {
        let ix = ((p[0] - self.lo[0]) / self.cell).floor();
        let iy = ((p[1] - self.lo[1]) / self.cell).floor();
        if ix < 0.0 || iy < 0.0 || ix as usize >= self.nx || iy as usize >= self.ny {
            return None;
        }
        let bin = &self.bins[iy as usize * self.nx + ix as usize];
        for &t in bin {
            if self.contains(t as usize, p) {
                return Some(t as usize);
            }
        }
        None
    }

    /// Barycentric coordinates of `p` in triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.mesh.triangles[t];
        let (pa, pb, pc) = (self.mesh.nodes[a], self.mesh.nodes[b], self.mesh.nodes[c]);
        let area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        let w0 = ((pb[0] - p[0]) * (pc[1] - p[1]) - (pb[1] - p[1]) * (pc[0] - p[0])) / area2;
        let w1 = ((pc[0] - p[0]) * (pa[1] - p[1]) - (pc[1] - p[1]) * (pa[0] - p[0])) / area2;
        [w0, w1, 1.0 - w0 - w1]
    }

    fn contains(&self, t: usize, p: [f64; 2]) -> bool {
        let [a, b, c] = self.mesh.triangles[t];
        let (pa, pb, pc) = (self.mesh.nodes[a], self.mesh.nodes[b], self.mesh.nodes[c]);
        let area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        let tol = -1e-12 * area2.abs();
        let s0 = (pb[0] - pa[0]) * (p[1] - pa[1]) - (pb[1] - pa[1]) * (p[0] - pa[0]);
        let s1 = (pc[0] - pb[0]) * (p[1] - pb[1]) - (pc[1] - pb[1]) * (p[0] - pb[0]);
        let s2 = (pa[0] - pc[0]) * (p[1] - pc[1]) - (pa[1] - pc[1]) * (p[0] - pc[0]);
        s0 >= tol && s1 >= tol && s2 >= tol
    }
}

/// Rasterises one field over the grid. Pixels whose centers fall in no
/// triangle (pores, or beyond the mesh) are zeroed and cleared in the mask.
pub fn rasterize(mesh: &TriMesh, field: FieldValues, grid: &GridSpec) -> (FieldImage, BinaryImage) {
    let locator = TriLocator::new(mesh);
    rasterize_with(&locator, mesh, field, grid)
}

pub fn rasterize_with(
    locator: &TriLocator,
    mesh: &TriMesh,
    field: FieldValues,
    grid: &GridSpec,
) -> (FieldImage, BinaryImage) {
    let n = grid.len();
    let mut data = vec![0.0f64; n];
    let mut mask = vec![0u8; n];
    data.par_chunks_mut(grid.nx)
        .zip(mask.par_chunks_mut(grid.nx))
        .enumerate()
        .for_each(|(iy, (row, mrow))| {
            for ix in 0..grid.nx {
                let p = grid.pixel_center(ix, iy);
                if let Some(t) = locator.find(p) {
                    mrow[ix] = 1;
                    row[ix] = match field {
                        FieldValues::PerElement(v) => v[t],
                        FieldValues::PerNode(v) => {
                            let w = locator.barycentric(t, p);
                            let tri = mesh.triangles[t];
                            w[0] * v[tri[0]] + w[1] * v[tri[1]] + w[2] * v[tri[2]]
                        }
                    };
                }
            }
        });
    (
        FieldImage { grid: *grid, channels: 1, data },
        BinaryImage { grid: *grid, data: mask },
    )
}

/// Rasterises the three stress components into one 3-channel image.
pub fn rasterize_stress(
    mesh: &TriMesh,
    stress: &StressField,
    grid: &GridSpec,
) -> (FieldImage, BinaryImage) {
    let locator = TriLocator::new(mesh);
    let mut out = FieldImage::zeros(*grid, 3);
    let mut mask = BinaryImage { grid: *grid, data: vec![0; grid.len()] };
    for c in 0..3 {
        let vals: Vec<f64> = stress.s.iter().map(|s| s[c]).collect();
        let (img, m) = rasterize_with(&locator, mesh, FieldValues::PerElement(&vals), grid);
        out.data[c * grid.len()..(c + 1) * grid.len()].copy_from_slice(&img.data);
        if c == 0 {
            mask = m;
        }
    }
    (out, mask)
}

/// Per-pixel Tresca from a 3-channel (xx, yy, xy) tensor image.
pub fn tresca_image(tensor: &FieldImage) -> FieldImage {
    assert_eq!(tensor.channels, 3, "tensor image must have 3 channels");
    let n = tensor.grid.len();
    let mut out = FieldImage::zeros(tensor.grid, 1);
    for i in 0..n {
        let s = StressTensor2D::new(tensor.data[i], tensor.data[n + i], tensor.data[2 * n + i]);
        out.data[i] = tresca(&s);
    }
    out
}
