//! The sliding-window data contract: patch/ROI extraction, input and output
//! scaling, rotation augmentation, dataset persistence, and full-field
//! reconstruction from ROI predictions.
//!
//! Patches are 18R x 18R (72 px) with a centered 8R (32 px) ROI. Extraction
//! slides at half the ROI; reconstruction tiles at the full ROI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{self, FieldImage, StressTensor2D};
use crate::geometry::{BinaryImage, GridSpec};
use crate::io::{self, IoError};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("image extent {0}x{1} smaller than the patch size")]
    ImageTooSmall(usize, usize),
    #[error("images do not share a grid")]
    GridMismatch,
    #[error("all-zero macro stress patch")]
    ZeroStressPatch,
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("reconstruction tiles do not cover the interior")]
    CoverageGap,
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Patch/ROI pixel geometry. Defaults follow R = 4 px: patch 18R, ROI 8R.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_px: usize,
    pub roi_px: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { patch_px: 72, roi_px: 32 }
    }
}

impl PatchGeometry {
    pub fn roi_offset(&self) -> usize {
        (self.patch_px - self.roi_px) / 2
    }

    /// Extraction slides at half the ROI.
    pub fn extract_stride(&self) -> usize {
        self.roi_px / 2
    }

    /// Reconstruction tiles at the full ROI.
    pub fn recon_stride(&self) -> usize {
        self.roi_px
    }

    pub fn validate(&self) {
        assert!(self.roi_px > 0 && self.roi_px < self.patch_px);
        assert!((self.patch_px - self.roi_px) % 2 == 0, "ROI must center in the patch");
        assert!(self.roi_px % 2 == 0, "extraction stride is half the ROI");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub structure_id: u64,
    /// Window origin in image pixel coordinates.
    pub window: (i64, i64),
}

/// One training sample: 4 scaled input channels (3 stress + geometry) and the
/// scaled micro-Tresca target, with the scale factors needed for inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub geom: PatchGeometry,
    /// Channel-major 4 x patch x patch: sigma_xx, sigma_yy, tau_xy, geometry.
    pub input: Vec<f32>,
    /// patch x patch scaled micro Tresca.
    pub target: Vec<f32>,
    /// Input scale: raw stress channels were multiplied by k.
    pub k: f32,
    /// Output intensity scale: raw target was divided by s_out.
    pub s_out: f32,
    pub provenance: Provenance,
}

impl PatchSample {
    pub fn n_px(&self) -> usize {
        self.geom.patch_px * self.geom.patch_px
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.input[c * self.n_px()..(c + 1) * self.n_px()]
    }

    /// Unscaled macro Tresca over the patch, from the scaled input channels.
    pub fn macro_tresca(&self) -> Vec<f64> {
        let n = self.n_px();
        let inv_k = 1.0 / self.k as f64;
        (0..n)
            .map(|i| {
                let s = StressTensor2D::new(
                    self.input[i] as f64 * inv_k,
                    self.input[n + i] as f64 * inv_k,
                    self.input[2 * n + i] as f64 * inv_k,
                );
                fields::tresca(&s)
            })
            .collect()
    }
}

/// Raw (unscaled) patch data cut from the field images.
struct RawPatch {
    stress: [Vec<f64>; 3],
    geometry: Vec<f64>,
    target: Vec<f64>,
}

/// Scales a raw patch: inputs by k = 1 / max |stress component| over the
/// patch, target by s_out = patch max of |s_max| + |s_min|.
pub fn scale_patch(
    stress: [&[f64]; 3],
    geometry: &[f64],
    target: &[f64],
    geom: PatchGeometry,
    provenance: Provenance,
) -> Result<PatchSample, PatchError> {
    let n = geom.patch_px * geom.patch_px;
    assert!(stress.iter().all(|c| c.len() == n) && geometry.len() == n && target.len() == n);
    let mut max_abs = 0.0f64;
    for c in stress.iter() {
        for &v in c.iter() {
            max_abs = max_abs.max(v.abs());
        }
    }
    if max_abs == 0.0 {
        return Err(PatchError::ZeroStressPatch);
    }
    let k = 1.0 / max_abs;
    let mut s_out = 0.0f64;
    for i in 0..n {
        let t = StressTensor2D::new(stress[0][i], stress[1][i], stress[2][i]);
        s_out = s_out.max(fields::abs_principal_sum(&t));
    }
    let mut input = Vec::with_capacity(4 * n);
    for c in stress.iter() {
        input.extend(c.iter().map(|&v| (v * k) as f32));
    }
    input.extend(geometry.iter().map(|&v| v as f32));
    let target: Vec<f32> = target.iter().map(|&v| (v / s_out) as f32).collect();
    Ok(PatchSample { geom, input, target, k: k as f32, s_out: s_out as f32, provenance })
}

/// Multiplies a scaled prediction back to physical units.
pub fn unscale_prediction(scaled: &[f32], s_out: f32) -> Vec<f64> {
    scaled.iter().map(|&v| v as f64 * s_out as f64).collect()
}

/// Window origins for extraction: top-left at the image corner, stride half
/// the ROI. When the image is the fine grid padded by the ROI offset, the
/// ROIs tile the fine domain.
pub fn extraction_windows(nx: usize, ny: usize, geom: PatchGeometry) -> Vec<(usize, usize)> {
    let stride = geom.extract_stride();
    let mut out = Vec::new();
    let mut y = 0;
    while y + geom.patch_px <= ny {
        let mut x = 0;
        while x + geom.patch_px <= nx {
            out.push((x, y));
            x += stride;
        }
        y += stride;
    }
    out
}

/// Interaction length in pixels used by the featureless-discard rule (3R at
/// R = 4 px).
const FEATURE_DILATION_PX: usize = 12;
const FEATURELESS_RANGE_FRACTION: f64 = 0.01;

/// Extracts, filters, and scales every sliding-window patch.
///
/// A window is discarded when its dilated ROI holds no void pixel and the
/// macro stress range over the ROI is below 1% of the patch max. Windows
/// whose stress channels are identically zero are also discarded.
pub fn extract_patches(
    macro_stress: &FieldImage,
    geometry: &BinaryImage,
    micro_tresca: &FieldImage,
    geom: PatchGeometry,
    structure_id: u64,
) -> Result<Vec<PatchSample>, PatchError> {
    geom.validate();
    if macro_stress.channels != 3 || micro_tresca.channels != 1 {
        return Err(PatchError::GridMismatch);
    }
    if macro_stress.grid != geometry.grid || macro_stress.grid != micro_tresca.grid {
        return Err(PatchError::GridMismatch);
    }
    let (nx, ny) = (macro_stress.grid.nx, macro_stress.grid.ny);
    if nx < geom.patch_px || ny < geom.patch_px {
        return Err(PatchError::ImageTooSmall(nx, ny));
    }
    let mut out = Vec::new();
    for (x0, y0) in extraction_windows(nx, ny, geom) {
        let raw = cut_raw(macro_stress, geometry, micro_tresca, geom, x0, y0);
        if is_featureless(&raw, geom) {
            continue;
        }
        match scale_patch(
            [&raw.stress[0], &raw.stress[1], &raw.stress[2]],
            &raw.geometry,
            &raw.target,
            geom,
            Provenance { structure_id, window: (x0 as i64, y0 as i64) },
        ) {
            Ok(sample) => out.push(sample),
            Err(PatchError::ZeroStressPatch) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn cut_raw(
    macro_stress: &FieldImage,
    geometry: &BinaryImage,
    micro_tresca: &FieldImage,
    geom: PatchGeometry,
    x0: usize,
    y0: usize,
) -> RawPatch {
    let p = geom.patch_px;
    let mut raw = RawPatch {
        stress: [vec![0.0; p * p], vec![0.0; p * p], vec![0.0; p * p]],
        geometry: vec![0.0; p * p],
        target: vec![0.0; p * p],
    };
    for yy in 0..p {
        for xx in 0..p {
            let i = yy * p + xx;
            for c in 0..3 {
                raw.stress[c][i] = macro_stress.at(c, x0 + xx, y0 + yy);
            }
            raw.geometry[i] = geometry.at(x0 + xx, y0 + yy) as f64;
            raw.target[i] = micro_tresca.at(0, x0 + xx, y0 + yy);
        }
    }
    raw
}

fn is_featureless(raw: &RawPatch, geom: PatchGeometry) -> bool {
    let p = geom.patch_px;
    let off = geom.roi_offset();
    let d = FEATURE_DILATION_PX;
    let lo = off.saturating_sub(d);
    let hi = (off + geom.roi_px + d).min(p);
    for yy in lo..hi {
        for xx in lo..hi {
            if raw.geometry[yy * p + xx] == 0.0 {
                return false;
            }
        }
    }
    let mut patch_max = 0.0f64;
    for c in 0..3 {
        for &v in &raw.stress[c] {
            patch_max = patch_max.max(v.abs());
        }
    }
    let mut range = 0.0f64;
    for c in 0..3 {
        let mut mn = f64::MAX;
        let mut mx = f64::MIN;
        for yy in off..off + geom.roi_px {
            for xx in off..off + geom.roi_px {
                let v = raw.stress[c][yy * p + xx];
                mn = mn.min(v);
                mx = mx.max(v);
            }
        }
        range = range.max(mx - mn);
    }
    range < FEATURELESS_RANGE_FRACTION * patch_max
}

/// Rotation augmentation: components transform by the closed-form rotation
/// formulas, images rotate about the patch center. Multiples of 90 degrees
/// are exact pixel permutations; other angles resample bilinearly
/// (nearest-neighbor for the geometry channel) with edge clamping. Stress
/// channels are renormalised so the scaled-input bound keeps holding; the
/// Tresca target is rotation-invariant in value, so only its pixels move.
pub fn augment_rotate(sample: &PatchSample, theta: f64) -> PatchSample {
    let p = sample.geom.patch_px;
    let n = p * p;
    let quarter = quarter_turns(theta);

    let sample_positions = |xx: usize, yy: usize| -> (f64, f64) {
        // Pull back the output pixel center through the rotation.
        let c = p as f64 / 2.0;
        let dx = xx as f64 + 0.5 - c;
        let dy = yy as f64 + 0.5 - c;
        let (s, co) = theta.sin_cos();
        (c + co * dx - s * dy, c + s * dx + co * dy)
    };

    let mut input = vec![0.0f32; 4 * n];
    let mut target = vec![0.0f32; n];

    if let Some(q) = quarter {
        // Exact path: pixel permutation plus exact component swaps.
        let map = |xx: usize, yy: usize| -> (usize, usize) {
            // Source index of output pixel (xx, yy) for a rotation by
            // q quarter turns.
            match q {
                0 => (xx, yy),
                1 => (yy, p - 1 - xx),
                2 => (p - 1 - xx, p - 1 - yy),
                _ => (p - 1 - yy, xx),
            }
        };
        for yy in 0..p {
            for xx in 0..p {
                let (sx, sy) = map(xx, yy);
                let si = sy * p + sx;
                let di = yy * p + xx;
                let (sxx, syy, txy) =
                    (sample.input[si], sample.input[n + si], sample.input[2 * n + si]);
                let (rxx, ryy, rxy) = match q {
                    0 => (sxx, syy, txy),
                    1 => (syy, sxx, -txy),
                    2 => (sxx, syy, txy),
                    _ => (syy, sxx, -txy),
                };
                input[di] = rxx;
                input[n + di] = ryy;
                input[2 * n + di] = rxy;
                input[3 * n + di] = sample.input[3 * n + si];
                target[di] = sample.target[si];
            }
        }
        return PatchSample {
            geom: sample.geom,
            input,
            target,
            k: sample.k,
            s_out: sample.s_out,
            provenance: sample.provenance,
        };
    }

    let bilinear = |chan: &[f32], x: f64, y: f64| -> f64 {
        let xc = (x - 0.5).clamp(0.0, (p - 1) as f64);
        let yc = (y - 0.5).clamp(0.0, (p - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(p - 1);
        let y1 = (y0 + 1).min(p - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let v00 = chan[y0 * p + x0] as f64;
        let v10 = chan[y0 * p + x1] as f64;
        let v01 = chan[y1 * p + x0] as f64;
        let v11 = chan[y1 * p + x1] as f64;
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
    };
    let nearest = |chan: &[f32], x: f64, y: f64| -> f32 {
        let xi = (x - 0.5).round().clamp(0.0, (p - 1) as f64) as usize;
        let yi = (y - 0.5).round().clamp(0.0, (p - 1) as f64) as usize;
        chan[yi * p + xi]
    };

    let mut max_abs = 0.0f64;
    let mut rotated = vec![0.0f64; 3 * n];
    for yy in 0..p {
        for xx in 0..p {
            let (sx, sy) = sample_positions(xx, yy);
            let di = yy * p + xx;
            let s = StressTensor2D::new(
                bilinear(sample.channel(0), sx, sy),
                bilinear(sample.channel(1), sx, sy),
                bilinear(sample.channel(2), sx, sy),
            );
            let r = fields::rotate_stress(&s, theta);
            rotated[di] = r.s_xx;
            rotated[n + di] = r.s_yy;
            rotated[2 * n + di] = r.t_xy;
            max_abs = max_abs.max(r.s_xx.abs()).max(r.s_yy.abs()).max(r.t_xy.abs());
            input[3 * n + di] = nearest(sample.channel(3), sx, sy);
            target[di] = bilinear(&sample.target, sx, sy) as f32;
        }
    }
    let renorm = if max_abs > 0.0 { 1.0 / max_abs } else { 1.0 };
    for i in 0..3 * n {
        input[i] = (rotated[i] * renorm) as f32;
    }
    PatchSample {
        geom: sample.geom,
        input,
        target,
        k: (sample.k as f64 * renorm) as f32,
        s_out: sample.s_out,
        provenance: sample.provenance,
    }
}

fn quarter_turns(theta: f64) -> Option<u8> {
    let turns = theta / std::f64::consts::FRAC_PI_2;
    let rounded = turns.round();
    if (turns - rounded).abs() < 1e-12 {
        Some(rounded.rem_euclid(4.0) as u8 % 4)
    } else {
        None
    }
}

/// Appends `n_rotations` rotated copies of each sample (angles k*2pi/n,
/// k = 1..n) to the original set.
pub fn augment_dataset(samples: &[PatchSample], n_rotations: usize) -> Vec<PatchSample> {
    let mut out = samples.to_vec();
    for k in 1..=n_rotations {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n_rotations as f64;
        out.extend(samples.iter().map(|s| augment_rotate(s, theta)));
    }
    out
}

/// One reconstruction window: where the patch sits in the image, and which
/// part of the predicted ROI lands where.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconWindow {
    /// Patch origin in image pixels.
    pub patch: (usize, usize),
    /// Destination rectangle in image pixels (half-open).
    pub dst: (usize, usize, usize, usize),
    /// Source offset within the predicted ROI.
    pub src: (usize, usize),
}

/// Tiles the grid interior (inset by the ROI offset) with ROI-sized tiles;
/// edge windows clamp inward and keep only not-yet-covered pixels.
pub fn tile_for_reconstruction(
    grid: &GridSpec,
    geom: PatchGeometry,
) -> Result<Vec<ReconWindow>, PatchError> {
    geom.validate();
    if grid.nx < geom.patch_px || grid.ny < geom.patch_px {
        return Err(PatchError::ImageTooSmall(grid.nx, grid.ny));
    }
    let axis = |extent: usize| -> Vec<(usize, usize, usize)> {
        // (dst_start, dst_end, patch_origin)
        let off = geom.roi_offset();
        let stride = geom.recon_stride();
        let hi = extent - off;
        let mut spans = Vec::new();
        let mut start = off;
        while start + stride <= hi {
            spans.push((start, start + stride, start - off));
            start += stride;
        }
        if start < hi {
            // Clamp the last window inward; keep only uncovered pixels.
            let patch_origin = hi - stride - off;
            spans.push((start, hi, patch_origin));
        }
        spans
    };
    let xs = axis(grid.nx);
    let ys = axis(grid.ny);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &(y0, y1, py) in &ys {
        for &(x0, x1, px) in &xs {
            out.push(ReconWindow {
                patch: (px, py),
                dst: (x0, y0, x1, y1),
                src: (x0 - (px + geom.roi_offset()), y0 - (py + geom.roi_offset())),
            });
        }
    }
    Ok(out)
}

/// Pastes per-window ROI predictions (each roi_px x roi_px, already
/// unscaled) into a full-field image over `grid`.
pub fn reconstruct(
    roi_predictions: &[Vec<f64>],
    windows: &[ReconWindow],
    grid: &GridSpec,
    geom: PatchGeometry,
) -> Result<FieldImage, PatchError> {
    assert_eq!(roi_predictions.len(), windows.len(), "one prediction per window");
    let mut img = FieldImage::zeros(*grid, 1);
    let mut covered = vec![false; grid.len()];
    for (pred, win) in roi_predictions.iter().zip(windows) {
        assert_eq!(pred.len(), geom.roi_px * geom.roi_px);
        let (x0, y0, x1, y1) = win.dst;
        for yy in y0..y1 {
            for xx in x0..x1 {
                let sx = win.src.0 + (xx - x0);
                let sy = win.src.1 + (yy - y0);
                img.set(0, xx, yy, pred[sy * geom.roi_px + sx]);
                covered[yy * grid.nx + xx] = true;
            }
        }
    }
    // The declared interior must be exactly covered.
    let off = geom.roi_offset();
    for yy in off..grid.ny - off {
        for xx in off..grid.nx - off {
            if !covered[yy * grid.nx + xx] {
                return Err(PatchError::CoverageGap);
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

/// Self-describing dataset directory contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub patch_px: usize,
    pub roi_px: usize,
    pub channel_order: Vec<String>,
    pub dtype: String,
    pub family: String,
    pub inputs: ArrayEntry,
    pub targets: ArrayEntry,
    pub scales: ArrayEntry,
    pub generation_seeds: Vec<u64>,
}

impl DatasetManifest {
    pub fn new(count: usize, geom: PatchGeometry, family: &str, seeds: Vec<u64>) -> Self {
        Self {
            version: 1,
            count,
            patch_px: geom.patch_px,
            roi_px: geom.roi_px,
            channel_order: vec![
                "sigma_xx".into(),
                "sigma_yy".into(),
                "tau_xy".into(),
                "geometry".into(),
            ],
            dtype: "f32le".into(),
            family: family.into(),
            inputs: ArrayEntry {
                file: "inputs.f32".into(),
                shape: vec![count, 4, geom.patch_px, geom.patch_px],
            },
            targets: ArrayEntry {
                file: "targets.f32".into(),
                shape: vec![count, geom.patch_px, geom.patch_px],
            },
            scales: ArrayEntry { file: "scales.f32".into(), shape: vec![count, 2] },
            generation_seeds: seeds,
        }
    }

    fn geometry(&self) -> PatchGeometry {
        PatchGeometry { patch_px: self.patch_px, roi_px: self.roi_px }
    }
}

pub fn write_dataset(
    samples: &[PatchSample],
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<(), PatchError> {
    if manifest.count != samples.len() {
        return Err(PatchError::ManifestMismatch(format!(
            "manifest count {} vs {} samples",
            manifest.count,
            samples.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(IoError::from)?;
    let n_px = manifest.patch_px * manifest.patch_px;
    let mut inputs = Vec::with_capacity(samples.len() * 4 * n_px);
    let mut targets = Vec::with_capacity(samples.len() * n_px);
    let mut scales = Vec::with_capacity(samples.len() * 2);
    let mut provenance = Vec::with_capacity(samples.len());
    for s in samples {
        inputs.extend_from_slice(&s.input);
        targets.extend_from_slice(&s.target);
        scales.push(s.k);
        scales.push(s.s_out);
        provenance.push(s.provenance);
    }
    io::write_f32(&dir.join(&manifest.inputs.file), &inputs)?;
    io::write_f32(&dir.join(&manifest.targets.file), &targets)?;
    io::write_f32(&dir.join(&manifest.scales.file), &scales)?;
    io::write_json(&dir.join("manifest.json"), manifest)?;
    io::write_json(&dir.join("provenance.json"), &provenance)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<PatchSample>, DatasetManifest), PatchError> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    let geom = manifest.geometry();
    geom.validate();
    let n_px = manifest.patch_px * manifest.patch_px;
    let expect = |entry: &ArrayEntry, want: &[usize]| -> Result<usize, PatchError> {
        if entry.shape != want {
            return Err(PatchError::ManifestMismatch(format!(
                "array {} shape {:?}, expected {:?}",
                entry.file, entry.shape, want
            )));
        }
        Ok(want.iter().product())
    };
    let n_in = expect(&manifest.inputs, &[manifest.count, 4, manifest.patch_px, manifest.patch_px])?;
    let n_tg = expect(&manifest.targets, &[manifest.count, manifest.patch_px, manifest.patch_px])?;
    let n_sc = expect(&manifest.scales, &[manifest.count, 2])?;
    let inputs = io::read_f32(&dir.join(&manifest.inputs.file), n_in)
        .map_err(|e| PatchError::ManifestMismatch(e.to_string()))?;
    let targets = io::read_f32(&dir.join(&manifest.targets.file), n_tg)
        .map_err(|e| PatchError::ManifestMismatch(e.to_string()))?;
    let scales = io::read_f32(&dir.join(&manifest.scales.file), n_sc)
        .map_err(|e| PatchError::ManifestMismatch(e.to_string()))?;
    let provenance: Vec<Provenance> = io::read_json(&dir.join("provenance.json"))?;
    if provenance.len() != manifest.count {
        return Err(PatchError::ManifestMismatch("provenance count".into()));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        samples.push(PatchSample {
            geom,
            input: inputs[i * 4 * n_px..(i + 1) * 4 * n_px].to_vec(),
            target: targets[i * n_px..(i + 1) * n_px].to_vec(),
            k: scales[2 * i],
            s_out: scales[2 * i + 1],
            provenance: provenance[i],
        });
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn grid(nx: usize, ny: usize) -> GridSpec {
        GridSpec::new([0.0, 0.0], 1.0, nx, ny)
    }

    fn uniform_images(
        nx: usize,
        ny: usize,
        stress: [f64; 3],
    ) -> (FieldImage, BinaryImage, FieldImage) {
        let g = grid(nx, ny);
        let mut m = FieldImage::zeros(g, 3);
        for c in 0..3 {
            for i in 0..g.len() {
                m.data[c * g.len() + i] = stress[c];
            }
        }
        let geo = BinaryImage { grid: g, data: vec![1; g.len()] };
        let t = crate::fields::tresca_image(&m);
        (m, geo, t)
    }

    #[test]
    fn featureless_homogeneous_image_yields_nothing() {
        let (m, g, t) = uniform_images(104, 104, [1.0, 0.2, 0.1]);
        let got = extract_patches(&m, &g, &t, PatchGeometry::default(), 0).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn candidate_window_count_is_arithmetic() {
        assert_eq!(extraction_windows(104, 104, PatchGeometry::default()).len(), 9);
        assert_eq!(extraction_windows(72, 72, PatchGeometry::default()).len(), 1);
    }

    #[test]
    fn pore_windows_match_brute_force_rule() {
        // One void pixel blob at the image center; retained windows must be
        // exactly those whose dilated ROI touches it.
        let (m, mut g, t) = uniform_images(136, 136, [1.0, 0.0, 0.0]);
        let void_px = (68usize, 68usize);
        g.data[void_px.1 * 136 + void_px.0] = 0;
        let geom = PatchGeometry::default();
        let got = extract_patches(&m, &g, &t, geom, 0).unwrap();
        let mut expect = Vec::new();
        for (x0, y0) in extraction_windows(136, 136, geom) {
            let lo = geom.roi_offset() - FEATURE_DILATION_PX;
            let hi = geom.roi_offset() + geom.roi_px + FEATURE_DILATION_PX;
            let in_x = void_px.0 >= x0 + lo && void_px.0 < x0 + hi;
            let in_y = void_px.1 >= y0 + lo && void_px.1 < y0 + hi;
            if in_x && in_y {
                expect.push((x0 as i64, y0 as i64));
            }
        }
        let got_windows: Vec<(i64, i64)> = got.iter().map(|s| s.provenance.window).collect();
        assert_eq!(got_windows, expect);
        assert!(!expect.is_empty());
    }

    #[test]
    fn scaling_known_cases() {
        let geom = PatchGeometry::default();
        let n = geom.patch_px * geom.patch_px;
        let prov = Provenance { structure_id: 0, window: (0, 0) };
        // max |component| = 5 -> k = 0.2
        let s = [vec![5.0; n], vec![1.0; n], vec![0.0; n]];
        let sample =
            scale_patch([&s[0], &s[1], &s[2]], &vec![1.0; n], &vec![2.5; n], geom, prov).unwrap();
        assert!((sample.k - 0.2).abs() < 1e-7);
        let max_in = sample.input[..3 * n].iter().cloned().fold(f32::MIN, f32::max);
        assert!((max_in - 1.0).abs() < 1e-6);
        // uniaxial unit macro field: s_out = 1, scaled far-field Tresca 0.5
        let s = [vec![1.0; n], vec![0.0; n], vec![0.0; n]];
        let tresca = vec![0.5; n];
        let sample = scale_patch([&s[0], &s[1], &s[2]], &vec![1.0; n], &tresca, geom, prov).unwrap();
        assert!((sample.s_out - 1.0).abs() < 1e-7);
        assert!((sample.target[0] - 0.5).abs() < 1e-7);
        // all-zero stress is rejected
        let z = vec![0.0; n];
        assert!(matches!(
            scale_patch([&z, &z, &z], &vec![1.0; n], &z, geom, prov),
            Err(PatchError::ZeroStressPatch)
        ));
    }

    #[test]
    fn doubling_raw_stress_leaves_scaled_data_unchanged() {
        let geom = PatchGeometry::default();
        let n = geom.patch_px * geom.patch_px;
        let prov = Provenance { structure_id: 0, window: (0, 0) };
        let mut r = stream_rng(3, 9);
        let s: [Vec<f64>; 3] = std::array::from_fn(|_| {
            (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
        });
        let tgt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
        let geo = vec![1.0; n];
        let a = scale_patch([&s[0], &s[1], &s[2]], &geo, &tgt, geom, prov).unwrap();
        let s2: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|v| 2.0 * v).collect()).collect();
        let t2: Vec<f64> = tgt.iter().map(|v| 2.0 * v).collect();
        let b = scale_patch([&s2[0], &s2[1], &s2[2]], &geo, &t2, geom, prov).unwrap();
        assert!((b.k - a.k / 2.0).abs() < 1e-9);
        assert!((b.s_out - a.s_out * 2.0).abs() < 1e-5 * a.s_out.abs());
        for (x, y) in a.input.iter().zip(&b.input) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.target.iter().zip(&b.target) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn unscale_round_trip() {
        let scaled = vec![0.0f32, 0.5, 1.25];
        let back = unscale_prediction(&scaled, 4.0);
        assert_eq!(back, vec![0.0, 2.0, 5.0]);
        assert_eq!(unscale_prediction(&scaled, 1.0), vec![0.0, 0.5, 1.25]);
    }

    fn random_sample(seed: u64) -> PatchSample {
        let geom = PatchGeometry::default();
        let n = geom.patch_px * geom.patch_px;
        let mut r = stream_rng(seed, 1);
        let s: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect());
        let geo: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < 0.1 { 0.0 } else { 1.0 }).collect();
        let tgt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        scale_patch(
            [&s[0], &s[1], &s[2]],
            &geo,
            &tgt,
            geom,
            Provenance { structure_id: seed, window: (0, 0) },
        )
        .unwrap()
    }

    #[test]
    fn rotation_zero_is_identity() {
        let s = random_sample(5);
        let r = augment_rotate(&s, 0.0);
        assert_eq!(s, r);
    }

    #[test]
    fn quarter_rotation_swaps_uniaxial_axes() {
        let geom = PatchGeometry::default();
        let n = geom.patch_px * geom.patch_px;
        let s = [vec![1.0; n], vec![0.0; n], vec![0.0; n]];
        let sample = scale_patch(
            [&s[0], &s[1], &s[2]],
            &vec![1.0; n],
            &vec![0.5; n],
            geom,
            Provenance { structure_id: 0, window: (0, 0) },
        )
        .unwrap();
        let r = augment_rotate(&sample, std::f64::consts::FRAC_PI_2);
        assert!(r.channel(0).iter().all(|&v| v == 0.0));
        assert!(r.channel(1).iter().all(|&v| v == 1.0));
        assert!(r.channel(2).iter().all(|&v| v == 0.0));
        assert_eq!(r.target, sample.target);
    }

    #[test]
    fn half_turn_is_involution() {
        let s = random_sample(7);
        let r2 = augment_rotate(&augment_rotate(&s, std::f64::consts::PI), std::f64::consts::PI);
        assert_eq!(s, r2);
    }

    #[test]
    fn four_quarter_turns_are_bitwise_identity() {
        let s = random_sample(9);
        let mut r = s.clone();
        for _ in 0..4 {
            r = augment_rotate(&r, std::f64::consts::FRAC_PI_2);
        }
        assert_eq!(s.input, r.input);
        assert_eq!(s.target, r.target);
        assert_eq!(s.k.to_bits(), r.k.to_bits());
    }

    #[test]
    fn reconstruction_tiles_partition_interior() {
        let geom = PatchGeometry::default();
        for (nx, ny) in [(72usize, 72usize), (104, 72), (440, 120), (400, 80)] {
            let g = grid(nx, ny);
            let wins = tile_for_reconstruction(&g, geom).unwrap();
            let mut count = vec![0u8; g.len()];
            for w in &wins {
                for yy in w.dst.1..w.dst.3 {
                    for xx in w.dst.0..w.dst.2 {
                        count[yy * nx + xx] += 1;
                    }
                }
            }
            let off = geom.roi_offset();
            for yy in 0..ny {
                for xx in 0..nx {
                    let interior =
                        xx >= off && xx < nx - off && yy >= off && yy < ny - off;
                    assert_eq!(
                        count[yy * nx + xx],
                        interior as u8,
                        "pixel ({xx},{yy}) on {nx}x{ny}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_window_for_exact_patch() {
        let wins = tile_for_reconstruction(&grid(72, 72), PatchGeometry::default()).unwrap();
        assert_eq!(wins.len(), 1);
        assert_eq!(wins[0].patch, (0, 0));
        assert_eq!(wins[0].dst, (20, 20, 52, 52));
    }

    #[test]
    fn two_windows_for_72x104() {
        let wins = tile_for_reconstruction(&grid(104, 72), PatchGeometry::default()).unwrap();
        assert_eq!(wins.len(), 2);
        // ROIs disjoint, patches overlap only in margins.
        assert_eq!(wins[0].dst, (20, 20, 52, 52));
        assert_eq!(wins[1].dst, (52, 20, 84, 52));
    }

    #[test]
    fn identity_stitching_reproduces_truth() {
        let geom = PatchGeometry::default();
        let g = grid(136, 104);
        let mut truth = FieldImage::zeros(g, 1);
        for i in 0..g.len() {
            truth.data[i] = (i % 97) as f64 * 0.03;
        }
        let wins = tile_for_reconstruction(&g, geom).unwrap();
        let preds: Vec<Vec<f64>> = wins
            .iter()
            .map(|w| {
                let mut roi = vec![0.0; geom.roi_px * geom.roi_px];
                let off = geom.roi_offset();
                for yy in 0..geom.roi_px {
                    for xx in 0..geom.roi_px {
                        let gx = w.patch.0 + off + xx;
                        let gy = w.patch.1 + off + yy;
                        roi[yy * geom.roi_px + xx] = truth.at(0, gx, gy);
                    }
                }
                roi
            })
            .collect();
        let rec = reconstruct(&preds, &wins, &g, geom).unwrap();
        let off = geom.roi_offset();
        for yy in off..g.ny - off {
            for xx in off..g.nx - off {
                assert_eq!(rec.at(0, xx, yy), truth.at(0, xx, yy));
            }
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let samples: Vec<PatchSample> = (0..10).map(random_sample).collect();
        let manifest = DatasetManifest::new(10, PatchGeometry::default(), "one_ellipse", vec![1, 2]);
        let dir = std::env::temp_dir().join("microstress_patchset_rt");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&samples, &manifest, &dir).unwrap();
        let (back, m2) = read_dataset(&dir).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(samples.len(), back.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.target, b.target);
            assert_eq!(a.k.to_bits(), b.k.to_bits());
            assert_eq!(a.s_out.to_bits(), b.s_out.to_bits());
            assert_eq!(a.provenance, b.provenance);
        }
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let samples: Vec<PatchSample> = (0..3).map(random_sample).collect();
        let manifest = DatasetManifest::new(3, PatchGeometry::default(), "one_ellipse", vec![]);
        let dir = std::env::temp_dir().join("microstress_patchset_trunc");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&samples, &manifest, &dir).unwrap();
        // Truncate the inputs array.
        let path = dir.join("inputs.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(&dir), Err(PatchError::ManifestMismatch(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let manifest = DatasetManifest::new(0, PatchGeometry::default(), "one_ellipse", vec![]);
        let dir = std::env::temp_dir().join("microstress_patchset_empty");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&[], &manifest, &dir).unwrap();
        let (back, m2) = read_dataset(&dir).unwrap();
        assert!(back.is_empty());
        assert_eq!(m2.count, 0);
    }
}
