//! The 3D feature space: pyramid levels placed in a shared `s_base` frame at
//! `z = log₂(stride / s_base)`, sampled bilinearly in `(x, y)` and blended
//! across levels with gaussian weights in `z`.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default z-interpolation softness.
pub const DEFAULT_TAU_Z: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    /// `[height × width × d_feat]`.
    pub values: Tensor,
}

impl FeatureLevel {
    pub fn new(stride: u32, height: usize, width: usize, values: Tensor) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err("feature level needs at least one cell");
        }
        if !values.len().is_multiple_of(height * width) {
            return shape_err(format!("{} values do not tile a {height}x{width} level", values.len()));
        }
        let d = values.len() / (height * width);
        let values = values.reshape(&[height, width, d])?;
        Ok(Self {
            stride,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    fn cell(&self, iy: usize, ix: usize) -> &[f64] {
        let d = self.channels();
        let off = (iy * self.width + ix) * d;
        &self.values.data()[off..off + d]
    }
}

/// Ordered multi-level feature maps sharing one channel width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub s_base: u32,
    pub d_feat: usize,
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn new(s_base: u32, levels: Vec<FeatureLevel>) -> Result<Self> {
        if s_base == 0 {
            return config_err("s_base must be positive");
        }
        let Some(first) = levels.first() else {
            return config_err("pyramid needs at least one level");
        };
        let d_feat = first.channels();
        for (k, level) in levels.iter().enumerate() {
            level_z(level.stride as f64, s_base as f64)?;
            if level.channels() != d_feat {
                return shape_err(format!(
                    "level {k} has {} channels, expected {d_feat}",
                    level.channels()
                ));
            }
            if k > 0 && level.stride <= levels[k - 1].stride {
                return config_err("level strides must strictly increase");
            }
            level.values.ensure_finite("feature level")?;
        }
        Ok(Self { s_base, d_feat, levels })
    }

    pub fn level_zs(&self) -> Vec<f64> {
        self.levels
            .iter()
            .map(|l| (l.stride as f64 / self.s_base as f64).log2())
            .collect()
    }

    /// Zeroed buffers shaped like each level's values.
    pub fn zeros_like_values(&self) -> Vec<Tensor> {
        self.levels.iter().map(|l| Tensor::zeros(l.values.shape())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PyramidFile {
            s_base: self.s_base,
            d_feat: self.d_feat,
            levels: self
                .levels
                .iter()
                .map(|l| LevelFile {
                    stride: l.stride,
                    h: l.height,
                    w: l.width,
                    data: l.values.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PyramidFile = serde_json::from_str(text)?;
        let levels = file
            .levels
            .into_iter()
            .map(|l| {
                if l.data.len() != l.h * l.w * file.d_feat {
                    return shape_err(format!(
                        "level with stride {} has {} values, expected {}",
                        l.stride,
                        l.data.len(),
                        l.h * l.w * file.d_feat
                    ));
                }
                FeatureLevel::new(l.stride, l.h, l.w, Tensor::new(vec![l.h, l.w, file.d_feat], l.data)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let pyr = Self::new(file.s_base, levels)?;
        if pyr.d_feat != file.d_feat {
            return shape_err("d_feat does not match level data");
        }
        Ok(pyr)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct PyramidFile {
    s_base: u32,
    d_feat: usize,
    levels: Vec<LevelFile>,
}

#[derive(Serialize, Deserialize)]
struct LevelFile {
    stride: u32,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

/// `log₂(stride / s_base)`; the ratio must be a power of two ≥ 1.
pub fn level_z(stride: f64, s_base: f64) -> Result<f64> {
    if !(stride > 0.0 && s_base > 0.0) || stride < s_base {
        return config_err(format!("stride {stride} must be ≥ s_base {s_base} > 0"));
    }
    let z = (stride / s_base).log2();
    if z.fract() != 0.0 {
        return config_err(format!("stride {stride} is not s_base·2^k for s_base {s_base}"));
    }
    Ok(z)
}

/// Corner indices and blend weights of one bilinear lookup.
struct Bilinear {
    ix: [usize; 2],
    iy: [usize; 2],
    fx: f64,
    fy: f64,
    /// d(local u)/d(x̃), equal to d(local v)/d(ỹ).
    scale: f64,
}

impl Bilinear {
    fn locate(level: &FeatureLevel, s_base: u32, x: f64, y: f64) -> Self {
        let scale = s_base as f64 / level.stride as f64;
        let u = x * scale - 0.5;
        let v = y * scale - 0.5;
        let (u0, v0) = (u.floor(), v.floor());
        let clamp = |i: f64, n: usize| -> usize { i.max(0.0).min((n - 1) as f64) as usize };
        Self {
            ix: [clamp(u0, level.width), clamp(u0 + 1.0, level.width)],
            iy: [clamp(v0, level.height), clamp(v0 + 1.0, level.height)],
            fx: u - u0,
            fy: v - v0,
            scale,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    fn corners(&self) -> [(usize, usize); 4] {
        [
            (self.iy[0], self.ix[0]),
            (self.iy[0], self.ix[1]),
            (self.iy[1], self.ix[0]),
            (self.iy[1], self.ix[1]),
        ]
    }
}

fn bilinear_into(level: &FeatureLevel, s_base: u32, x: f64, y: f64, ch: Range<usize>, scale_by: f64, out: &mut [f64]) {
    let b = Bilinear::locate(level, s_base, x, y);
    for (w, (iy, ix)) in b.weights().into_iter().zip(b.corners()) {
        let cell = &level.cell(iy, ix)[ch.clone()];
        let w = w * scale_by;
        for (o, v) in out.iter_mut().zip(cell) {
            *o += w * v;
        }
    }
}

/// Bilinear lookup of all channels at `(x̃, ỹ)` in the `s_base` frame. Cell
/// centers sit at integer local coordinates; out-of-range lookups clamp to
/// the border cells.
pub fn bilinear_sample(level: &FeatureLevel, s_base: u32, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; level.channels()];
    bilinear_into(level, s_base, x, y, 0..level.channels(), 1.0, &mut out);
    out
}

/// Backward of a bilinear lookup over channels `ch`, with each output scaled
/// by `scale_by`. Accumulates value gradients into `grad_values` (shaped like
/// `level.values`) when given; returns `(∂/∂x̃, ∂/∂ỹ)`.
pub fn bilinear_backward(
    level: &FeatureLevel,
    s_base: u32,
    x: f64,
    y: f64,
    ch: Range<usize>,
    scale_by: f64,
    grad_out: &[f64],
    grad_values: Option<&mut Tensor>,
) -> (f64, f64) {
    let b = Bilinear::locate(level, s_base, x, y);
    let d = level.channels();
    // <g, v> at each corner
    let mut gv = [0.0; 4];
    for (k, (iy, ix)) in b.corners().into_iter().enumerate() {
        let cell = &level.cell(iy, ix)[ch.clone()];
        gv[k] = cell.iter().zip(grad_out).map(|(v, g)| v * g).sum::<f64>() * scale_by;
    }
    if let Some(gvals) = grad_values {
        for (w, (iy, ix)) in b.weights().into_iter().zip(b.corners()) {
            let off = (iy * level.width + ix) * d;
            let dst = &mut gvals.data_mut()[off + ch.start..off + ch.end];
            for (o, g) in dst.iter_mut().zip(grad_out) {
                *o += w * scale_by * g;
            }
        }
    }
    let (fx, fy) = (b.fx, b.fy);
    let du = (1.0 - fy) * (gv[1] - gv[0]) + fy * (gv[3] - gv[2]);
    let dv = (1.0 - fx) * (gv[2] - gv[0]) + fx * (gv[3] - gv[1]);
    (du * b.scale, dv * b.scale)
}

/// Normalized `exp(-(z̃ - z_j)²/τ)` over the given level coordinates.
pub fn gauss_z_weights(z: f64, level_zs: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = level_zs.iter().map(|zj| -(z - zj).powi(2) / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `∂/∂z̃ Σ_j grad_j · w_j(z̃)`.
pub fn gauss_z_weights_backward(z: f64, level_zs: &[f64], tau: f64, grad: &[f64]) -> f64 {
    let w = gauss_z_weights(z, level_zs, tau);
    let mean: f64 = w.iter().zip(grad).map(|(a, b)| a * b).sum();
    w.iter()
        .zip(grad)
        .zip(level_zs)
        .map(|((wj, gj), zj)| wj * (gj - mean) * (-2.0 * (z - zj) / tau))
        .sum()
}

/// Gaussian-in-z blend of per-level bilinear lookups over channels `ch`.
pub fn sample_point_3d(pyr: &FeaturePyramid, x: f64, y: f64, z: f64, tau: f64, ch: Range<usize>) -> Vec<f64> {
    let w = gauss_z_weights(z, &pyr.level_zs(), tau);
    let mut out = vec![0.0; ch.len()];
    for (level, wj) in pyr.levels.iter().zip(w) {
        bilinear_into(level, pyr.s_base, x, y, ch.clone(), wj, &mut out);
    }
    out
}

/// Backward of [`sample_point_3d`]; returns `[∂x̃, ∂ỹ, ∂z̃]` and accumulates
/// value gradients per level into `grad_values` when given.
pub fn sample_point_3d_backward(
    pyr: &FeaturePyramid,
    x: f64,
    y: f64,
    z: f64,
    tau: f64,
    ch: Range<usize>,
    grad_out: &[f64],
    mut grad_values: Option<&mut [Tensor]>,
) -> [f64; 3] {
    let zs = pyr.level_zs();
    let w = gauss_z_weights(z, &zs, tau);
    let mut gx = 0.0;
    let mut gy = 0.0;
    let mut gw = vec![0.0; zs.len()];
    let mut tmp = vec![0.0; ch.len()];
    for (j, level) in pyr.levels.iter().enumerate() {
        let gvals = grad_values.as_deref_mut().map(|g| &mut g[j]);
        let (dx, dy) = bilinear_backward(level, pyr.s_base, x, y, ch.clone(), w[j], grad_out, gvals);
        gx += dx;
        gy += dy;
        tmp.iter_mut().for_each(|t| *t = 0.0);
        bilinear_into(level, pyr.s_base, x, y, ch.clone(), 1.0, &mut tmp);
        gw[j] = tmp.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    }
    [gx, gy, gauss_z_weights_backward(z, &zs, tau, &gw)]
}

/// Validates that a channel range lies inside the pyramid.
pub(crate) fn check_channels(pyr: &FeaturePyramid, ch: &Range<usize>) -> Result<()> {
    if ch.end > pyr.d_feat || ch.start > ch.end {
        return Err(Error::Shape(format!(
            "channel range {ch:?} outside d_feat {}",
            pyr.d_feat
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(stride: u32, h: usize, w: usize, vals: Vec<f64>) -> FeatureLevel {
        let d = vals.len() / (h * w);
        FeatureLevel::new(stride, h, w, Tensor::new(vec![h, w, d], vals).unwrap()).unwrap()
    }

    #[test]
    fn level_z_examples() {
        assert_eq!(level_z(4.0, 4.0).unwrap(), 0.0);
        assert_eq!(level_z(32.0, 4.0).unwrap(), 3.0);
        assert_eq!(level_z(8.0, 4.0).unwrap(), 1.0);
        assert!(matches!(level_z(12.0, 4.0), Err(Error::Config(_))));
        assert!(level_z(2.0, 4.0).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let l = level(4, 2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&l, 4, 1.0, 1.0), vec![1.5]);
        assert_eq!(bilinear_sample(&l, 4, 0.5, 0.5), vec![0.0]);
        let one = level(8, 1, 1, vec![4.25, -1.0]);
        for (x, y) in [(-3.0, 2.0), (0.3, 0.9), (100.0, -40.0)] {
            assert_eq!(bilinear_sample(&one, 4, x, y), vec![4.25, -1.0]);
        }
    }

    #[test]
    fn gauss_examples() {
        let zs = [0.0, 1.0, 2.0, 3.0];
        let w = gauss_z_weights(1.5, &zs, 2.0);
        assert!((w[0] - w[3]).abs() < 1e-15 && (w[1] - w[2]).abs() < 1e-15);
        assert_eq!(gauss_z_weights(0.7, &[2.0], 2.0), vec![1.0]);
        let w = gauss_z_weights(0.0, &zs, 2.0);
        let raw = [1.0, (-0.5f64).exp(), (-2.0f64).exp(), (-4.5f64).exp()];
        let s: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(raw) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_pyramid_is_constant() {
        let a = level(4, 3, 3, vec![2.5; 9]);
        let b = level(8, 2, 2, vec![2.5; 4]);
        let pyr = FeaturePyramid::new(4, vec![a, b]).unwrap();
        for (x, y, z) in [(0.1, 0.2, -3.0), (5.0, 1.0, 0.4), (-2.0, 9.0, 7.0)] {
            assert_eq!(sample_point_3d(&pyr, x, y, z, 2.0, 0..1), vec![2.5]);
        }
    }

    #[test]
    fn two_level_midpoint() {
        let a = level(4, 2, 2, vec![1.0; 4]);
        let b = level(8, 1, 1, vec![5.0]);
        let pyr = FeaturePyramid::new(4, vec![a, b]).unwrap();
        let v = sample_point_3d(&pyr, 0.7, 0.3, 0.5, 2.0, 0..1)[0];
        assert!((v - 3.0).abs() < 1e-15);
        let v = sample_point_3d(&pyr, 0.7, 0.3, 0.0, 2.0, 0..1)[0];
        let wb = (-0.5f64).exp() / (1.0 + (-0.5f64).exp());
        assert!((v - (1.0 * (1.0 - wb) + 5.0 * wb)).abs() < 1e-14);
    }

    #[test]
    fn single_level_equals_bilinear() {
        let l = level(8, 2, 3, (0..12).map(|v| v as f64 * 0.3).collect());
        let pyr = FeaturePyramid::new(4, vec![l.clone()]).unwrap();
        let got = sample_point_3d(&pyr, 3.3, 1.7, 4.0, 2.0, 0..2);
        assert_eq!(got, bilinear_sample(&l, 4, 3.3, 1.7));
    }

    #[test]
    fn pyramid_validation() {
        let a = level(4, 1, 1, vec![0.0; 2]);
        let b = level(4, 1, 1, vec![0.0; 2]);
        assert!(FeaturePyramid::new(4, vec![a.clone(), b]).is_err());
        let c = level(8, 1, 1, vec![0.0; 3]);
        assert!(FeaturePyramid::new(4, vec![a.clone(), c]).is_err());
        let d = level(12, 1, 1, vec![0.0; 2]);
        assert!(FeaturePyramid::new(4, vec![a, d]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let a = level(4, 2, 2, vec![0.1, -2.0, 3.5, 1e-300, 7.0, 8.0, 9.0, 10.0]);
        let b = level(8, 1, 1, vec![0.25, 0.5]);
        let pyr = FeaturePyramid::new(4, vec![a, b]).unwrap();
        let text = pyr.to_json().unwrap();
        let back = FeaturePyramid::from_json(&text).unwrap();
        assert_eq!(back, pyr);
        assert_eq!(back.to_json().unwrap(), text);
        let bad = text.replace("\"d_feat\":2", "\"d_feat\":3");
        assert!(FeaturePyramid::from_json(&bad).is_err());
    }
}
