//! Query-conditioned sampling: a linear layer turns the content vector into
//! `g · P_in` offsets, the offsets are mapped through the query's scale and
//! aspect into 3D locations, and each channel group is sampled at its own
//! locations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::feature_space::{
    bilinear_backward, bilinear_sample, check_channels, sample_point_3d, sample_point_3d_backward, FeaturePyramid,
};
use crate::geometry::QueryPos;
use crate::tensor::{LinearParams, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

/// Which variant of the sampler is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplerMode {
    /// Learned `(Δx, Δy, Δz)` with gaussian blending across levels.
    #[default]
    Adaptive3d,
    /// Δz forced to 0; the query's own `z` still selects the level blend.
    Adaptive2d,
    /// Bilinear sampling of one pyramid level only.
    SingleLevel(usize),
    /// Offset and mixing generators run with zeroed weights, so only their
    /// biases matter and every query gets the same offsets.
    Frozen,
}

impl SamplerMode {
    pub fn is_frozen(self) -> bool {
        self == SamplerMode::Frozen
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerMode::Adaptive3d => write!(f, "adaptive-3d"),
            SamplerMode::Adaptive2d => write!(f, "adaptive-2d"),
            SamplerMode::SingleLevel(j) => write!(f, "single-level:{j}"),
            SamplerMode::Frozen => write!(f, "frozen"),
        }
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive-3d" => Ok(SamplerMode::Adaptive3d),
            "adaptive-2d" => Ok(SamplerMode::Adaptive2d),
            "frozen" => Ok(SamplerMode::Frozen),
            other => match other.strip_prefix("single-level:") {
                Some(j) => j
                    .parse()
                    .map(SamplerMode::SingleLevel)
                    .map_err(|_| Error::Config(format!("bad level index in {other:?}"))),
                None => config_err(format!("unknown sampler mode {other:?}")),
            },
        }
    }
}

impl TryFrom<String> for SamplerMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SamplerMode> for String {
    fn from(m: SamplerMode) -> String {
        m.to_string()
    }
}

/// Sampler dimensions and mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub groups: usize,
    pub points: usize,
    pub tau_z: f64,
    pub mode: SamplerMode,
}

/// Per-query `(Δx, Δy, Δz)` triples, group-major then point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOffsets {
    pub groups: usize,
    pub points: usize,
    pub deltas: Vec<[f64; 3]>,
}

/// Per-query `(x̃, ỹ, z̃)` locations in the 3D feature frame, same layout as
/// [`SamplingOffsets`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingLocations {
    pub groups: usize,
    pub points: usize,
    pub coords: Vec<[f64; 3]>,
}

impl SamplingLocations {
    pub fn group(&self, k: usize) -> &[[f64; 3]] {
        &self.coords[k * self.points..(k + 1) * self.points]
    }
}

/// `[g × P_in × C]` sampled values of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeatures {
    pub groups: usize,
    pub points: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SampledFeatures {
    /// The `[P_in × C]` matrix of group `k`.
    pub fn group(&self, k: usize) -> Tensor {
        let n = self.points * self.channels;
        Tensor::new(vec![self.points, self.channels], self.data[k * n..(k + 1) * n].to_vec())
            .expect("group slice matches its shape")
    }
}

/// One linear map from the content vector to `g · P_in · 3` offsets. In
/// frozen mode the weight is ignored and the offsets equal the bias.
pub fn gen_offsets(q: &[f64], p: &LinearParams, cfg: &SamplerConfig) -> Result<SamplingOffsets> {
    let n = cfg.groups * cfg.points;
    if p.out_dim() != n * 3 || p.in_dim() != q.len() {
        return config_err(format!(
            "offset generator is {}→{}, need {}→{}",
            p.in_dim(),
            p.out_dim(),
            q.len(),
            n * 3
        ));
    }
    let raw = if cfg.mode.is_frozen() {
        p.bias.data().to_vec()
    } else {
        p.apply(q)?
    };
    Ok(SamplingOffsets {
        groups: cfg.groups,
        points: cfg.points,
        deltas: raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

/// Accumulates generator gradients into `grads` and returns `∂/∂q`.
pub fn gen_offsets_backward(
    q: &[f64],
    p: &LinearParams,
    cfg: &SamplerConfig,
    grad: &[[f64; 3]],
    grads: &mut LinearParams,
) -> Vec<f64> {
    let flat: Vec<f64> = grad.iter().flatten().copied().collect();
    if cfg.mode.is_frozen() {
        for (b, g) in grads.bias.data_mut().iter_mut().zip(&flat) {
            *b += g;
        }
        return vec![0.0; q.len()];
    }
    p.apply_backward(q, &flat, grads)
}

/// `x̃ = x + Δx·2^(z−r)`, `ỹ = y + Δy·2^(z+r)`, `z̃ = z + Δz` (Δz dropped in
/// adaptive-2d mode).
pub fn offsets_to_locations(pos: QueryPos, o: &SamplingOffsets, mode: SamplerMode) -> SamplingLocations {
    let sx = (pos.z - pos.r).exp2();
    let sy = (pos.z + pos.r).exp2();
    let use_dz = mode != SamplerMode::Adaptive2d;
    let coords = o
        .deltas
        .iter()
        .map(|d| {
            [
                pos.x + d[0] * sx,
                pos.y + d[1] * sy,
                if use_dz { pos.z + d[2] } else { pos.z },
            ]
        })
        .collect();
    SamplingLocations {
        groups: o.groups,
        points: o.points,
        coords,
    }
}

/// Returns `(∂/∂(x, y, z, r), ∂/∂offsets)`.
pub fn offsets_to_locations_backward(
    pos: QueryPos,
    o: &SamplingOffsets,
    mode: SamplerMode,
    grad: &[[f64; 3]],
) -> ([f64; 4], Vec<[f64; 3]>) {
    let sx = (pos.z - pos.r).exp2();
    let sy = (pos.z + pos.r).exp2();
    let use_dz = mode != SamplerMode::Adaptive2d;
    let mut gp = [0.0; 4];
    let mut go = Vec::with_capacity(grad.len());
    for (d, g) in o.deltas.iter().zip(grad) {
        let tx = g[0] * d[0] * sx * LN2;
        let ty = g[1] * d[1] * sy * LN2;
        gp[0] += g[0];
        gp[1] += g[1];
        gp[2] += tx + ty + g[2];
        gp[3] += -tx + ty;
        go.push([g[0] * sx, g[1] * sy, if use_dz { g[2] } else { 0.0 }]);
    }
    (gp, go)
}

fn check_sampling(pyr: &FeaturePyramid, loc: &SamplingLocations, cfg: &SamplerConfig) -> Result<usize> {
    if cfg.groups == 0 || !pyr.d_feat.is_multiple_of(cfg.groups) {
        return config_err(format!(
            "d_feat {} is not divisible by {} groups",
            pyr.d_feat, cfg.groups
        ));
    }
    if loc.groups != cfg.groups || loc.coords.len() != cfg.groups * loc.points {
        return shape_err("sampling locations do not match the group layout");
    }
    if let SamplerMode::SingleLevel(j) = cfg.mode {
        if j >= pyr.levels.len() {
            return config_err(format!(
                "single-level:{j} but the pyramid has {} levels",
                pyr.levels.len()
            ));
        }
    }
    Ok(pyr.d_feat / cfg.groups)
}

/// Group `k` reads channels `[k·C, (k+1)·C)` at its own `P_in` locations.
pub fn sample_features(pyr: &FeaturePyramid, loc: &SamplingLocations, cfg: &SamplerConfig) -> Result<SampledFeatures> {
    let c = check_sampling(pyr, loc, cfg)?;
    let mut data = Vec::with_capacity(loc.coords.len() * c);
    for k in 0..cfg.groups {
        let ch = k * c..(k + 1) * c;
        check_channels(pyr, &ch)?;
        for &[x, y, z] in loc.group(k) {
            match cfg.mode {
                SamplerMode::SingleLevel(j) => {
                    data.extend_from_slice(&bilinear_sample(&pyr.levels[j], pyr.s_base, x, y)[ch.clone()])
                }
                _ => data.extend(sample_point_3d(pyr, x, y, z, cfg.tau_z, ch.clone())),
            }
        }
    }
    Ok(SampledFeatures {
        groups: cfg.groups,
        points: loc.points,
        channels: c,
        data,
    })
}

/// Returns location gradients; accumulates pyramid value gradients into
/// `grad_values` when given.
pub fn sample_features_backward(
    pyr: &FeaturePyramid,
    loc: &SamplingLocations,
    cfg: &SamplerConfig,
    grad: &SampledFeatures,
    mut grad_values: Option<&mut [Tensor]>,
) -> Result<Vec<[f64; 3]>> {
    let c = check_sampling(pyr, loc, cfg)?;
    let mut out = Vec::with_capacity(loc.coords.len());
    for k in 0..cfg.groups {
        let ch = k * c..(k + 1) * c;
        for (i, &[x, y, z]) in loc.group(k).iter().enumerate() {
            let off = (k * loc.points + i) * c;
            let g = &grad.data[off..off + c];
            let d = match cfg.mode {
                SamplerMode::SingleLevel(j) => {
                    let gv = grad_values.as_deref_mut().map(|v| &mut v[j]);
                    let (dx, dy) = bilinear_backward(&pyr.levels[j], pyr.s_base, x, y, ch.clone(), 1.0, g, gv);
                    [dx, dy, 0.0]
                }
                _ => sample_point_3d_backward(pyr, x, y, z, cfg.tau_z, ch.clone(), g, grad_values.as_deref_mut()),
            };
            out.push(d);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_space::FeatureLevel;
    use crate::geometry::decode_box;
    use crate::tensor::{init_dynamic_layer, BiasInit, RngState};

    fn cfg(groups: usize, points: usize, mode: SamplerMode) -> SamplerConfig {
        SamplerConfig {
            groups,
            points,
            tau_z: 2.0,
            mode,
        }
    }

    #[test]
    fn mode_strings() {
        for m in [
            SamplerMode::Adaptive3d,
            SamplerMode::Adaptive2d,
            SamplerMode::SingleLevel(2),
            SamplerMode::Frozen,
        ] {
            assert_eq!(m.to_string().parse::<SamplerMode>().unwrap(), m);
        }
        assert!("single-level:x".parse::<SamplerMode>().is_err());
        assert!("adaptive".parse::<SamplerMode>().is_err());
    }

    #[test]
    fn fresh_generator_outputs_bias() {
        let mut rng = RngState::new(4);
        let base = LinearParams::init_default(6, 2 * 3 * 3, &mut rng);
        let p = init_dynamic_layer(&base, BiasInit::Offset { groups: 2, points: 3 }, &mut rng).unwrap();
        let c = cfg(2, 3, SamplerMode::Adaptive3d);
        let o = gen_offsets(&[0.3, -1.0, 2.0, 0.0, 1.0, 5.0], &p, &c).unwrap();
        let flat: Vec<f64> = o.deltas.iter().flatten().copied().collect();
        assert_eq!(flat, p.bias.data());
        assert!(o.deltas.iter().all(|d| d[2] == -1.0));
    }

    #[test]
    fn frozen_and_zero_query() {
        let mut rng = RngState::new(5);
        let p = LinearParams::init_default(3, 6, &mut rng);
        let frozen = cfg(1, 2, SamplerMode::Frozen);
        let a = gen_offsets(&[1.0, 2.0, 3.0], &p, &frozen).unwrap();
        let b = gen_offsets(&[-7.0, 0.5, 9.0], &p, &frozen).unwrap();
        assert_eq!(a, b);
        let live = cfg(1, 2, SamplerMode::Adaptive3d);
        let z = gen_offsets(&[0.0; 3], &p, &live).unwrap();
        let flat: Vec<f64> = z.deltas.iter().flatten().copied().collect();
        assert_eq!(flat, p.bias.data());
        assert!(gen_offsets(&[0.0; 4], &p, &live).is_err());
    }

    #[test]
    fn location_examples() {
        let pos = QueryPos::new(8.0, 8.0, 2.0, 0.0);
        let o = SamplingOffsets {
            groups: 1,
            points: 2,
            deltas: vec![[0.5, -0.5, 0.0], [0.0, 0.0, 0.0]],
        };
        let l = offsets_to_locations(pos, &o, SamplerMode::Adaptive3d);
        assert_eq!(l.coords, vec![[10.0, 6.0, 2.0], [8.0, 8.0, 2.0]]);

        // corners of the decoded box
        let pos = QueryPos::new(5.0, 7.0, 1.5, -0.5);
        let b = decode_box(pos, 4.0).unwrap();
        let o = SamplingOffsets {
            groups: 1,
            points: 2,
            deltas: vec![[-0.5, -0.5, 0.0], [0.5, 0.5, 0.0]],
        };
        let l = offsets_to_locations(pos, &o, SamplerMode::Adaptive3d);
        assert!((l.coords[0][0] * 4.0 - b.x1).abs() < 1e-12);
        assert!((l.coords[0][1] * 4.0 - b.y1).abs() < 1e-12);
        assert!((l.coords[1][0] * 4.0 - b.x2).abs() < 1e-12);
        assert!((l.coords[1][1] * 4.0 - b.y2).abs() < 1e-12);
    }

    #[test]
    fn adaptive_2d_keeps_query_z() {
        let pos = QueryPos::new(1.0, 2.0, 0.75, 0.1);
        let o = SamplingOffsets {
            groups: 2,
            points: 1,
            deltas: vec![[0.1, 0.2, -1.0], [0.3, 0.4, 3.0]],
        };
        let l = offsets_to_locations(pos, &o, SamplerMode::Adaptive2d);
        assert!(l.coords.iter().all(|c| c[2] == 0.75));
    }

    fn pyramid(vals: f64) -> FeaturePyramid {
        let a = FeatureLevel::new(4, 2, 2, Tensor::filled(&[2, 2, 4], vals)).unwrap();
        let b = FeatureLevel::new(8, 1, 1, Tensor::filled(&[1, 1, 4], vals)).unwrap();
        FeaturePyramid::new(4, vec![a, b]).unwrap()
    }

    #[test]
    fn constant_pyramid_and_groups() {
        let pyr = pyramid(1.25);
        let loc = SamplingLocations {
            groups: 2,
            points: 2,
            coords: vec![[0.1, 0.2, 0.0], [3.0, 1.0, 4.0], [-1.0, 0.0, 0.5], [0.9, 0.9, 0.9]],
        };
        let s = sample_features(&pyr, &loc, &cfg(2, 2, SamplerMode::Adaptive3d)).unwrap();
        assert_eq!((s.groups, s.points, s.channels), (2, 2, 2));
        assert!(s.data.iter().all(|v| *v == 1.25));
        let bad = sample_features(&pyr, &loc, &cfg(3, 2, SamplerMode::Adaptive3d));
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = sample_features(&pyr, &loc, &cfg(2, 2, SamplerMode::SingleLevel(5)));
        assert!(bad.is_err());
    }

    #[test]
    fn single_group_reads_every_channel() {
        let mut rng = RngState::new(8);
        let a = FeatureLevel::new(4, 3, 3, rng.uniform_tensor(&[3, 3, 4], -1.0, 1.0)).unwrap();
        let b = FeatureLevel::new(8, 2, 2, rng.uniform_tensor(&[2, 2, 4], -1.0, 1.0)).unwrap();
        let pyr = FeaturePyramid::new(4, vec![a, b]).unwrap();
        let loc = SamplingLocations {
            groups: 1,
            points: 1,
            coords: vec![[1.3, 2.2, 0.4]],
        };
        let s = sample_features(&pyr, &loc, &cfg(1, 1, SamplerMode::Adaptive3d)).unwrap();
        assert_eq!(s.data, sample_point_3d(&pyr, 1.3, 2.2, 0.4, 2.0, 0..4));
    }
}
