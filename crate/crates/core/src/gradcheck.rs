//! Finite-difference checks of every analytic backward.
//!
//! Each [`GradCase`] packs all differentiable inputs of an op (including its
//! parameters) into one flat vector. [`check_op`] contracts the op's output
//! with a random linear functional and compares the analytic gradient of
//! that scalar against central differences.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_cached, pos_embed, pos_embed_backward, AttentionParams};
use crate::decoder::{decoder_backward, decoder_forward_cached, init_queries, DecoderConfig, DecoderParams};
use crate::error::{config_err, Error, Result};
use crate::feature_space::{
    bilinear_backward, bilinear_sample, gauss_z_weights, gauss_z_weights_backward, sample_point_3d,
    sample_point_3d_backward, FeatureLevel, FeaturePyramid,
};
use crate::geometry::{
    decode_box, decode_box_backward, giou, giou_backward, iof_bias, iof_bias_backward, update_pos, update_pos_backward,
    BoxXYXY, QueryPos, IOF_EPS,
};
use crate::matching::{focal_loss, focal_loss_backward, set_loss, stage_loss, GroundTruth, LossConfig};
use crate::mixer::{
    adaptive_mixing, adaptive_mixing_backward, adaptive_mixing_cached, MixerMode, MixerOrder, MixerParams, MixerShape,
};
use crate::sampler::{
    gen_offsets, gen_offsets_backward, offsets_to_locations, offsets_to_locations_backward, sample_features,
    sample_features_backward, SampledFeatures, SamplerConfig, SamplerMode, SamplingLocations, SamplingOffsets,
};
use crate::tensor::{
    layernorm_backward, layernorm_forward_cached, linear_backward, linear_forward, relu, relu_backward,
    sinusoidal_embed, sinusoidal_embed_backward, softmax_rows, softmax_rows_backward, LinearParams, RngState, Tensor,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL_REL: f64 = 1e-5;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-8;
/// Distance kept from kinks (ReLU zeros, cell boundaries, interval ties).
pub const DEFAULT_MARGIN: f64 = 1e-3;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return config_err(format!("finite-difference step must be positive, got {h}"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Value(format!("non-finite function value at coordinate {i}")));
        }
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

/// Outcome of one check. A coordinate passes when its relative error is at
/// most `tol_rel` or its absolute error is at most `abs_floor`;
/// `max_rel_err` is taken over coordinates whose gradient magnitude
/// exceeds the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_coord: usize,
    pub coords: usize,
    /// Coordinates above `tol_rel` that pass only through the floor.
    pub floor_only: usize,
    pub tol_rel: f64,
    pub abs_floor: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn line(&self) -> String {
        format!(
            "{:<34} max_rel={:.3e} max_abs={:.3e} coords={:<6} floor_only={:<3} {}",
            self.name,
            self.max_rel_err,
            self.max_abs_err,
            self.coords,
            self.floor_only,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

type ForwardFn = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync;
type BackwardFn = dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync;

/// An op under test with its flattened input.
pub struct GradCase {
    pub name: String,
    /// Kink margin the input was sampled with; `None` where the op is smooth
    /// or kinks are avoided only with probability one.
    pub margin: Option<f64>,
    pub input: Vec<f64>,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        margin: Option<f64>,
        input: Vec<f64>,
        forward: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
        backward: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            margin,
            input,
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.forward)(x)
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        (self.backward)(x, grad_out)
    }
}

/// Compares analytic and numerical gradients of `⟨w, op(x)⟩` for a random
/// `w` drawn from `rng`.
pub fn check_op(case: &GradCase, rng: &mut RngState, tol_rel: f64, abs_floor: f64) -> Result<GradReport> {
    let y = case.forward(&case.input)?;
    let w: Vec<f64> = (0..y.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let analytic = case.backward(&case.input, &w)?;
    if analytic.len() != case.input.len() {
        return Err(Error::Shape(format!(
            "{}: backward returned {} values for {} inputs",
            case.name,
            analytic.len(),
            case.input.len()
        )));
    }
    let x = Tensor::vector(case.input.clone());
    let numeric = finite_diff(
        |t| {
            let y = case.forward(t.data())?;
            Ok(y.iter().zip(&w).map(|(a, b)| a * b).sum())
        },
        &x,
        DEFAULT_STEP,
    )?;
    let mut report = GradReport {
        name: case.name.clone(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_coord: 0,
        coords: x.len(),
        floor_only: 0,
        tol_rel,
        abs_floor,
        pass: true,
    };
    let mut worst = f64::NEG_INFINITY;
    for (i, (a, n)) in analytic.iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > abs_floor { abs / scale } else { 0.0 };
        if !a.is_finite() || !(rel <= tol_rel || abs <= abs_floor) {
            report.pass = false;
        } else if rel > tol_rel {
            report.floor_only += 1;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        if abs > worst {
            worst = abs;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

/// Runs every case with the default tolerances. Case `i` draws its
/// functional from stream `i` of `seed`, so results do not depend on
/// `parallel`.
pub fn run_checks(cases: &[GradCase], seed: u64, parallel: bool) -> Result<Vec<GradReport>> {
    let base = RngState::new(seed);
    let run = |i: usize, c: &GradCase| check_op(c, &mut base.fork(i as u64), DEFAULT_TOL_REL, DEFAULT_ABS_FLOOR);
    if !parallel {
        return cases.iter().enumerate().map(|(i, c)| run(i, c)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .enumerate()
            .map(|(i, c)| s.spawn(move || run(i, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Value("gradient check panicked".into())))
            })
            .collect()
    })
}

pub fn reports_json(reports: &[GradReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

fn pack(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unpack(x: &[f64], ts: Vec<&mut Tensor>) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn linear_tensors(l: &LinearParams) -> Vec<&Tensor> {
    vec![&l.weight, &l.bias]
}

fn mixer_tensors(p: &MixerParams) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for g in &p.groups {
        for s in &g.steps {
            out.extend([&s.generator.weight, &s.generator.bias, &s.gain, &s.shift]);
        }
    }
    out.extend([&p.out_proj.weight, &p.out_proj.bias]);
    out
}

fn mixer_tensors_mut(p: &mut MixerParams) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for g in &mut p.groups {
        for s in &mut g.steps {
            out.push(&mut s.generator.weight);
            out.push(&mut s.generator.bias);
            out.push(&mut s.gain);
            out.push(&mut s.shift);
        }
    }
    out.push(&mut p.out_proj.weight);
    out.push(&mut p.out_proj.bias);
    out
}

fn attention_tensors(p: &AttentionParams) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for l in [&p.q_proj, &p.k_proj, &p.v_proj, &p.out_proj] {
        out.extend(linear_tensors(l));
    }
    out.push(&p.alpha);
    out
}

fn attention_tensors_mut(p: &mut AttentionParams) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for l in [&mut p.q_proj, &mut p.k_proj, &mut p.v_proj, &mut p.out_proj] {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
    out.push(&mut p.alpha);
    out
}

fn randomize(ts: Vec<&mut Tensor>, rng: &mut RngState, scale: f64) {
    for t in ts {
        for v in t.data_mut() {
            *v = rng.uniform(-scale, scale);
        }
    }
}

/// Value whose distance to zero is at least `margin`.
fn away_from_zero(rng: &mut RngState, margin: f64, hi: f64) -> f64 {
    let m = rng.uniform(margin, hi);
    if rng.uniform(0.0, 1.0) < 0.5 {
        -m
    } else {
        m
    }
}

/// True when `x` (in `s_base` units) sits inside the level's grid at least
/// `margin` away from cell boundaries and the border.
fn bilinear_safe(stride: u32, s_base: u32, cells: usize, x: f64, margin: f64) -> bool {
    let u = x * s_base as f64 / stride as f64 - 0.5;
    let frac = u - u.floor();
    u > margin && u < cells as f64 - 1.0 - margin && frac > margin && frac < 1.0 - margin
}

fn safe_point(pyr: &FeaturePyramid, rng: &mut RngState, margin: f64) -> Result<(f64, f64)> {
    let coarse = pyr.levels.last().ok_or_else(|| Error::Config("empty pyramid".into()))?;
    let ext_x = coarse.width as f64 * coarse.stride as f64 / pyr.s_base as f64;
    let ext_y = coarse.height as f64 * coarse.stride as f64 / pyr.s_base as f64;
    for _ in 0..10_000 {
        let x = rng.uniform(0.0, ext_x);
        let y = rng.uniform(0.0, ext_y);
        if pyr.levels.iter().all(|l| {
            bilinear_safe(l.stride, pyr.s_base, l.width, x, margin)
                && bilinear_safe(l.stride, pyr.s_base, l.height, y, margin)
        }) {
            return Ok((x, y));
        }
    }
    config_err("no kink-free sampling point found")
}

/// Boxes whose coordinates along each axis are pairwise `margin` apart, so
/// every min/max in overlap computations has a unique winner.
fn separated_boxes(rng: &mut RngState, n: usize, margin: f64) -> Vec<BoxXYXY> {
    loop {
        let boxes: Vec<BoxXYXY> = (0..n)
            .map(|_| {
                let x = rng.uniform(0.0, 10.0);
                let y = rng.uniform(0.0, 10.0);
                BoxXYXY::new(x, y, x + rng.uniform(1.0, 6.0), y + rng.uniform(1.0, 6.0))
            })
            .collect();
        let separated = |coords: Vec<f64>| {
            coords
                .iter()
                .enumerate()
                .all(|(i, a)| coords[i + 1..].iter().all(|b| (a - b).abs() > margin))
        };
        let xs = boxes.iter().flat_map(|b| [b.x1, b.x2]).collect();
        let ys = boxes.iter().flat_map(|b| [b.y1, b.y2]).collect();
        if separated(xs) && separated(ys) {
            return boxes;
        }
    }
}

fn small_pyramid(rng: &mut RngState, d_feat: usize, levels: &[(u32, usize)]) -> Result<FeaturePyramid> {
    let levels = levels
        .iter()
        .map(|&(s, n)| FeatureLevel::new(s, n, n, rng.uniform_tensor(&[n, n, d_feat], -1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(4, levels)
}

fn pyramid_with_values(template: &FeaturePyramid, x: &[f64]) -> FeaturePyramid {
    let mut p = template.clone();
    unpack(x, p.levels.iter_mut().map(|l| &mut l.values).collect());
    p
}

fn flat_grads(g: &[Tensor]) -> Vec<f64> {
    g.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// One check per differentiable operation, with inputs drawn from `seed`.
pub fn registry(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = RngState::new(seed);
    let m = DEFAULT_MARGIN;
    let mut cases = Vec::new();

    // linear
    {
        let x = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
        let p = LinearParams::init_default(3, 4, &mut rng);
        let input = pack(&[&x, &p.weight, &p.bias]);
        let split = move |v: &[f64]| {
            let mut x = Tensor::zeros(&[2, 3]);
            let mut p = LinearParams::zeros(3, 4);
            unpack(v, vec![&mut x, &mut p.weight, &mut p.bias]);
            (x, p)
        };
        cases.push(GradCase::new(
            "linear",
            None,
            input,
            move |v| {
                let (x, p) = split(v);
                Ok(linear_forward(&x, &p)?.into_data())
            },
            move |v, g| {
                let (x, p) = split(v);
                let g = linear_backward(&x, &p, &Tensor::new(vec![2, 4], g.to_vec())?)?;
                Ok(pack(&[&g.x, &g.weight, &g.bias]))
            },
        ));
    }

    // layernorm
    {
        let x = rng.uniform_tensor(&[2, 5], -2.0, 2.0);
        let gain = rng.uniform_tensor(&[5], 0.5, 1.5);
        let shift = rng.uniform_tensor(&[5], -0.5, 0.5);
        let input = pack(&[&x, &gain, &shift]);
        let split = |v: &[f64]| {
            let mut t = [Tensor::zeros(&[2, 5]), Tensor::zeros(&[5]), Tensor::zeros(&[5])];
            unpack(v, t.iter_mut().collect());
            t
        };
        cases.push(GradCase::new(
            "layernorm",
            None,
            input,
            move |v| {
                let [x, g, s] = split(v);
                Ok(layernorm_forward_cached(&x, &g, &s)?.0.into_data())
            },
            move |v, go| {
                let [x, g, s] = split(v);
                let (_, cache) = layernorm_forward_cached(&x, &g, &s)?;
                let (dx, dg, ds) = layernorm_backward(&cache, &g, &Tensor::new(vec![2, 5], go.to_vec())?)?;
                Ok(pack(&[&dx, &dg, &ds]))
            },
        ));
    }

    // relu
    {
        let input: Vec<f64> = (0..12).map(|_| away_from_zero(&mut rng, m, 2.0)).collect();
        cases.push(GradCase::new(
            "relu",
            Some(m),
            input,
            |v| Ok(relu(&Tensor::vector(v.to_vec())).into_data()),
            |v, g| Ok(relu_backward(&Tensor::vector(v.to_vec()), &Tensor::vector(g.to_vec())).into_data()),
        ));
    }

    // softmax
    {
        let input = rng.uniform_tensor(&[3, 4], -3.0, 3.0).into_data();
        let shaped = |v: &[f64]| Tensor::new(vec![3, 4], v.to_vec());
        cases.push(GradCase::new(
            "softmax_rows",
            None,
            input,
            move |v| Ok(softmax_rows(&shaped(v)?).into_data()),
            move |v, g| {
                let y = softmax_rows(&shaped(v)?);
                Ok(softmax_rows_backward(&y, &shaped(g)?).into_data())
            },
        ));
    }

    // sinusoidal embedding
    {
        let input = vec![rng.uniform(-3.0, 3.0)];
        cases.push(GradCase::new(
            "sinusoidal_embed",
            None,
            input,
            |v| sinusoidal_embed(v[0], 8, 10000.0),
            |v, g| Ok(vec![sinusoidal_embed_backward(v[0], 8, 10000.0, g)]),
        ));
    }

    // decode_box
    {
        let input = vec![
            rng.uniform(1.0, 20.0),
            rng.uniform(1.0, 20.0),
            rng.uniform(0.0, 4.0),
            rng.uniform(-1.0, 1.0),
        ];
        cases.push(GradCase::new(
            "decode_box",
            None,
            input,
            |v| {
                Ok(decode_box(QueryPos::new(v[0], v[1], v[2], v[3]), 4.0)?
                    .to_array()
                    .to_vec())
            },
            |v, g| {
                Ok(decode_box_backward(QueryPos::new(v[0], v[1], v[2], v[3]), 4.0, [g[0], g[1], g[2], g[3]]).to_vec())
            },
        ));
    }

    // update_pos
    {
        let mut input = vec![
            rng.uniform(1.0, 20.0),
            rng.uniform(1.0, 20.0),
            rng.uniform(0.0, 4.0),
            rng.uniform(-1.0, 1.0),
        ];
        input.extend((0..4).map(|_| rng.uniform(-0.5, 0.5)));
        let split = |v: &[f64]| (QueryPos::new(v[0], v[1], v[2], v[3]), [v[4], v[5], v[6], v[7]]);
        cases.push(GradCase::new(
            "update_pos",
            None,
            input,
            move |v| {
                let (p, d) = split(v);
                Ok(update_pos(p, d).to_array().to_vec())
            },
            move |v, g| {
                let (p, d) = split(v);
                let (gp, gd) = update_pos_backward(p, d, [g[0], g[1], g[2], g[3]]);
                Ok(gp.iter().chain(&gd).copied().collect())
            },
        ));
    }

    let boxes_of = |v: &[f64]| -> Vec<BoxXYXY> { v.chunks(4).map(|c| BoxXYXY::new(c[0], c[1], c[2], c[3])).collect() };

    // iof bias
    {
        let input: Vec<f64> = separated_boxes(&mut rng, 4, m)
            .iter()
            .flat_map(|b| b.to_array())
            .collect();
        cases.push(GradCase::new(
            "iof_bias",
            Some(m),
            input,
            move |v| Ok(iof_bias(&boxes_of(v), IOF_EPS).into_data()),
            move |v, g| {
                let b = boxes_of(v);
                let g = Tensor::new(vec![b.len(), b.len()], g.to_vec())?;
                Ok(iof_bias_backward(&b, IOF_EPS, &g).into_iter().flatten().collect())
            },
        ));
    }

    // giou, overlapping and disjoint
    for (name, overlap) in [("giou:overlap", true), ("giou:disjoint", false)] {
        let pair = loop {
            let b = separated_boxes(&mut rng, 2, m);
            let inter = (b[0].x2.min(b[1].x2) - b[0].x1.max(b[1].x1)).min(b[0].y2.min(b[1].y2) - b[0].y1.max(b[1].y1));
            if (inter > m) == overlap && inter.abs() > m {
                break b;
            }
        };
        let input: Vec<f64> = pair.iter().flat_map(|b| b.to_array()).collect();
        cases.push(GradCase::new(
            name,
            Some(m),
            input,
            move |v| {
                let b = boxes_of(v);
                Ok(vec![giou(&b[0], &b[1]).value])
            },
            move |v, g| {
                let b = boxes_of(v);
                let (ga, gb) = giou_backward(&b[0], &b[1]);
                Ok(ga.iter().chain(&gb).map(|x| x * g[0]).collect())
            },
        ));
    }

    // bilinear sampling on one level
    {
        let pyr = small_pyramid(&mut rng, 3, &[(8, 5)])?;
        let (x, y) = safe_point(&pyr, &mut rng, m)?;
        let mut input = vec![x, y];
        input.extend_from_slice(pyr.levels[0].values.data());
        let template = pyr.clone();
        let split = move |v: &[f64]| (v[0], v[1], pyramid_with_values(&template, &v[2..]));
        let split_b = split.clone();
        cases.push(GradCase::new(
            "bilinear_sample",
            Some(m),
            input,
            move |v| {
                let (x, y, p) = split(v);
                Ok(bilinear_sample(&p.levels[0], p.s_base, x, y))
            },
            move |v, g| {
                let (x, y, p) = split_b(v);
                let mut gv = p.zeros_like_values();
                let (gx, gy) = bilinear_backward(&p.levels[0], p.s_base, x, y, 0..3, 1.0, g, Some(&mut gv[0]));
                let mut out = vec![gx, gy];
                out.extend(flat_grads(&gv));
                Ok(out)
            },
        ));
    }

    // gaussian level weights
    {
        let zs = vec![0.0, 1.0, 2.0, 3.0];
        let zs_b = zs.clone();
        cases.push(GradCase::new(
            "gauss_z_weights",
            None,
            vec![rng.uniform(-1.0, 4.0)],
            move |v| Ok(gauss_z_weights(v[0], &zs, 2.0)),
            move |v, g| Ok(vec![gauss_z_weights_backward(v[0], &zs_b, 2.0, g)]),
        ));
    }

    // 3-D point sampling
    {
        let pyr = small_pyramid(&mut rng, 4, &[(4, 8), (8, 4), (16, 2)])?;
        let (x, y) = safe_point(&pyr, &mut rng, m)?;
        let z = rng.uniform(-0.5, 2.5);
        let mut input = vec![x, y, z];
        input.extend(pack(&pyr.levels.iter().map(|l| &l.values).collect::<Vec<_>>()));
        let template = pyr.clone();
        let split = move |v: &[f64]| (v[0], v[1], v[2], pyramid_with_values(&template, &v[3..]));
        let split_b = split.clone();
        cases.push(GradCase::new(
            "sample_point_3d",
            Some(m),
            input,
            move |v| {
                let (x, y, z, p) = split(v);
                Ok(sample_point_3d(&p, x, y, z, 2.0, 1..4))
            },
            move |v, g| {
                let (x, y, z, p) = split_b(v);
                let mut gv = p.zeros_like_values();
                let d = sample_point_3d_backward(&p, x, y, z, 2.0, 1..4, g, Some(&mut gv));
                let mut out = d.to_vec();
                out.extend(flat_grads(&gv));
                Ok(out)
            },
        ));
    }

    // offset generation
    {
        let cfg = SamplerConfig {
            groups: 2,
            points: 3,
            tau_z: 2.0,
            mode: SamplerMode::Adaptive3d,
        };
        let q: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let p = LinearParams::init_default(5, 18, &mut rng);
        let mut input = q;
        input.extend(pack(&linear_tensors(&p)));
        let split = |v: &[f64]| {
            let mut p = LinearParams::zeros(5, 18);
            unpack(&v[5..], vec![&mut p.weight, &mut p.bias]);
            (v[..5].to_vec(), p)
        };
        cases.push(GradCase::new(
            "gen_offsets",
            None,
            input,
            move |v| {
                let (q, p) = split(v);
                Ok(gen_offsets(&q, &p, &cfg)?.deltas.into_iter().flatten().collect())
            },
            move |v, g| {
                let (q, p) = split(v);
                let g: Vec<[f64; 3]> = g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                let mut grads = p.zeros_like();
                let mut out = gen_offsets_backward(&q, &p, &cfg, &g, &mut grads);
                out.extend(pack(&linear_tensors(&grads)));
                Ok(out)
            },
        ));
    }

    // offsets to locations
    for mode in [SamplerMode::Adaptive3d, SamplerMode::Adaptive2d] {
        let mut input = vec![
            rng.uniform(1.0, 20.0),
            rng.uniform(1.0, 20.0),
            rng.uniform(0.0, 3.0),
            rng.uniform(-1.0, 1.0),
        ];
        input.extend((0..12).map(|_| rng.uniform(-1.0, 1.0)));
        let split = |v: &[f64]| {
            let o = SamplingOffsets {
                groups: 2,
                points: 2,
                deltas: v[4..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            };
            (QueryPos::new(v[0], v[1], v[2], v[3]), o)
        };
        cases.push(GradCase::new(
            format!("offsets_to_locations:{mode}"),
            None,
            input,
            move |v| {
                let (p, o) = split(v);
                Ok(offsets_to_locations(p, &o, mode).coords.into_iter().flatten().collect())
            },
            move |v, g| {
                let (p, o) = split(v);
                let g: Vec<[f64; 3]> = g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                let (gp, go) = offsets_to_locations_backward(p, &o, mode, &g);
                Ok(gp.iter().copied().chain(go.into_iter().flatten()).collect())
            },
        ));
    }

    // grouped feature sampling
    for mode in [SamplerMode::Adaptive3d, SamplerMode::SingleLevel(1)] {
        let pyr = small_pyramid(&mut rng, 4, &[(4, 8), (8, 4)])?;
        let (groups, points) = (2, 3);
        let mut coords = Vec::new();
        for _ in 0..groups * points {
            let (x, y) = safe_point(&pyr, &mut rng, m)?;
            coords.extend([x, y, rng.uniform(-0.5, 1.5)]);
        }
        let n_loc = coords.len();
        let mut input = coords;
        input.extend(pack(&pyr.levels.iter().map(|l| &l.values).collect::<Vec<_>>()));
        let cfg = SamplerConfig {
            groups,
            points,
            tau_z: 2.0,
            mode,
        };
        let template = pyr.clone();
        let split = move |v: &[f64]| {
            let loc = SamplingLocations {
                groups,
                points,
                coords: v[..n_loc].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            };
            (loc, pyramid_with_values(&template, &v[n_loc..]))
        };
        let split_b = split.clone();
        cases.push(GradCase::new(
            format!("sample_features:{mode}"),
            Some(m),
            input,
            move |v| {
                let (loc, p) = split(v);
                Ok(sample_features(&p, &loc, &cfg)?.data)
            },
            move |v, g| {
                let (loc, p) = split_b(v);
                let grad = SampledFeatures {
                    groups,
                    points,
                    channels: 2,
                    data: g.to_vec(),
                };
                let mut gv = p.zeros_like_values();
                let gl = sample_features_backward(&p, &loc, &cfg, &grad, Some(&mut gv))?;
                let mut out: Vec<f64> = gl.into_iter().flatten().collect();
                out.extend(flat_grads(&gv));
                Ok(out)
            },
        ));
    }

    // adaptive mixing, every order, learned and frozen
    for (order, frozen) in [
        (MixerOrder::AcmAsm, false),
        (MixerOrder::AsmAcm, false),
        (MixerOrder::AcmAcm, false),
        (MixerOrder::AsmAsm, false),
        (MixerOrder::AcmAsm, true),
    ] {
        let shape = MixerShape {
            d_q: 6,
            groups: 2,
            channels: 3,
            p_in: 4,
            p_out: 5,
        };
        let mut params = MixerParams::init(shape, order, &mut rng)?;
        for g in &mut params.groups {
            for s in &mut g.steps {
                randomize(vec![&mut s.generator.weight, &mut s.generator.bias], &mut rng, 0.5);
                randomize(vec![&mut s.gain], &mut rng, 1.5);
                randomize(vec![&mut s.shift], &mut rng, 0.5);
            }
        }
        let mode = MixerMode { order, frozen };
        let q: Vec<f64> = (0..shape.d_q).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let n_x = shape.groups * shape.p_in * shape.channels;
        let x: Vec<f64> = (0..n_x).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut input = q;
        input.extend(&x);
        input.extend(pack(&mixer_tensors(&params)));
        let template = params.clone();
        let split = move |v: &[f64]| {
            let q = v[..shape.d_q].to_vec();
            let sampled = SampledFeatures {
                groups: shape.groups,
                points: shape.p_in,
                channels: shape.channels,
                data: v[shape.d_q..shape.d_q + n_x].to_vec(),
            };
            let mut p = template.clone();
            unpack(&v[shape.d_q + n_x..], mixer_tensors_mut(&mut p));
            (q, sampled, p)
        };
        let split_b = split.clone();
        let name = format!("adaptive_mixing:{order}{}", if frozen { ":frozen" } else { "" });
        cases.push(GradCase::new(
            name,
            None,
            input,
            move |v| {
                let (q, s, p) = split(v);
                adaptive_mixing(&q, &s, &p, mode)
            },
            move |v, g| {
                let (q, s, p) = split_b(v);
                let (_, cache) = adaptive_mixing_cached(&q, &s, &p, mode)?;
                let mut grads = p.zeros_like();
                let (dq, ds) = adaptive_mixing_backward(&q, &p, mode, &cache, g, &mut grads)?;
                let mut out = dq;
                out.extend(ds.data);
                out.extend(pack(&mixer_tensors(&grads)));
                Ok(out)
            },
        ));
    }

    // positional embedding
    {
        let input = vec![
            rng.uniform(0.0, 20.0),
            rng.uniform(0.0, 20.0),
            rng.uniform(0.0, 4.0),
            rng.uniform(-1.0, 1.0),
        ];
        cases.push(GradCase::new(
            "pos_embed",
            None,
            input,
            |v| pos_embed(QueryPos::new(v[0], v[1], v[2], v[3]), 16),
            |v, g| Ok(pos_embed_backward(QueryPos::new(v[0], v[1], v[2], v[3]), 16, g).to_vec()),
        ));
    }

    // attention, with and without the IoF bias
    for with_bias in [true, false] {
        let (n, d, heads) = (3, 8, 2);
        let mut params = AttentionParams::init(d, heads, &mut rng)?;
        randomize(vec![&mut params.alpha], &mut rng, 1.0);
        let content = rng.uniform_tensor(&[n, d], -1.0, 1.0);
        let embeds = rng.uniform_tensor(&[n, d], -1.0, 1.0);
        let bias = rng.uniform_tensor(&[n, n], -3.0, 0.0);
        let mut input = pack(&[&content, &embeds, &bias]);
        input.extend(pack(&attention_tensors(&params)));
        let template = params.clone();
        let split = move |v: &[f64]| {
            let mut t = [Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d]), Tensor::zeros(&[n, n])];
            unpack(v, t.iter_mut().collect());
            let mut p = template.clone();
            unpack(&v[2 * n * d + n * n..], attention_tensors_mut(&mut p));
            let [c, e, b] = t;
            (c, e, b, p)
        };
        let split_b = split.clone();
        let name = if with_bias { "attention:iof" } else { "attention:plain" };
        cases.push(GradCase::new(
            name,
            None,
            input,
            move |v| {
                let (c, e, b, p) = split(v);
                Ok(attention_cached(&c, &e, with_bias.then_some(&b), &p)?.0.into_data())
            },
            move |v, g| {
                let (c, e, b, p) = split_b(v);
                let bias = with_bias.then_some(&b);
                let (_, cache) = attention_cached(&c, &e, bias, &p)?;
                let mut grads = p.zeros_like();
                let ag = attention_backward(&p, &cache, bias, &Tensor::new(vec![n, d], g.to_vec())?, &mut grads)?;
                let mut out = pack(&[&ag.content, &ag.embeds, &ag.bias]);
                out.extend(pack(&attention_tensors(&grads)));
                Ok(out)
            },
        ));
    }

    // focal loss
    for target in [Some(1), None] {
        let input: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let name = if target.is_some() {
            "focal_loss:positive"
        } else {
            "focal_loss:background"
        };
        cases.push(GradCase::new(
            name,
            None,
            input,
            move |v| Ok(vec![focal_loss(v, target, 2.0, 0.25)]),
            move |v, g| {
                Ok(focal_loss_backward(v, target, 2.0, 0.25)
                    .into_iter()
                    .map(|x| x * g[0])
                    .collect())
            },
        ));
    }

    // stage loss with matching
    {
        let (n, k) = (4, 3);
        let image = (32.0, 24.0);
        let gt = GroundTruth::new(
            vec![BoxXYXY::new(2.0, 3.0, 12.0, 15.0), BoxXYXY::new(15.0, 4.0, 28.0, 20.0)],
            vec![0, 2],
        )?;
        let logits = rng.uniform_tensor(&[n, k], -2.0, 2.0);
        let mut input = logits.into_data();
        for _ in 0..n {
            let x = rng.uniform(0.0, 20.0);
            let y = rng.uniform(0.0, 14.0);
            input.extend([x, y, x + rng.uniform(4.0, 12.0), y + rng.uniform(4.0, 10.0)]);
        }
        let split = move |v: &[f64]| -> Result<(Tensor, Vec<BoxXYXY>)> {
            Ok((Tensor::new(vec![n, k], v[..n * k].to_vec())?, boxes_of(&v[n * k..])))
        };
        let gt_b = gt.clone();
        let cfg = LossConfig::default();
        cases.push(GradCase::new(
            "stage_loss",
            None,
            input,
            move |v| {
                let (l, b) = split(v)?;
                Ok(vec![stage_loss(&l, &b, &gt, image, &cfg)?.breakdown.total])
            },
            move |v, g| {
                let (l, b) = split(v)?;
                let s = stage_loss(&l, &b, &gt_b, image, &cfg)?;
                let mut out: Vec<f64> = s.grads.logits.into_data();
                out.extend(s.grads.boxes.into_iter().flatten());
                Ok(out.into_iter().map(|x| x * g[0]).collect())
            },
        ));
    }

    cases.push(decoder_case(&mut rng)?);
    Ok(cases)
}

/// Full decoder plus set loss on the micro configuration, differentiated
/// with respect to every parameter and every pyramid value.
fn decoder_case(rng: &mut RngState) -> Result<GradCase> {
    let cfg = DecoderConfig::micro();
    let image = (32.0, 32.0);
    // Redraw until no sampling point or ReLU input sits within the margin of a kink.
    let mut drawn = None;
    for _ in 0..1000 {
        let mut params = DecoderParams::init(&cfg, rng)?;
        // Give the zero-initialized dynamic layers and α something to carry.
        for s in &mut params.stages {
            randomize(vec![&mut s.reg2.weight, &mut s.reg2.bias], rng, 0.1);
            randomize(vec![&mut s.attn.alpha], rng, 0.5);
            for g in &mut s.mixer.groups {
                for st in &mut g.steps {
                    randomize(vec![&mut st.generator.weight], rng, 0.2);
                }
            }
            randomize(vec![&mut s.offsets.weight], rng, 0.05);
        }
        let pyr = small_pyramid(rng, cfg.d_feat, &[(4, 8), (8, 8)])?;
        let states = init_queries(&cfg, image.0, image.1, &params)?;
        let (_, caches) = decoder_forward_cached(&states, &pyr, &params, &cfg)?;
        if caches.iter().all(|c| c.kink_margin(&pyr) > DEFAULT_MARGIN) {
            drawn = Some((params, pyr));
            break;
        }
    }
    let Some((params, pyr)) = drawn else {
        return config_err("no kink-free decoder fixture found");
    };
    let gt = GroundTruth::new(
        vec![BoxXYXY::new(3.0, 4.0, 15.0, 20.0), BoxXYXY::new(18.0, 10.0, 29.0, 27.0)],
        vec![1, 2],
    )?;
    let n_par = params.param_count();
    let mut input: Vec<f64> = params
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    input.extend(pack(&pyr.levels.iter().map(|l| &l.values).collect::<Vec<_>>()));
    let split = move |v: &[f64]| {
        let mut p = params.clone();
        unpack(&v[..n_par], p.tensors_mut());
        (p, pyramid_with_values(&pyr, &v[n_par..]))
    };
    let split_b = split.clone();
    let (cfg_b, gt_b) = (cfg.clone(), gt.clone());
    Ok(GradCase::new(
        "decoder_end_to_end",
        Some(DEFAULT_MARGIN),
        input,
        move |v| {
            let (p, pyr) = split(v);
            let states = init_queries(&cfg, image.0, image.1, &p)?;
            let (outs, _) = decoder_forward_cached(&states, &pyr, &p, &cfg)?;
            Ok(vec![
                set_loss(&outs, &gt, image, &LossConfig::default())?.breakdown.total,
            ])
        },
        move |v, g| {
            let (p, pyr) = split_b(v);
            let states = init_queries(&cfg_b, image.0, image.1, &p)?;
            let (outs, caches) = decoder_forward_cached(&states, &pyr, &p, &cfg_b)?;
            let loss = set_loss(&outs, &gt_b, image, &LossConfig::default())?;
            let mut gv = pyr.zeros_like_values();
            let (grads, _) = decoder_backward(&p, &cfg_b, &pyr, &caches, &loss.prediction_grads(), Some(&mut gv))?;
            let mut out: Vec<f64> = grads
                .named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().copied())
                .collect();
            out.extend(flat_grads(&gv));
            Ok(out.into_iter().map(|x| x * g[0]).collect())
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &Tensor::vector(vec![3.0]),
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let g = finite_diff(|_| Ok(4.0), &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        // f(x) = 1ᵀ A x has gradient equal to the column sums of A.
        let a = [[1.0, 2.0, -1.0], [0.5, -3.0, 4.0]];
        let f = |t: &Tensor| {
            Ok(a.iter()
                .map(|r| r.iter().zip(t.data()).map(|(p, q)| p * q).sum::<f64>())
                .sum())
        };
        let g = finite_diff(f, &Tensor::vector(vec![0.3, -0.2, 0.9]), 1e-5).unwrap();
        for (j, v) in g.data().iter().enumerate() {
            assert!((v - (a[0][j] + a[1][j])).abs() < 1e-9);
        }
        assert!(finite_diff(|_| Ok(1.0), &Tensor::vector(vec![1.0]), 0.0).is_err());
        assert!(finite_diff(|t| Ok(t.data()[0].ln()), &Tensor::vector(vec![0.0]), 1e-5).is_err());
    }

    #[test]
    fn corrupted_backward_fails() {
        let case = GradCase::new(
            "square_corrupted",
            None,
            vec![0.5, -1.5, 2.0],
            |v| Ok(v.iter().map(|x| x * x).collect()),
            |v, g| Ok(v.iter().zip(g).map(|(x, g)| 2.02 * x * g).collect()),
        );
        let r = check_op(&case, &mut RngState::new(1), DEFAULT_TOL_REL, DEFAULT_ABS_FLOOR).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_err > 1e-3);
    }

    #[test]
    fn full_registry_passes() {
        let cases = registry(11).unwrap();
        let t = std::time::Instant::now();
        for r in run_checks(&cases, 5, false).unwrap() {
            println!("{}", r.line());
            assert!(r.pass, "{}", r.line());
        }
        println!("elapsed {:?}", t.elapsed());
    }

    #[test]
    fn linear_and_point_sampling_pass() {
        let cases = registry(3).unwrap();
        for name in ["linear", "sample_point_3d"] {
            let c = cases.iter().find(|c| c.name == name).unwrap();
            let r = check_op(c, &mut RngState::new(4), DEFAULT_TOL_REL, DEFAULT_ABS_FLOOR).unwrap();
            assert!(r.pass, "{}", r.line());
        }
    }
}
