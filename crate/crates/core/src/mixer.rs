//! Adaptive mixing of sampled features with query-generated weights.
//!
//! Each group holds a `[P × C]` matrix of sampled features. A channel step
//! right-multiplies it by a generated `C × C` matrix shared by all points; a
//! spatial step transposes it and right-multiplies by a generated
//! `P × P_out` matrix shared by all channels. Both are followed by a layer
//! norm over the whole matrix and a ReLU. The group outputs are flattened,
//! concatenated and projected back to the content dimension.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::sampler::SampledFeatures;
use crate::tensor::{
    init_dynamic_layer, layernorm_backward, layernorm_forward_cached, relu, relu_backward, BiasInit, LayerNormCache,
    LinearParams, RngState, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixStep {
    Channel,
    Spatial,
}

/// Order of the two mixing steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MixerOrder {
    #[default]
    AcmAsm,
    AsmAcm,
    AcmAcm,
    AsmAsm,
}

impl MixerOrder {
    pub fn steps(self) -> [MixStep; 2] {
        use MixStep::*;
        match self {
            MixerOrder::AcmAsm => [Channel, Spatial],
            MixerOrder::AsmAcm => [Spatial, Channel],
            MixerOrder::AcmAcm => [Channel, Channel],
            MixerOrder::AsmAsm => [Spatial, Spatial],
        }
    }
}

impl fmt::Display for MixerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerOrder::AcmAsm => "acm-asm",
            MixerOrder::AsmAcm => "asm-acm",
            MixerOrder::AcmAcm => "acm-acm",
            MixerOrder::AsmAsm => "asm-asm",
        })
    }
}

impl FromStr for MixerOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acm-asm" => Ok(MixerOrder::AcmAsm),
            "asm-acm" => Ok(MixerOrder::AsmAcm),
            "acm-acm" => Ok(MixerOrder::AcmAcm),
            "asm-asm" => Ok(MixerOrder::AsmAsm),
            other => config_err(format!("unknown mixer order {other:?}")),
        }
    }
}

impl TryFrom<String> for MixerOrder {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MixerOrder> for String {
    fn from(m: MixerOrder) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixerMode {
    pub order: MixerOrder,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerShape {
    pub d_q: usize,
    pub groups: usize,
    /// Channels per group.
    pub channels: usize,
    pub p_in: usize,
    pub p_out: usize,
}

/// Per-step geometry: `(points in, points out, dynamic matrix rows, cols)`.
fn step_plan(shape: &MixerShape, order: MixerOrder) -> Vec<(MixStep, usize, usize)> {
    let mut points = shape.p_in;
    order
        .steps()
        .into_iter()
        .map(|s| {
            let p = points;
            if s == MixStep::Spatial {
                points = shape.p_out;
            }
            (s, p, points)
        })
        .collect()
}

fn dynamic_dims(step: MixStep, shape: &MixerShape, p_in: usize) -> (usize, usize) {
    match step {
        MixStep::Channel => (shape.channels, shape.channels),
        MixStep::Spatial => (p_in, shape.p_out),
    }
}

/// Width of the flattened output of one group.
pub fn group_output_len(shape: &MixerShape, order: MixerOrder) -> usize {
    let last = step_plan(shape, order).last().map_or(shape.p_in, |s| s.2);
    last * shape.channels
}

/// Dynamic mixing parameters generated per query, summed over groups.
pub fn dynamic_weight_count(shape: &MixerShape, order: MixerOrder) -> usize {
    let per_group: usize = step_plan(shape, order)
        .into_iter()
        .map(|(s, p, _)| {
            let (r, c) = dynamic_dims(s, shape, p);
            r * c
        })
        .sum();
    shape.groups * per_group
}

/// One mixing step: weight generator plus layer-norm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MixStepParams {
    pub generator: LinearParams,
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMixerParams {
    pub steps: Vec<MixStepParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub shape: MixerShape,
    pub order: MixerOrder,
    pub groups: Vec<GroupMixerParams>,
    pub out_proj: LinearParams,
}

impl MixerParams {
    /// Zero-weight generators with default-initialized biases, unit gains,
    /// and a default-initialized output projection.
    pub fn init(shape: MixerShape, order: MixerOrder, rng: &mut RngState) -> Result<Self> {
        let mut groups = Vec::with_capacity(shape.groups);
        for _ in 0..shape.groups {
            let mut steps = Vec::new();
            for (s, p, p_next) in step_plan(&shape, order) {
                let (r, c) = dynamic_dims(s, &shape, p);
                let norm = if s == MixStep::Channel { shape.channels } else { p_next };
                let base = LinearParams::zeros(shape.d_q, r * c);
                steps.push(MixStepParams {
                    generator: init_dynamic_layer(&base, BiasInit::Default, rng)?,
                    gain: Tensor::filled(&[norm], 1.0),
                    shift: Tensor::zeros(&[norm]),
                });
            }
            groups.push(GroupMixerParams { steps });
        }
        let flat = shape.groups * group_output_len(&shape, order);
        Ok(Self {
            shape,
            order,
            groups,
            out_proj: LinearParams::init_default(flat, shape.d_q, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for g in &mut z.groups {
            for s in &mut g.steps {
                s.generator = s.generator.zeros_like();
                s.gain.fill(0.0);
                s.shift.fill(0.0);
            }
        }
        z.out_proj = z.out_proj.zeros_like();
        z
    }
}

/// Saved state of one mixing step.
#[derive(Debug, Clone)]
struct StepCache {
    step: MixStep,
    x: Tensor,
    m: Tensor,
    ln: LayerNormCache,
    normed: Tensor,
}

fn dynamic_matrix(q: &[f64], gen: &LinearParams, rows: usize, cols: usize, frozen: bool) -> Result<Tensor> {
    if gen.out_dim() != rows * cols || gen.in_dim() != q.len() {
        return config_err(format!(
            "generator is {}→{}, need {}→{}",
            gen.in_dim(),
            gen.out_dim(),
            q.len(),
            rows * cols
        ));
    }
    let flat = if frozen {
        gen.bias.data().to_vec()
    } else {
        gen.apply(q)?
    };
    Tensor::new(vec![rows, cols], flat)
}

fn step_forward(q: &[f64], x: &Tensor, step: MixStep, p: &MixStepParams, frozen: bool) -> Result<(Tensor, StepCache)> {
    let (pts, ch) = (x.rows(), x.cols());
    let (m, pre) = match step {
        MixStep::Channel => {
            let m = dynamic_matrix(q, &p.generator, ch, ch, frozen)?;
            let pre = x.matmul(&m)?;
            (m, pre)
        }
        MixStep::Spatial => {
            if !p.generator.out_dim().is_multiple_of(pts) {
                return shape_err("spatial generator does not match the point count");
            }
            let p_out = p.generator.out_dim() / pts;
            let m = dynamic_matrix(q, &p.generator, pts, p_out, frozen)?;
            let pre = x.transpose().matmul(&m)?;
            (m, pre)
        }
    };
    let (normed, ln) = layernorm_forward_cached(&pre, &p.gain, &p.shift)?;
    let out = relu(&normed);
    Ok((
        out,
        StepCache {
            step,
            x: x.clone(),
            m,
            ln,
            normed,
        },
    ))
}

/// Returns the input gradient; accumulates parameter gradients.
fn step_backward(
    q: &[f64],
    p: &MixStepParams,
    cache: &StepCache,
    grad_out: &Tensor,
    frozen: bool,
    grads: &mut MixStepParams,
    dq: &mut [f64],
) -> Result<Tensor> {
    let g_norm = relu_backward(&cache.normed, grad_out);
    let (g_pre, g_gain, g_shift) = layernorm_backward(&cache.ln, &p.gain, &g_norm)?;
    grads.gain.add_assign(&g_gain)?;
    grads.shift.add_assign(&g_shift)?;
    let (gx, gm) = match cache.step {
        MixStep::Channel => (g_pre.matmul(&cache.m.transpose())?, cache.x.transpose().matmul(&g_pre)?),
        MixStep::Spatial => (cache.m.matmul(&g_pre.transpose())?, cache.x.matmul(&g_pre)?),
    };
    if frozen {
        grads
            .generator
            .bias
            .add_assign(&gm.reshape(&[p.generator.out_dim()])?)?;
    } else {
        let gq = p.generator.apply_backward(q, gm.data(), &mut grads.generator);
        for (a, b) in dq.iter_mut().zip(gq) {
            *a += b;
        }
    }
    Ok(gx)
}

/// Adaptive channel mixing, `ReLU(LayerNorm(x · M_c))` with `M_c` generated
/// from `q` and shared across the rows (sampling points) of `x`.
pub fn acm(q: &[f64], x: &Tensor, params: &MixStepParams, frozen: bool) -> Result<Tensor> {
    step_forward(q, x, MixStep::Channel, params, frozen).map(|r| r.0)
}

/// Adaptive spatial mixing, `ReLU(LayerNorm(xᵀ · M_s))` with `M_s` generated
/// from `q` and shared across the channels of `x`. Output is `[C × P_out]`.
pub fn asm(q: &[f64], x: &Tensor, params: &MixStepParams, frozen: bool) -> Result<Tensor> {
    step_forward(q, x, MixStep::Spatial, params, frozen).map(|r| r.0)
}

/// Forward state needed by [`adaptive_mixing_backward`].
#[derive(Debug, Clone)]
pub struct MixerCache {
    steps: Vec<Vec<StepCache>>,
    flat: Vec<f64>,
}

impl MixerCache {
    /// Smallest `|x|` over the values entering each step's ReLU.
    pub(crate) fn relu_margin(&self) -> f64 {
        self.steps
            .iter()
            .flatten()
            .flat_map(|s| s.normed.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// The dynamic matrices used for group `k`, in step order.
    pub fn dynamic_weights(&self, k: usize) -> Vec<&Tensor> {
        self.steps[k].iter().map(|s| &s.m).collect()
    }
}

fn check_mixer(q: &[f64], sampled: &SampledFeatures, params: &MixerParams) -> Result<()> {
    let s = &params.shape;
    if q.len() != s.d_q
        || sampled.groups != s.groups
        || sampled.channels != s.channels
        || sampled.points != s.p_in
        || params.groups.len() != s.groups
    {
        return shape_err(format!(
            "mixer {:?} given q of {} and samples {}x{}x{}",
            s,
            q.len(),
            sampled.groups,
            sampled.points,
            sampled.channels
        ));
    }
    Ok(())
}

/// Per group: the configured pair of mixing steps; then flatten, concatenate
/// and project to `d_q`. Returns the additive content delta.
pub fn adaptive_mixing(
    q: &[f64],
    sampled: &SampledFeatures,
    params: &MixerParams,
    mode: MixerMode,
) -> Result<Vec<f64>> {
    adaptive_mixing_cached(q, sampled, params, mode).map(|r| r.0)
}

pub fn adaptive_mixing_cached(
    q: &[f64],
    sampled: &SampledFeatures,
    params: &MixerParams,
    mode: MixerMode,
) -> Result<(Vec<f64>, MixerCache)> {
    check_mixer(q, sampled, params)?;
    let order = params.order.steps();
    let mut flat = Vec::with_capacity(params.out_proj.in_dim());
    let mut caches = Vec::with_capacity(params.groups.len());
    for (k, gp) in params.groups.iter().enumerate() {
        let mut x = sampled.group(k);
        let mut group_cache = Vec::with_capacity(2);
        for (i, (&step, sp)) in order.iter().zip(&gp.steps).enumerate() {
            let (out, cache) = step_forward(q, &x, step, sp, mode.frozen)?;
            group_cache.push(cache);
            let last = i + 1 == order.len();
            x = match (step, last) {
                (_, true) => out,
                (MixStep::Channel, false) => out,
                // back to points × channels for the next step
                (MixStep::Spatial, false) => out.transpose(),
            };
        }
        flat.extend_from_slice(x.data());
        caches.push(group_cache);
    }
    let delta = params.out_proj.apply(&flat)?;
    Ok((delta, MixerCache { steps: caches, flat }))
}

/// Returns `(∂/∂q, ∂/∂sampled)` and accumulates parameter gradients.
pub fn adaptive_mixing_backward(
    q: &[f64],
    params: &MixerParams,
    mode: MixerMode,
    cache: &MixerCache,
    grad_delta: &[f64],
    grads: &mut MixerParams,
) -> Result<(Vec<f64>, SampledFeatures)> {
    let s = params.shape;
    let mut dq = vec![0.0; q.len()];
    let g_flat = params
        .out_proj
        .apply_backward(&cache.flat, grad_delta, &mut grads.out_proj);
    let mut d_sampled = SampledFeatures {
        groups: s.groups,
        points: s.p_in,
        channels: s.channels,
        data: Vec::with_capacity(s.groups * s.p_in * s.channels),
    };
    let group_len = g_flat.len() / s.groups.max(1);
    for (k, gp) in params.groups.iter().enumerate() {
        let steps = &cache.steps[k];
        let last = steps.last().expect("two mixing steps");
        let last_shape = match last.step {
            MixStep::Channel => vec![last.x.rows(), s.channels],
            MixStep::Spatial => vec![s.channels, last.m.cols()],
        };
        let mut g = Tensor::new(last_shape, g_flat[k * group_len..(k + 1) * group_len].to_vec())?;
        for i in (0..steps.len()).rev() {
            let sc = &steps[i];
            if i + 1 < steps.len() && sc.step == MixStep::Spatial {
                g = g.transpose();
            }
            g = step_backward(
                q,
                &gp.steps[i],
                sc,
                &g,
                mode.frozen,
                &mut grads.groups[k].steps[i],
                &mut dq,
            )?;
        }
        d_sampled.data.extend_from_slice(g.data());
    }
    Ok((dq, d_sampled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_with_bias(q_dim: usize, bias: Vec<f64>, norm: usize) -> MixStepParams {
        let n = bias.len();
        MixStepParams {
            generator: LinearParams {
                weight: Tensor::zeros(&[n, q_dim]),
                bias: Tensor::vector(bias),
            },
            gain: Tensor::filled(&[norm], 1.0),
            shift: Tensor::zeros(&[norm]),
        }
    }

    #[test]
    fn acm_identity_example() {
        let p = step_with_bias(3, vec![1.0, 0.0, 0.0, 1.0], 2);
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let y = acm(&[0.2, 0.1, -0.4], &x, &p, false).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        let zero = step_with_bias(3, vec![0.0; 4], 2);
        assert!(acm(&[1.0, 2.0, 3.0], &x, &zero, false)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn acm_shares_weights_across_points() {
        let mut rng = RngState::new(1);
        let p = MixStepParams {
            generator: LinearParams::init_default(2, 9, &mut rng),
            gain: Tensor::filled(&[3], 1.0),
            shift: Tensor::zeros(&[3]),
        };
        // two identical rows must come out identical
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]]).unwrap();
        let y = acm(&[0.3, -0.7], &x, &p, false).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn asm_examples() {
        let mut rng = RngState::new(2);
        let x = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let eye = step_with_bias(2, Tensor::identity(3).into_data(), 3);
        let y = asm(&[0.0, 1.0], &x, &eye, false).unwrap();
        let want = relu(
            &crate::tensor::layernorm_forward(&x.transpose(), &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]))
                .unwrap(),
        );
        assert_eq!(y, want);

        let zero = step_with_bias(2, vec![0.0; 6], 2);
        assert!(asm(&[1.0, 1.0], &x, &zero, false)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));

        // averaging column: out[c] = LN over channels of the row mean
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 6.0], vec![3.0, 0.0, 2.0]]).unwrap();
        let avg = step_with_bias(1, vec![0.5, 0.5], 1);
        let y = asm(&[0.0], &x, &avg, false).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        let means = [2.0, 1.0, 4.0];
        let mu = 7.0 / 3.0;
        let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / 3.0;
        for (got, m) in y.data().iter().zip(means) {
            let want = ((m - mu) / (var + 1e-5).sqrt()).max(0.0);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn table2_weight_count() {
        let shape = MixerShape {
            d_q: 256,
            groups: 4,
            channels: 64,
            p_in: 32,
            p_out: 128,
        };
        assert_eq!(dynamic_weight_count(&shape, MixerOrder::AcmAsm), 32768);
        assert_eq!(dynamic_weight_count(&shape, MixerOrder::AcmAsm) / 4, 64 * 64 + 32 * 128);
    }

    #[test]
    fn frozen_delta_is_query_independent() {
        let shape = MixerShape {
            d_q: 4,
            groups: 2,
            channels: 2,
            p_in: 3,
            p_out: 2,
        };
        let mut rng = RngState::new(3);
        let mut params = MixerParams::init(shape, MixerOrder::AcmAsm, &mut rng).unwrap();
        for g in &mut params.groups {
            for s in &mut g.steps {
                s.generator.bias.fill(0.0);
                s.generator.weight = rng.uniform_tensor(s.generator.weight.shape(), -1.0, 1.0);
            }
        }
        let sampled = SampledFeatures {
            groups: 2,
            points: 3,
            channels: 2,
            data: rng.uniform_tensor(&[12], -1.0, 1.0).into_data(),
        };
        let mode = MixerMode {
            order: MixerOrder::AcmAsm,
            frozen: true,
        };
        let a = adaptive_mixing(&[1.0, 2.0, 3.0, 4.0], &sampled, &params, mode).unwrap();
        let b = adaptive_mixing(&[-1.0, 0.0, 0.5, 9.0], &sampled, &params, mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, params.out_proj.bias.data());
    }

    #[test]
    fn every_order_runs() {
        let shape = MixerShape {
            d_q: 4,
            groups: 2,
            channels: 3,
            p_in: 4,
            p_out: 5,
        };
        let mut rng = RngState::new(4);
        let sampled = SampledFeatures {
            groups: 2,
            points: 4,
            channels: 3,
            data: rng.uniform_tensor(&[24], -1.0, 1.0).into_data(),
        };
        for order in [
            MixerOrder::AcmAsm,
            MixerOrder::AsmAcm,
            MixerOrder::AcmAcm,
            MixerOrder::AsmAsm,
        ] {
            let params = MixerParams::init(shape, order, &mut rng).unwrap();
            let mode = MixerMode { order, frozen: false };
            let (d, cache) = adaptive_mixing_cached(&[0.1, 0.2, 0.3, 0.4], &sampled, &params, mode).unwrap();
            assert_eq!(d.len(), 4);
            let mut grads = params.zeros_like();
            let (dq, ds) =
                adaptive_mixing_backward(&[0.1, 0.2, 0.3, 0.4], &params, mode, &cache, &[1.0; 4], &mut grads).unwrap();
            assert_eq!(dq.len(), 4);
            assert_eq!(ds.data.len(), 24);
            assert_eq!(order.to_string().parse::<MixerOrder>().unwrap(), order);
        }
    }
}
