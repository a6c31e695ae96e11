//! Decoder stages and their assembly.
//!
//! A stage runs, on the content vectors: IoF-biased self-attention, adaptive
//! sampling + mixing, and a feed-forward block, each as a post-norm residual.
//! Two small heads then produce class logits and a positional delta that
//! moves each query's `(x, y, z, r)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_cached, pos_embed, pos_embed_backward, AttentionCache, AttentionParams,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::feature_space::{FeaturePyramid, DEFAULT_TAU_Z};
use crate::geometry::{
    decode_box, decode_box_backward, iof_bias, iof_bias_backward, update_pos, update_pos_backward, BoxXYXY, QueryPos,
    IOF_EPS,
};
use crate::mixer::{
    adaptive_mixing_backward, adaptive_mixing_cached, MixerCache, MixerMode, MixerOrder, MixerParams, MixerShape,
};
use crate::sampler::{
    gen_offsets, gen_offsets_backward, offsets_to_locations, offsets_to_locations_backward, sample_features,
    sample_features_backward, SamplerConfig, SamplerMode, SamplingLocations, SamplingOffsets,
};
use crate::tensor::{
    init_dynamic_layer, layernorm_backward, layernorm_forward_cached, BiasInit, LayerNormCache, LinearParams, RngState,
    Tensor,
};

/// Decoder hyperparameters. Missing keys in a config file take the defaults
/// below (query dim 256, four groups of 64 channels, 32 sampling points and
/// 128 spatial patterns per group, six stages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_q: usize,
    pub d_feat: usize,
    pub stages: usize,
    pub groups: usize,
    pub p_in: usize,
    pub p_out: usize,
    pub ffn_hidden: usize,
    pub head_ffn_hidden: usize,
    pub heads: usize,
    pub s_base: u32,
    pub tau_z: f64,
    pub num_queries: usize,
    pub num_classes: usize,
    pub mode: SamplerMode,
    pub mixer_order: MixerOrder,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_q: 256,
            d_feat: 256,
            stages: 6,
            groups: 4,
            p_in: 32,
            p_out: 128,
            ffn_hidden: 2048,
            head_ffn_hidden: 256,
            heads: 8,
            s_base: 4,
            tau_z: DEFAULT_TAU_Z,
            num_queries: 100,
            num_classes: 80,
            mode: SamplerMode::Adaptive3d,
            mixer_order: MixerOrder::AcmAsm,
        }
    }
}

impl DecoderConfig {
    /// Small configuration used by the toy training loop.
    pub fn toy() -> Self {
        Self {
            d_q: 64,
            d_feat: 32,
            stages: 2,
            groups: 2,
            p_in: 8,
            p_out: 16,
            ffn_hidden: 128,
            head_ffn_hidden: 64,
            heads: 4,
            num_queries: 20,
            num_classes: 2,
            ..Self::default()
        }
    }

    /// Tiny configuration for end-to-end finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_q: 16,
            d_feat: 8,
            stages: 2,
            groups: 2,
            p_in: 4,
            p_out: 6,
            ffn_hidden: 12,
            head_ffn_hidden: 8,
            heads: 2,
            num_queries: 3,
            num_classes: 3,
            ..Self::default()
        }
    }

    /// Channels per group, `d_feat / g`.
    pub fn channels(&self) -> usize {
        self.d_feat / self.groups.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_q", self.d_q),
            ("d_feat", self.d_feat),
            ("stages", self.stages),
            ("groups", self.groups),
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("ffn_hidden", self.ffn_hidden),
            ("head_ffn_hidden", self.head_ffn_hidden),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("s_base", self.s_base as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be positive"));
        }
        if !self.d_feat.is_multiple_of(self.groups) {
            return config_err(format!("d_feat {} not divisible by g {}", self.d_feat, self.groups));
        }
        if !self.d_q.is_multiple_of(8) || !self.d_q.is_multiple_of(self.heads) {
            return config_err(format!(
                "d_q {} must be divisible by 8 and by {} heads",
                self.d_q, self.heads
            ));
        }
        if !(self.tau_z > 0.0) {
            return config_err("tau_z must be positive");
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            groups: self.groups,
            points: self.p_in,
            tau_z: self.tau_z,
            mode: self.mode,
        }
    }

    pub fn mixer_shape(&self) -> MixerShape {
        MixerShape {
            d_q: self.d_q,
            groups: self.groups,
            channels: self.channels(),
            p_in: self.p_in,
            p_out: self.p_out,
        }
    }

    pub fn mixer_mode(&self) -> MixerMode {
        MixerMode {
            order: self.mixer_order,
            frozen: self.mode.is_frozen(),
        }
    }
}

/// Content vector plus positional vector of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub content: Vec<f64>,
    pub pos: QueryPos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn unit(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            shift: Tensor::zeros(&[d]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Tensor::zeros(self.gain.shape()),
            shift: Tensor::zeros(self.shift.shape()),
        }
    }
}

/// Parameters of one decoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub attn: AttentionParams,
    pub attn_norm: NormParams,
    pub offsets: LinearParams,
    pub mixer: MixerParams,
    pub mix_norm: NormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub ffn_norm: NormParams,
    pub cls1: LinearParams,
    pub cls2: LinearParams,
    pub reg1: LinearParams,
    pub reg2: LinearParams,
}

impl StageParams {
    pub fn init(cfg: &DecoderConfig, rng: &mut RngState) -> Result<Self> {
        let d = cfg.d_q;
        let offsets = init_dynamic_layer(
            &LinearParams::zeros(d, cfg.groups * cfg.p_in * 3),
            BiasInit::Offset {
                groups: cfg.groups,
                points: cfg.p_in,
            },
            rng,
        )?;
        let reg2 = init_dynamic_layer(&LinearParams::zeros(cfg.head_ffn_hidden, 4), BiasInit::Zero, rng)?;
        Ok(Self {
            attn: AttentionParams::init(d, cfg.heads, rng)?,
            attn_norm: NormParams::unit(d),
            offsets,
            mixer: MixerParams::init(cfg.mixer_shape(), cfg.mixer_order, rng)?,
            mix_norm: NormParams::unit(d),
            ffn1: LinearParams::init_default(d, cfg.ffn_hidden, rng),
            ffn2: LinearParams::init_default(cfg.ffn_hidden, d, rng),
            ffn_norm: NormParams::unit(d),
            cls1: LinearParams::init_default(d, cfg.head_ffn_hidden, rng),
            cls2: LinearParams::init_default(cfg.head_ffn_hidden, cfg.num_classes, rng),
            reg1: LinearParams::init_default(d, cfg.head_ffn_hidden, rng),
            reg2,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            attn: self.attn.zeros_like(),
            attn_norm: self.attn_norm.zeros_like(),
            offsets: self.offsets.zeros_like(),
            mixer: self.mixer.zeros_like(),
            mix_norm: self.mix_norm.zeros_like(),
            ffn1: self.ffn1.zeros_like(),
            ffn2: self.ffn2.zeros_like(),
            ffn_norm: self.ffn_norm.zeros_like(),
            cls1: self.cls1.zeros_like(),
            cls2: self.cls2.zeros_like(),
            reg1: self.reg1.zeros_like(),
            reg2: self.reg2.zeros_like(),
        }
    }

    /// The layers whose weights are generated-zero at init.
    pub fn dynamic_layers(&self) -> Vec<(&'static str, &LinearParams)> {
        let mut out = vec![("offsets", &self.offsets), ("reg2", &self.reg2)];
        for g in &self.mixer.groups {
            for s in &g.steps {
                out.push(("mixer", &s.generator));
            }
        }
        out
    }
}

/// All learnable decoder state: shared initial query contents plus one
/// parameter set per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub query_content: Tensor,
    pub stages: Vec<StageParams>,
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let mut query_content = Tensor::zeros(&[cfg.num_queries, cfg.d_q]);
        for v in query_content.data_mut() {
            *v = rng.normal();
        }
        let stages = (0..cfg.stages)
            .map(|_| StageParams::init(cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { query_content, stages })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query_content: Tensor::zeros(self.query_content.shape()),
            stages: self.stages.iter().map(StageParams::zeros_like).collect(),
        }
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("query_content".to_string(), &self.query_content)];
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{i}");
            push_linear(&mut out, &format!("{p}.attn.q_proj"), &s.attn.q_proj);
            push_linear(&mut out, &format!("{p}.attn.k_proj"), &s.attn.k_proj);
            push_linear(&mut out, &format!("{p}.attn.v_proj"), &s.attn.v_proj);
            push_linear(&mut out, &format!("{p}.attn.out_proj"), &s.attn.out_proj);
            out.push((format!("{p}.attn.alpha"), &s.attn.alpha));
            push_norm(&mut out, &format!("{p}.attn_norm"), &s.attn_norm);
            push_linear(&mut out, &format!("{p}.offsets"), &s.offsets);
            for (k, g) in s.mixer.groups.iter().enumerate() {
                for (j, st) in g.steps.iter().enumerate() {
                    let q = format!("{p}.mixer.group{k}.step{j}");
                    push_linear(&mut out, &format!("{q}.generator"), &st.generator);
                    out.push((format!("{q}.gain"), &st.gain));
                    out.push((format!("{q}.shift"), &st.shift));
                }
            }
            push_linear(&mut out, &format!("{p}.mixer.out_proj"), &s.mixer.out_proj);
            push_norm(&mut out, &format!("{p}.mix_norm"), &s.mix_norm);
            push_linear(&mut out, &format!("{p}.ffn1"), &s.ffn1);
            push_linear(&mut out, &format!("{p}.ffn2"), &s.ffn2);
            push_norm(&mut out, &format!("{p}.ffn_norm"), &s.ffn_norm);
            push_linear(&mut out, &format!("{p}.cls1"), &s.cls1);
            push_linear(&mut out, &format!("{p}.cls2"), &s.cls2);
            push_linear(&mut out, &format!("{p}.reg1"), &s.reg1);
            push_linear(&mut out, &format!("{p}.reg2"), &s.reg2);
        }
        out
    }

    /// Mutable view in the same order as [`DecoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.query_content];
        for s in &mut self.stages {
            let a = &mut s.attn;
            for l in [&mut a.q_proj, &mut a.k_proj, &mut a.v_proj, &mut a.out_proj] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut a.alpha);
            out.push(&mut s.attn_norm.gain);
            out.push(&mut s.attn_norm.shift);
            out.push(&mut s.offsets.weight);
            out.push(&mut s.offsets.bias);
            for g in &mut s.mixer.groups {
                for st in &mut g.steps {
                    out.push(&mut st.generator.weight);
                    out.push(&mut st.generator.bias);
                    out.push(&mut st.gain);
                    out.push(&mut st.shift);
                }
            }
            out.push(&mut s.mixer.out_proj.weight);
            out.push(&mut s.mixer.out_proj.bias);
            out.push(&mut s.mix_norm.gain);
            out.push(&mut s.mix_norm.shift);
            for l in [&mut s.ffn1, &mut s.ffn2] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut s.ffn_norm.gain);
            out.push(&mut s.ffn_norm.shift);
            for l in [&mut s.cls1, &mut s.cls2, &mut s.reg1, &mut s.reg2] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checkpoint document `{"tensors": [{"name", "shape", "data"}]}` with
    /// row-major data.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| CheckpointTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(serde_json::to_string(&Checkpoint { tensors })?)
    }

    /// Loads a checkpoint into parameters shaped by `cfg`; names and shapes
    /// must match exactly.
    pub fn from_checkpoint_json(cfg: &DecoderConfig, text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let mut params = Self::init(cfg, &mut RngState::new(0))?;
        let names: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != ck.tensors.len() {
            return shape_err(format!(
                "checkpoint has {} tensors, config needs {}",
                ck.tensors.len(),
                names.len()
            ));
        }
        for ((slot, (name, shape)), entry) in params.tensors_mut().into_iter().zip(names).zip(ck.tensors) {
            if entry.name != name || entry.shape != shape {
                return shape_err(format!(
                    "checkpoint entry {} {:?} does not match {} {:?}",
                    entry.name, entry.shape, name, shape
                ));
            }
            *slot = Tensor::new(entry.shape, entry.data)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(cfg: &DecoderConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(cfg, &std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a LinearParams) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, n: &'a NormParams) {
    out.push((format!("{name}.gain"), &n.gain));
    out.push((format!("{name}.shift"), &n.shift));
}

/// Position whose decoded box is exactly the `image_w × image_h` image.
pub fn init_position(cfg: &DecoderConfig, image_w: f64, image_h: f64) -> QueryPos {
    let s = cfg.s_base as f64;
    let lw = (image_w / s).log2();
    let lh = (image_h / s).log2();
    QueryPos::new(
        image_w / (2.0 * s),
        image_h / (2.0 * s),
        0.5 * (lw + lh),
        0.5 * (lh - lw),
    )
}

/// Initial queries: learned contents, every box covering the whole image.
pub fn init_queries(
    cfg: &DecoderConfig,
    image_w: f64,
    image_h: f64,
    params: &DecoderParams,
) -> Result<Vec<QueryState>> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::Input(format!("image size {image_w}x{image_h} must be positive")));
    }
    if params.query_content.cols() != cfg.d_q {
        return shape_err("query content width differs from d_q");
    }
    let pos = init_position(cfg, image_w, image_h);
    Ok((0..params.query_content.rows())
        .map(|i| QueryState {
            content: params.query_content.row(i).to_vec(),
            pos,
        })
        .collect())
}

/// Predictions of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// `[N × num_classes]`.
    pub logits: Tensor,
    pub boxes: Vec<BoxXYXY>,
    pub states: Vec<QueryState>,
    pub offsets: Vec<SamplingOffsets>,
    /// Sampling locations per query.
    pub trace: Vec<SamplingLocations>,
}

/// Everything [`stage_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct StageCache {
    input: Vec<QueryState>,
    boxes_in: Vec<BoxXYXY>,
    bias: Tensor,
    attn: AttentionCache,
    ln_attn: Vec<LayerNormCache>,
    h1: Tensor,
    offsets: Vec<SamplingOffsets>,
    locations: Vec<SamplingLocations>,
    mixers: Vec<MixerCache>,
    ln_mix: Vec<LayerNormCache>,
    h2: Tensor,
    ffn_pre: Tensor,
    ln_ffn: Vec<LayerNormCache>,
    h3: Tensor,
    cls_pre: Tensor,
    reg_pre: Tensor,
    deltas: Vec<[f64; 4]>,
    pos_out: Vec<QueryPos>,
}

impl StageCache {
    /// Distance of this stage's forward pass from the nearest kink: ReLU
    /// inputs at zero and bilinear sampling coordinates at integer local
    /// positions on any level.
    pub(crate) fn kink_margin(&self, pyr: &FeaturePyramid) -> f64 {
        let mut m = self.mixers.iter().fold(f64::INFINITY, |m, c| m.min(c.relu_margin()));
        for t in [&self.ffn_pre, &self.cls_pre, &self.reg_pre] {
            m = t.data().iter().fold(m, |m, v| m.min(v.abs()));
        }
        for loc in &self.locations {
            for c in &loc.coords {
                for l in &pyr.levels {
                    for x in [c[0], c[1]] {
                        let u = x * pyr.s_base as f64 / l.stride as f64 - 0.5;
                        m = m.min((u - u.round()).abs());
                    }
                }
            }
        }
        m
    }

    /// Dynamic mixing matrices used for query `i`, per group and step.
    pub fn mixing_weights(&self, i: usize) -> Vec<Vec<&Tensor>> {
        let groups = self.offsets.get(i).map_or(0, |o| o.groups);
        (0..groups).map(|k| self.mixers[i].dynamic_weights(k)).collect()
    }

    /// Attention weights per head.
    pub fn attention_weights(&self) -> &[Tensor] {
        &self.attn.weights
    }
}

fn rows_layernorm(x: &Tensor, norm: &NormParams) -> Result<(Tensor, Vec<LayerNormCache>)> {
    let mut out = Tensor::zeros(x.shape());
    let mut caches = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = Tensor::new(vec![1, x.cols()], x.row(i).to_vec())?;
        let (y, c) = layernorm_forward_cached(&row, &norm.gain, &norm.shift)?;
        out.row_mut(i).copy_from_slice(y.data());
        caches.push(c);
    }
    Ok((out, caches))
}

fn rows_layernorm_backward(
    caches: &[LayerNormCache],
    norm: &NormParams,
    g: &Tensor,
    grads: &mut NormParams,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(g.shape());
    for (i, c) in caches.iter().enumerate() {
        let gr = Tensor::new(vec![1, g.cols()], g.row(i).to_vec())?;
        let (dx, dg, ds) = layernorm_backward(c, &norm.gain, &gr)?;
        grads.gain.add_assign(&dg)?;
        grads.shift.add_assign(&ds)?;
        out.row_mut(i).copy_from_slice(dx.data());
    }
    Ok(out)
}

/// `(pre-activation hidden, output)` of a two-layer ReLU FFN over rows.
fn ffn_rows(x: &Tensor, l1: &LinearParams, l2: &LinearParams) -> Result<(Tensor, Tensor)> {
    let mut pre = Tensor::zeros(&[x.rows(), l1.out_dim()]);
    let mut out = Tensor::zeros(&[x.rows(), l2.out_dim()]);
    for i in 0..x.rows() {
        let h = l1.apply(x.row(i))?;
        let a: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        out.row_mut(i).copy_from_slice(&l2.apply(&a)?);
        pre.row_mut(i).copy_from_slice(&h);
    }
    Ok((pre, out))
}

fn ffn_rows_backward(
    x: &Tensor,
    pre: &Tensor,
    l1: &LinearParams,
    l2: &LinearParams,
    g: &Tensor,
    g1: &mut LinearParams,
    g2: &mut LinearParams,
) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let a: Vec<f64> = pre.row(i).iter().map(|v| v.max(0.0)).collect();
        let ga = l2.apply_backward(&a, g.row(i), g2);
        let gh: Vec<f64> = ga
            .iter()
            .zip(pre.row(i))
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        out.row_mut(i).copy_from_slice(&l1.apply_backward(x.row(i), &gh, g1));
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn stage_forward(
    states: &[QueryState],
    pyr: &FeaturePyramid,
    params: &StageParams,
    cfg: &DecoderConfig,
) -> Result<StageOutput> {
    stage_forward_cached(states, pyr, params, cfg).map(|r| r.0)
}

pub fn stage_forward_cached(
    states: &[QueryState],
    pyr: &FeaturePyramid,
    params: &StageParams,
    cfg: &DecoderConfig,
) -> Result<(StageOutput, StageCache)> {
    let n = states.len();
    let d = cfg.d_q;
    let s_base = cfg.s_base as f64;
    if pyr.d_feat != cfg.d_feat {
        return shape_err(format!("pyramid d_feat {} but config says {}", pyr.d_feat, cfg.d_feat));
    }
    if pyr.s_base != cfg.s_base {
        return config_err(format!("pyramid s_base {} but config says {}", pyr.s_base, cfg.s_base));
    }
    let mut content = Tensor::zeros(&[n, d]);
    let mut embeds = Tensor::zeros(&[n, d]);
    let mut boxes_in = Vec::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        if s.content.len() != d {
            return shape_err(format!("query {i} content has {} values, d_q is {d}", s.content.len()));
        }
        content.row_mut(i).copy_from_slice(&s.content);
        embeds.row_mut(i).copy_from_slice(&pos_embed(s.pos, d)?);
        boxes_in.push(decode_box(s.pos, s_base)?);
    }

    // self-attention
    let bias = iof_bias(&boxes_in, IOF_EPS);
    let (attn_out, attn) = attention_cached(&content, &embeds, Some(&bias), &params.attn)?;
    let (h1, ln_attn) = rows_layernorm(&add(&content, &attn_out)?, &params.attn_norm)?;

    // adaptive sampling and mixing
    let sampler = cfg.sampler();
    let mix_mode = cfg.mixer_mode();
    let mut mix_delta = Tensor::zeros(&[n, d]);
    let mut offsets = Vec::with_capacity(n);
    let mut locations = Vec::with_capacity(n);
    let mut mixers = Vec::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        let o = gen_offsets(h1.row(i), &params.offsets, &sampler)?;
        let loc = offsets_to_locations(s.pos, &o, cfg.mode);
        let sampled = sample_features(pyr, &loc, &sampler)?;
        let (delta, mc) = adaptive_mixing_cached(h1.row(i), &sampled, &params.mixer, mix_mode)?;
        mix_delta.row_mut(i).copy_from_slice(&delta);
        offsets.push(o);
        locations.push(loc);
        mixers.push(mc);
    }
    let (h2, ln_mix) = rows_layernorm(&add(&h1, &mix_delta)?, &params.mix_norm)?;

    // feed-forward
    let (ffn_pre, ffn_out) = ffn_rows(&h2, &params.ffn1, &params.ffn2)?;
    let (h3, ln_ffn) = rows_layernorm(&add(&h2, &ffn_out)?, &params.ffn_norm)?;

    // heads
    let (cls_pre, logits) = ffn_rows(&h3, &params.cls1, &params.cls2)?;
    let (reg_pre, reg_out) = ffn_rows(&h3, &params.reg1, &params.reg2)?;
    let mut deltas = Vec::with_capacity(n);
    let mut pos_out = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut out_states = Vec::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        let r = reg_out.row(i);
        let dlt = [r[0], r[1], r[2], r[3]];
        let p = update_pos(s.pos, dlt);
        boxes.push(decode_box(p, s_base)?);
        out_states.push(QueryState {
            content: h3.row(i).to_vec(),
            pos: p,
        });
        deltas.push(dlt);
        pos_out.push(p);
    }

    let output = StageOutput {
        logits,
        boxes,
        states: out_states,
        offsets: offsets.clone(),
        trace: locations.clone(),
    };
    let cache = StageCache {
        input: states.to_vec(),
        boxes_in,
        bias,

        attn,
        ln_attn,
        h1,
        offsets,
        locations,
        mixers,
        ln_mix,
        h2,
        ffn_pre,
        ln_ffn,
        h3,
        cls_pre,
        reg_pre,
        deltas,
        pos_out,
    };
    Ok((output, cache))
}

/// Upstream gradients arriving at one stage's outputs.
#[derive(Debug, Clone)]
pub struct StageUpstream {
    pub logits: Tensor,
    pub boxes: Vec<[f64; 4]>,
    /// From the next stage's input content.
    pub content: Tensor,
    /// From the next stage's input positions.
    pub pos: Vec<[f64; 4]>,
}

impl StageUpstream {
    pub fn zeros(n: usize, cfg: &DecoderConfig) -> Self {
        Self {
            logits: Tensor::zeros(&[n, cfg.num_classes]),
            boxes: vec![[0.0; 4]; n],
            content: Tensor::zeros(&[n, cfg.d_q]),
            pos: vec![[0.0; 4]; n],
        }
    }
}

/// Gradients with respect to the stage's input contents and positions.
#[derive(Debug, Clone)]
pub struct StageInputGrads {
    pub content: Tensor,
    pub pos: Vec<[f64; 4]>,
}

/// Backward of [`stage_forward_cached`]. Parameter gradients accumulate into
/// `grads`; pyramid value gradients into `pyr_grads` when given.
pub fn stage_backward(
    params: &StageParams,
    cfg: &DecoderConfig,
    pyr: &FeaturePyramid,
    cache: &StageCache,
    up: &StageUpstream,
    grads: &mut StageParams,
    mut pyr_grads: Option<&mut [Tensor]>,
) -> Result<StageInputGrads> {
    let n = cache.input.len();
    let d = cfg.d_q;
    let s_base = cfg.s_base as f64;
    let mut g_pos_in = vec![[0.0; 4]; n];

    // positional update and box decode
    let mut g_reg = Tensor::zeros(&[n, 4]);
    for i in 0..n {
        let mut g_out = up.pos[i];
        let gb = decode_box_backward(cache.pos_out[i], s_base, up.boxes[i]);
        for k in 0..4 {
            g_out[k] += gb[k];
        }
        let (gp, gd) = update_pos_backward(cache.input[i].pos, cache.deltas[i], g_out);
        g_pos_in[i] = gp;
        g_reg.row_mut(i).copy_from_slice(&gd);
    }

    // heads
    let mut g_h3 = up.content.clone();
    let g = ffn_rows_backward(
        &cache.h3,
        &cache.reg_pre,
        &params.reg1,
        &params.reg2,
        &g_reg,
        &mut grads.reg1,
        &mut grads.reg2,
    );
    g_h3.add_assign(&g)?;
    let g = ffn_rows_backward(
        &cache.h3,
        &cache.cls_pre,
        &params.cls1,
        &params.cls2,
        &up.logits,
        &mut grads.cls1,
        &mut grads.cls2,
    );
    g_h3.add_assign(&g)?;

    // feed-forward block
    let g_sum3 = rows_layernorm_backward(&cache.ln_ffn, &params.ffn_norm, &g_h3, &mut grads.ffn_norm)?;
    let mut g_h2 = g_sum3.clone();
    let g = ffn_rows_backward(
        &cache.h2,
        &cache.ffn_pre,
        &params.ffn1,
        &params.ffn2,
        &g_sum3,
        &mut grads.ffn1,
        &mut grads.ffn2,
    );
    g_h2.add_assign(&g)?;

    // sampling and mixing block
    let g_sum2 = rows_layernorm_backward(&cache.ln_mix, &params.mix_norm, &g_h2, &mut grads.mix_norm)?;
    let mut g_h1 = g_sum2.clone();
    let sampler = cfg.sampler();
    let mix_mode = cfg.mixer_mode();
    for i in 0..n {
        let q = cache.h1.row(i);
        let (gq_mix, g_sampled) = adaptive_mixing_backward(
            q,
            &params.mixer,
            mix_mode,
            &cache.mixers[i],
            g_sum2.row(i),
            &mut grads.mixer,
        )?;
        let g_loc = sample_features_backward(pyr, &cache.locations[i], &sampler, &g_sampled, pyr_grads.as_deref_mut())?;
        let (gp, g_off) = offsets_to_locations_backward(cache.input[i].pos, &cache.offsets[i], cfg.mode, &g_loc);
        let gq_off = gen_offsets_backward(q, &params.offsets, &sampler, &g_off, &mut grads.offsets);
        for k in 0..4 {
            g_pos_in[i][k] += gp[k];
        }
        for ((t, a), b) in g_h1.row_mut(i).iter_mut().zip(&gq_mix).zip(&gq_off) {
            *t += a + b;
        }
    }

    // attention block
    let g_sum1 = rows_layernorm_backward(&cache.ln_attn, &params.attn_norm, &g_h1, &mut grads.attn_norm)?;
    let ag = attention_backward(&params.attn, &cache.attn, Some(&cache.bias), &g_sum1, &mut grads.attn)?;
    let mut g_content = g_sum1;
    g_content.add_assign(&ag.content)?;
    let g_boxes = iof_bias_backward(&cache.boxes_in, IOF_EPS, &ag.bias);
    for i in 0..n {
        let pos = cache.input[i].pos;
        let ge = pos_embed_backward(pos, d, ag.embeds.row(i));
        let gb = decode_box_backward(pos, s_base, g_boxes[i]);
        for k in 0..4 {
            g_pos_in[i][k] += ge[k] + gb[k];
        }
    }
    Ok(StageInputGrads {
        content: g_content,
        pos: g_pos_in,
    })
}

/// Runs every stage in sequence and returns each stage's predictions.
pub fn decoder_forward(
    states: &[QueryState],
    pyr: &FeaturePyramid,
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<Vec<StageOutput>> {
    decoder_forward_cached(states, pyr, params, cfg).map(|r| r.0)
}

pub fn decoder_forward_cached(
    states: &[QueryState],
    pyr: &FeaturePyramid,
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<(Vec<StageOutput>, Vec<StageCache>)> {
    if params.stages.is_empty() {
        return config_err("decoder needs at least one stage");
    }
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(params.stages.len());
    let mut caches = Vec::with_capacity(params.stages.len());
    for sp in &params.stages {
        let input = outputs.last().map_or(states, |o| o.states.as_slice());
        let (out, cache) = stage_forward_cached(input, pyr, sp, cfg)?;
        outputs.push(out);
        caches.push(cache);
    }
    Ok((outputs, caches))
}

/// Per-stage gradients of a scalar objective with respect to that stage's
/// logits and boxes.
#[derive(Debug, Clone)]
pub struct PredictionGrads {
    pub logits: Tensor,
    pub boxes: Vec<[f64; 4]>,
}

/// Backpropagates per-stage prediction gradients through the whole decoder.
/// Returns parameter gradients (including the shared query contents) and
/// the gradient with respect to the initial positions.
pub fn decoder_backward(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    pyr: &FeaturePyramid,
    caches: &[StageCache],
    stage_grads: &[PredictionGrads],
    mut pyr_grads: Option<&mut [Tensor]>,
) -> Result<(DecoderParams, Vec<[f64; 4]>)> {
    if stage_grads.len() != caches.len() || caches.len() != params.stages.len() {
        return shape_err("one gradient set per stage is required");
    }
    let mut grads = params.zeros_like();
    let n = caches.first().map_or(0, |c| c.input.len());
    let mut carry = StageInputGrads {
        content: Tensor::zeros(&[n, cfg.d_q]),
        pos: vec![[0.0; 4]; n],
    };
    for s in (0..caches.len()).rev() {
        let up = StageUpstream {
            logits: stage_grads[s].logits.clone(),
            boxes: stage_grads[s].boxes.clone(),
            content: carry.content,
            pos: carry.pos,
        };
        carry = stage_backward(
            &params.stages[s],
            cfg,
            pyr,
            &caches[s],
            &up,
            &mut grads.stages[s],
            pyr_grads.as_deref_mut(),
        )?;
    }
    if grads.query_content.shape() == carry.content.shape() {
        grads.query_content = carry.content;
    }
    Ok((grads, carry.pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_space::FeatureLevel;

    fn pyramid(cfg: &DecoderConfig, rng: &mut RngState) -> FeaturePyramid {
        let levels = [(4u32, 8usize), (8, 4)]
            .into_iter()
            .map(|(s, n)| FeatureLevel::new(s, n, n, rng.uniform_tensor(&[n, n, cfg.d_feat], -1.0, 1.0)).unwrap())
            .collect();
        FeaturePyramid::new(cfg.s_base, levels).unwrap()
    }

    #[test]
    fn init_position_covers_image() {
        let cfg = DecoderConfig::default();
        let p = init_position(&cfg, 256.0, 256.0);
        assert_eq!(p, QueryPos::new(32.0, 32.0, 6.0, 0.0));
        assert_eq!(decode_box(p, 4.0).unwrap(), BoxXYXY::new(0.0, 0.0, 256.0, 256.0));
        for (w, h) in [(64.0, 32.0), (100.0, 300.0), (17.0, 5.0)] {
            let b = decode_box(init_position(&cfg, w, h), 4.0).unwrap();
            for (a, e) in b.to_array().iter().zip([0.0, 0.0, w, h]) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        assert_eq!(init_position(&cfg, 80.0, 80.0).r, 0.0);
    }

    #[test]
    fn stage_one_boxes_are_init_boxes() {
        let cfg = DecoderConfig::micro();
        let mut rng = RngState::new(7);
        let params = DecoderParams::init(&cfg, &mut rng).unwrap();
        let pyr = pyramid(&cfg, &mut rng);
        let states = init_queries(&cfg, 32.0, 32.0, &params).unwrap();
        let outs = decoder_forward(&states, &pyr, &params, &cfg).unwrap();
        assert_eq!(outs.len(), 2);
        for b in &outs[0].boxes {
            assert_eq!(*b, BoxXYXY::new(0.0, 0.0, 32.0, 32.0));
        }
        assert_eq!(outs[0].logits.shape(), &[3, 3]);
        assert!(outs[0].trace.iter().all(|t| t.coords.len() == cfg.groups * cfg.p_in));
    }

    #[test]
    fn identical_queries_identical_outputs() {
        let cfg = DecoderConfig {
            mode: SamplerMode::Frozen,
            ..DecoderConfig::micro()
        };
        let mut rng = RngState::new(8);
        let mut params = DecoderParams::init(&cfg, &mut rng).unwrap();
        let row = params.query_content.row(0).to_vec();
        for i in 1..cfg.num_queries {
            params.query_content.row_mut(i).copy_from_slice(&row);
        }
        let pyr = pyramid(&cfg, &mut rng);
        let states = init_queries(&cfg, 32.0, 32.0, &params).unwrap();
        let out = stage_forward(&states, &pyr, &params.stages[0], &cfg).unwrap();
        for i in 1..cfg.num_queries {
            assert_eq!(out.logits.row(i), out.logits.row(0));
            assert_eq!(out.boxes[i], out.boxes[0]);
        }
    }

    #[test]
    fn one_stage_decoder_matches_stage() {
        let cfg = DecoderConfig {
            stages: 1,
            ..DecoderConfig::micro()
        };
        let mut rng = RngState::new(9);
        let params = DecoderParams::init(&cfg, &mut rng).unwrap();
        let pyr = pyramid(&cfg, &mut rng);
        let states = init_queries(&cfg, 40.0, 24.0, &params).unwrap();
        let a = decoder_forward(&states, &pyr, &params, &cfg).unwrap();
        let b = stage_forward(&states, &pyr, &params.stages[0], &cfg).unwrap();
        assert_eq!(a, vec![b]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = DecoderConfig::micro();
        let params = DecoderParams::init(&cfg, &mut RngState::new(10)).unwrap();
        let text = params.to_checkpoint_json().unwrap();
        let back = DecoderParams::from_checkpoint_json(&cfg, &text).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.to_checkpoint_json().unwrap(), text);
        let other = DecoderConfig {
            d_q: 24,
            heads: 2,
            ..DecoderConfig::micro()
        };
        assert!(DecoderParams::from_checkpoint_json(&other, &text).is_err());
        assert_eq!(params.named_tensors().len(), params.clone().tensors_mut().len());
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        let bad = DecoderConfig {
            groups: 3,
            ..DecoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecoderConfig {
            d_q: 20,
            heads: 2,
            ..DecoderConfig::micro()
        };
        assert!(bad.validate().is_err());
    }
}
