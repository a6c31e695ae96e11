//! Toy training on synthetic scenes.

use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_backward, decoder_forward_cached, init_queries, DecoderConfig, DecoderParams};
use crate::error::{config_err, Error, Result};
use crate::feature_space::FeaturePyramid;
use crate::matching::{set_loss, GroundTruth, LossBreakdown, LossConfig};
use crate::scene::{gen_pyramid, SceneSpec, SyntheticScene};
use crate::tensor::{RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `θ ← θ − lr·∇`.
    #[default]
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub adamw: AdamWSettings,
    /// Scenes averaged per step.
    pub batch: usize,
    /// Size of the fixed scene pool the batches cycle through.
    pub pool: usize,
    /// Rescales the gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.003,
            optimizer: Optimizer::Sgd,
            adamw: AdamWSettings::default(),
            batch: 4,
            pool: 16,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based step index.
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub steps: Vec<StepLog>,
    /// Loss of the final parameters averaged over the whole scene pool.
    pub final_eval: LossBreakdown,
}

impl TrainLog {
    /// Mean total loss over the 1-based inclusive step range.
    pub fn mean_total(&self, first: usize, last: usize) -> f64 {
        let sel: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| (first..=last).contains(&s.step))
            .map(|s| s.loss.total)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// Mean total loss of the last ten steps.
    pub fn final_loss(&self) -> f64 {
        let n = self.steps.len();
        self.mean_total(n.saturating_sub(9).max(1), n)
    }
}

/// A scene with its rendered pyramid.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: SyntheticScene,
    pub pyramid: FeaturePyramid,
}

impl TrainSample {
    pub fn ground_truth(&self) -> GroundTruth {
        self.scene.ground_truth()
    }
}

pub fn make_pool(cfg: &DecoderConfig, spec: &SceneSpec, count: usize, rng: &mut RngState) -> Result<Vec<TrainSample>> {
    (0..count)
        .map(|_| {
            let scene = SyntheticScene::random(spec, cfg.num_classes, rng)?;
            let pyramid = gen_pyramid(
                &scene,
                cfg.d_feat,
                cfg.num_classes,
                &spec.strides,
                cfg.s_base,
                spec.noise,
                rng,
            )?;
            Ok(TrainSample { scene, pyramid })
        })
        .collect()
}

/// Mean loss of `params` over `samples`, without gradients.
pub fn evaluate(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    samples: &[TrainSample],
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let scale = 1.0 / samples.len().max(1) as f64;
    for sample in samples {
        let image = sample.scene.image_size();
        let states = init_queries(cfg, image.0, image.1, params)?;
        let (outs, _) = decoder_forward_cached(&states, &sample.pyramid, params, cfg)?;
        let l = set_loss(&outs, &sample.ground_truth(), image, loss_cfg)?.breakdown;
        accumulate(&mut acc, &l, scale);
    }
    Ok(acc)
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown, scale: f64) {
    acc.total += scale * l.total;
    acc.cls += scale * l.cls;
    acc.l1 += scale * l.l1;
    acc.giou += scale * l.giou;
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    sample: &TrainSample,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, DecoderParams)> {
    let image = sample.scene.image_size();
    let states = init_queries(cfg, image.0, image.1, params)?;
    let (outs, caches) = decoder_forward_cached(&states, &sample.pyramid, params, cfg)?;
    let loss = set_loss(&outs, &sample.ground_truth(), image, loss_cfg)?;
    let (grads, _) = decoder_backward(params, cfg, &sample.pyramid, &caches, &loss.prediction_grads(), None)?;
    Ok((loss.breakdown, grads))
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

fn apply_update(
    params: &mut DecoderParams,
    grads: &DecoderParams,
    settings: &TrainSettings,
    state: &mut Option<AdamState>,
) {
    let gs: Vec<&Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
    let lr = settings.lr;
    match settings.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(gs) {
                for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                    *a -= lr * b;
                }
            }
        }
        Optimizer::AdamW => {
            let AdamWSettings {
                beta1,
                beta2,
                eps,
                weight_decay,
            } = settings.adamw;
            let st = state.get_or_insert_with(|| AdamState {
                m: gs.iter().map(|g| Tensor::zeros(g.shape())).collect(),
                v: gs.iter().map(|g| Tensor::zeros(g.shape())).collect(),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(&mut st.m).zip(&mut st.v) {
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                    let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let x = &mut p.data_mut()[i];
                    *x -= lr * (weight_decay * *x + (mi / c1) / ((vi / c2).sqrt() + eps));
                }
            }
        }
    }
}

/// Scales `grads` down so its global L2 norm is at most `max`.
pub fn clip_global_norm(grads: &mut DecoderParams, max: f64) -> f64 {
    let norm = grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for t in grads.tensors_mut() {
            t.scale(s);
        }
    }
    norm
}

/// Trains from a fresh initialization. `on_step` sees each step's loss
/// (measured before that step's update). Returns the log and the final
/// parameters.
pub fn toy_train(
    cfg: &DecoderConfig,
    spec: &SceneSpec,
    settings: &TrainSettings,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(TrainLog, DecoderParams)> {
    cfg.validate()?;
    if settings.batch == 0 || settings.pool == 0 {
        return config_err("batch and pool must be positive");
    }
    if !(settings.lr > 0.0) {
        return config_err("learning rate must be positive");
    }
    let root = RngState::new(seed);
    let mut params = DecoderParams::init(cfg, &mut root.fork(0))?;
    let pool = make_pool(cfg, spec, settings.pool, &mut root.fork(1))?;
    let loss_cfg = LossConfig::default();
    let mut adam = None;
    let mut log = TrainLog {
        seed,
        steps: Vec::with_capacity(settings.steps),
        final_eval: LossBreakdown::default(),
    };
    let scale = 1.0 / settings.batch as f64;
    for step in 0..settings.steps {
        let mut total = LossBreakdown::default();
        let mut grads = params.zeros_like();
        for b in 0..settings.batch {
            let sample = &pool[(step * settings.batch + b) % pool.len()];
            let (loss, g) = loss_and_grads(&params, cfg, sample, &loss_cfg)?;
            accumulate(&mut total, &loss, scale);
            for (acc, t) in grads.tensors_mut().into_iter().zip(g.named_tensors()) {
                for (a, v) in acc.data_mut().iter_mut().zip(t.1.data()) {
                    *a += scale * v;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Value(format!("non-finite loss at step {}", step + 1)));
        }
        if let Some(max) = settings.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let entry = StepLog {
            step: step + 1,
            loss: total,
        };
        on_step(&entry);
        log.steps.push(entry);
        apply_update(&mut params, &grads, settings, &mut adam);
    }
    log.final_eval = evaluate(&params, cfg, &pool, &loss_cfg)?;
    if !log.final_eval.is_finite() {
        return Err(Error::Value("non-finite loss after the last step".into()));
    }
    Ok((log, params))
}
