//! Run configuration and the operations behind the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{iof_attention, multi_head_attention, AttentionParams};
use crate::decoder::{decoder_forward, decoder_forward_cached, init_queries, DecoderConfig, DecoderParams, StageCache};
use crate::error::{config_err, Error, Result};
use crate::feature_space::{gauss_z_weights, FeaturePyramid};
use crate::geometry::{decode_box, iof_bias, BoxXYXY, IOF_EPS};
use crate::gradcheck::{registry, run_checks, GradReport};
use crate::matching::hungarian;
use crate::mixer::dynamic_weight_count;
use crate::sampler::SamplerMode;
use crate::scene::{gen_pyramid, SceneSpec, SyntheticScene};
use crate::tensor::{RngState, Tensor};
use crate::trace::{Predictions, SamplingTrace};
use crate::train::{toy_train, StepLog, TrainLog, TrainSettings};

/// Everything a command needs. Keys missing from a config file keep the
/// values of the base configuration the command starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub seed: u64,
    pub scene: SceneSpec,
    /// Scenes processed by `forward`.
    pub num_scenes: usize,
    pub out: PathBuf,
    /// Run per-scene forward passes on separate threads.
    pub parallel: bool,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            seed: 0,
            scene: SceneSpec::default(),
            num_scenes: 1,
            out: PathBuf::from("out"),
            parallel: false,
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    /// Base for toy training: the small decoder on 64×64 scenes.
    pub fn toy() -> Self {
        Self {
            decoder: DecoderConfig::toy(),
            ..Self::default()
        }
    }

    /// Overlays the JSON object `text` on `base`, key by key.
    pub fn from_json_over(text: &str, base: &RunConfig) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        if !user.is_object() {
            return config_err("config must be a JSON object");
        }
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, base: &RunConfig) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json_over(&text, base)
            }
            None => {
                base.validate()?;
                Ok(base.clone())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.scene.validate()?;
        if self.num_scenes == 0 {
            return config_err("num_scenes must be positive");
        }
        if let SamplerMode::SingleLevel(j) = self.decoder.mode {
            if j >= self.scene.strides.len() {
                return config_err(format!(
                    "single-level:{j} but only {} strides",
                    self.scene.strides.len()
                ));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Scene `index` of a run and its pyramid; a pure function of the config.
pub fn scene_for(cfg: &RunConfig, index: usize) -> Result<(SyntheticScene, FeaturePyramid)> {
    let mut rng = RngState::new(cfg.seed).fork(100 + index as u64);
    let d = &cfg.decoder;
    let scene = SyntheticScene::random(&cfg.scene, d.num_classes, &mut rng)?;
    let pyr = gen_pyramid(
        &scene,
        d.d_feat,
        d.num_classes,
        &cfg.scene.strides,
        d.s_base,
        cfg.scene.noise,
        &mut rng,
    )?;
    Ok((scene, pyr))
}

/// Freshly initialized parameters for the run's seed.
pub fn init_params(cfg: &RunConfig) -> Result<DecoderParams> {
    DecoderParams::init(&cfg.decoder, &mut RngState::new(cfg.seed).fork(0))
}

/// Per-scene forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardArtifacts {
    pub predictions: Vec<Predictions>,
    pub traces: Vec<SamplingTrace>,
}

fn forward_one(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    pyr: &FeaturePyramid,
    image: (f64, f64),
) -> Result<(Predictions, SamplingTrace)> {
    let states = init_queries(cfg, image.0, image.1, params)?;
    let outs = decoder_forward(&states, pyr, params, cfg)?;
    let initial: Vec<_> = states.iter().map(|s| s.pos).collect();
    Ok((
        Predictions::from_outputs(&outs, image),
        SamplingTrace::from_outputs(&outs, &initial, cfg, image)?,
    ))
}

/// Runs the decoder on the configured scenes, or on `pyramid` when given.
/// The image size of an external pyramid is its finest level's extent.
pub fn run_forward(
    cfg: &RunConfig,
    params: &DecoderParams,
    pyramid: Option<&FeaturePyramid>,
) -> Result<ForwardArtifacts> {
    cfg.validate()?;
    let inputs: Vec<(FeaturePyramid, (f64, f64))> = match pyramid {
        Some(p) => {
            let l = p
                .levels
                .first()
                .ok_or_else(|| Error::Input("pyramid has no levels".into()))?;
            vec![(
                p.clone(),
                ((l.width as u32 * l.stride) as f64, (l.height as u32 * l.stride) as f64),
            )]
        }
        None => (0..cfg.num_scenes)
            .map(|i| scene_for(cfg, i).map(|(s, p)| (p, s.image_size())))
            .collect::<Result<_>>()?,
    };
    let d = &cfg.decoder;
    let results: Vec<Result<(Predictions, SamplingTrace)>> = if cfg.parallel && inputs.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .iter()
                .map(|(p, img)| s.spawn(move || forward_one(params, d, p, *img)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Value("forward pass panicked".into())))
                })
                .collect()
        })
    } else {
        inputs.iter().map(|(p, img)| forward_one(params, d, p, *img)).collect()
    };
    let mut out = ForwardArtifacts {
        predictions: Vec::new(),
        traces: Vec::new(),
    };
    for r in results {
        let (p, t) = r?;
        out.predictions.push(p);
        out.traces.push(t);
    }
    Ok(out)
}

fn indexed(dir: &Path, stem: &str, i: usize) -> PathBuf {
    if i == 0 {
        dir.join(format!("{stem}.json"))
    } else {
        dir.join(format!("{stem}_{i}.json"))
    }
}

/// Writes `predictions.json` and `trace.json` (suffixed `_i` for scene
/// `i > 0`) into `dir`.
pub fn write_forward(art: &ForwardArtifacts, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, (p, t)) in art.predictions.iter().zip(&art.traces).enumerate() {
        let pp = indexed(dir, "predictions", i);
        p.write(&pp)?;
        let tp = indexed(dir, "trace", i);
        t.write(&tp)?;
        paths.extend([pp, tp]);
    }
    Ok(paths)
}

/// Writes scene 0 as `scene.json` and its pyramid as `pyramid.json`.
pub fn write_scene(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let (scene, pyr) = scene_for(cfg, 0)?;
    std::fs::create_dir_all(dir)?;
    let sp = dir.join("scene.json");
    let pp = dir.join("pyramid.json");
    scene.write(&sp)?;
    pyr.write(&pp)?;
    Ok(vec![sp, pp])
}

pub fn run_train(cfg: &RunConfig, on_step: impl FnMut(&StepLog)) -> Result<(TrainLog, DecoderParams)> {
    cfg.validate()?;
    toy_train(&cfg.decoder, &cfg.scene, &cfg.train, cfg.seed, on_step)
}

/// Outcome of one runtime invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl InvariantReport {
    pub fn line(&self) -> String {
        format!(
            "{:<34} {}  {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> InvariantReport {
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    InvariantReport {
        name: name.into(),
        pass,
        detail,
    }
}

fn toy_run(mode: SamplerMode) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.decoder.mode = mode;
    cfg.decoder.num_queries = 6;
    cfg
}

fn toy_forward(
    cfg: &RunConfig,
    scene: usize,
) -> Result<(Vec<crate::decoder::StageOutput>, Vec<StageCache>, SyntheticScene)> {
    let params = init_params(cfg)?;
    let (s, pyr) = scene_for(cfg, scene)?;
    let (w, h) = s.image_size();
    let states = init_queries(&cfg.decoder, w, h, &params)?;
    let (outs, caches) = decoder_forward_cached(&states, &pyr, &params, &cfg.decoder)?;
    Ok((outs, caches, s))
}

/// Smallest assignment cost by trying every injection of columns into rows.
fn enumerate_min(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, j: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if j == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for i in 0..cost.rows() {
            if !used[i] {
                used[i] = true;
                go(cost, j + 1, used, acc + cost.get2(i, j), best);
                used[i] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

/// Structural and semantic invariants checked at run time.
pub fn run_invariants(seed: u64) -> Vec<InvariantReport> {
    let mut out = Vec::new();

    out.push(check("default_mixer_structure", || {
        let cfg = DecoderConfig::default();
        let shape = cfg.mixer_shape();
        let total = dynamic_weight_count(&shape, cfg.mixer_order);
        let points = cfg.groups * cfg.p_in;
        let ok =
            cfg.channels() == 64 && total == 32768 && total / cfg.groups == 8192 && points == 128 && cfg.stages == 6;
        Ok((ok, format!("C={} weights={} points={}", cfg.channels(), total, points)))
    }));

    out.push(check("init_dynamic_layers", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let params = init_params(&cfg)?;
        let mut ok = true;
        for st in &params.stages {
            for (_, l) in st.dynamic_layers() {
                ok &= l.weight.data().iter().all(|v| *v == 0.0);
            }
            for t in st.offsets.bias.data().chunks(3) {
                ok &= t[2] == -1.0 && t[0].abs() <= 0.5 && t[1].abs() <= 0.5;
            }
        }
        Ok((ok, "zero weights, Δz=-1, |Δx|,|Δy|<=0.5".into()))
    }));

    out.push(check("init_boxes_cover_image", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let (outs, _, scene) = toy_forward(&cfg, 0)?;
        let (w, h) = scene.image_size();
        let full = BoxXYXY::new(0.0, 0.0, w, h);
        let ok = outs[0].boxes.iter().all(|b| *b == full);
        Ok((ok, format!("{} queries", outs[0].boxes.len())))
    }));

    out.push(check("trace_point_count", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let (outs, _, _) = toy_forward(&cfg, 0)?;
        let want = cfg.decoder.groups * cfg.decoder.p_in;
        let ok = outs.iter().all(|o| o.trace.iter().all(|t| t.coords.len() == want));
        Ok((ok, format!("{want} per query per stage")))
    }));

    out.push(check("gauss_weights_normalized", || {
        let mut rng = RngState::new(seed).fork(1);
        let zs = [0.0, 1.0, 2.0, 3.0];
        let worst = (0..1000)
            .map(|_| (gauss_z_weights(rng.uniform(-3.0, 6.0), &zs, 2.0).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("max |sum-1| = {worst:.1e}")))
    }));

    out.push(check("frozen_query_independent", || {
        let cfg = toy_run(SamplerMode::Frozen);
        let (a, ca, _) = toy_forward(&cfg, 0)?;
        let (b, cb, _) = toy_forward(&cfg, 1)?;
        let mut ok = true;
        for s in 0..a.len() {
            let (off, mix) = (&a[s].offsets[0], ca[s].mixing_weights(0));
            for (o, c) in [(&a[s], &ca[s]), (&b[s], &cb[s])] {
                for i in 0..o.offsets.len() {
                    ok &= o.offsets[i] == *off && c.mixing_weights(i) == mix;
                }
            }
        }
        Ok((ok, "offsets and mixing weights shared".into()))
    }));

    out.push(check("alpha_zero_attention", || {
        let mut rng = RngState::new(seed).fork(2);
        let params = AttentionParams::init(16, 4, &mut rng)?;
        let content = rng.uniform_tensor(&[5, 16], -1.0, 1.0);
        let embeds = rng.uniform_tensor(&[5, 16], -1.0, 1.0);
        let bias = rng.uniform_tensor(&[5, 5], -10.0, 0.0);
        let a = iof_attention(&content, &embeds, &bias, &params)?;
        let b = multi_head_attention(&content, &embeds, &params)?;
        Ok((a == b, "bitwise equal".into()))
    }));

    out.push(check("iof_bias_extremes", || {
        let outer = BoxXYXY::new(0.0, 0.0, 10.0, 10.0);
        let inner = BoxXYXY::new(2.0, 2.0, 5.0, 6.0);
        let far = BoxXYXY::new(20.0, 20.0, 25.0, 30.0);
        let b = iof_bias(&[inner, outer, far], IOF_EPS);
        let contained = b.get2(0, 1).abs();
        let disjoint = (b.get2(0, 2) - IOF_EPS.ln()).abs();
        Ok((
            contained <= 1e-6 && disjoint <= 1e-9,
            format!("|B_in,out|={contained:.1e}"),
        ))
    }));

    out.push(check("hungarian_exact", || {
        let mut rng = RngState::new(seed).fork(3);
        let mut ok = true;
        for _ in 0..100 {
            let n = rng.int_range(1, 6);
            let m = rng.int_range(0, n);
            let c = rng.uniform_tensor(&[n, m], 0.0, 10.0);
            ok &= hungarian(&c)?.cost == enumerate_min(&c);
        }
        Ok((ok, "100 matrices".into()))
    }));

    out.push(check("pyramid_round_trip", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let (_, pyr) = scene_for(&cfg, 0)?;
        let text = pyr.to_json()?;
        let again = FeaturePyramid::from_json(&text)?.to_json()?;
        Ok((text == again, format!("{} bytes", text.len())))
    }));

    out.push(check("forward_deterministic", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let params = init_params(&cfg)?;
        let a = run_forward(&cfg, &params, None)?;
        let b = run_forward(&cfg, &params, None)?;
        Ok((a == b, "two runs equal".into()))
    }));

    out.push(check("decoded_boxes_canonical", || {
        let cfg = toy_run(SamplerMode::Adaptive3d);
        let (outs, _, _) = toy_forward(&cfg, 2)?;
        let ok = outs.iter().flat_map(|o| o.states.iter()).all(|s| {
            decode_box(s.pos, 4.0)
                .map(|b| b.x2 > b.x1 && b.y2 > b.y1)
                .unwrap_or(false)
        });
        Ok((ok, "x2>x1, y2>y1".into()))
    }));

    out
}

pub fn run_gradchecks(seed: u64, parallel: bool) -> Result<Vec<GradReport>> {
    run_checks(&registry(seed)?, seed, parallel)
}

/// `0` when every check passed, `1` otherwise.
pub fn exit_code(passes: impl IntoIterator<Item = bool>) -> i32 {
    if passes.into_iter().all(|p| p) {
        0
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlay_keeps_base_values() {
        let cfg = RunConfig::from_json_over(r#"{"seed": 7, "decoder": {"stages": 3}}"#, &RunConfig::toy()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.decoder.stages, 3);
        assert_eq!(cfg.decoder.d_q, 64);
        let cfg = RunConfig::from_json_over("{}", &RunConfig::default()).unwrap();
        assert_eq!(cfg.decoder, DecoderConfig::default());
        assert!(RunConfig::from_json_over(r#"{"bogus": 1}"#, &RunConfig::default()).is_err());
        assert!(RunConfig::from_json_over(r#"{"decoder": {"groups": 3}}"#, &RunConfig::default()).is_err());
        assert!(RunConfig::from_json_over("[1]", &RunConfig::default()).is_err());
        let cfg = RunConfig::from_json_over(r#"{"train": {"optimizer": "adamw"}}"#, &RunConfig::toy()).unwrap();
        assert_eq!(cfg.train.optimizer, crate::train::Optimizer::AdamW);
    }

    #[test]
    fn invariants_pass() {
        for r in run_invariants(0) {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code([true, true]), 0);
        assert_eq!(exit_code([true, false]), 1);
        assert_eq!(exit_code(Vec::<bool>::new()), 0);
    }
}
