use querymix::decoder::{DecoderConfig, DecoderParams};
use querymix::feature_space::FeaturePyramid;
use querymix::harness::{init_params, run_forward, scene_for, RunConfig};
use querymix::scene::SyntheticScene;
use querymix::tensor::RngState;
use querymix::trace::{Predictions, SamplingTrace};

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.decoder.num_queries = 5;
    cfg.seed = 4;
    cfg
}

#[test]
fn files_rewrite_byte_identically() {
    let cfg = small_run();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let art = run_forward(&cfg, &init_params(&cfg).unwrap(), None).unwrap();
    art.predictions[0].write(&p.join("pred.json")).unwrap();
    art.traces[0].write(&p.join("trace.json")).unwrap();
    let (scene, pyr) = scene_for(&cfg, 0).unwrap();
    scene.write(&p.join("scene.json")).unwrap();
    pyr.write(&p.join("pyr.json")).unwrap();

    let text = |n: &str| std::fs::read_to_string(p.join(n)).unwrap();
    assert_eq!(
        Predictions::read(&p.join("pred.json")).unwrap().to_json().unwrap(),
        text("pred.json")
    );
    assert_eq!(
        SamplingTrace::read(&p.join("trace.json")).unwrap().to_json().unwrap(),
        text("trace.json")
    );
    assert_eq!(
        SyntheticScene::read(&p.join("scene.json")).unwrap().to_json().unwrap(),
        text("scene.json")
    );
    assert_eq!(
        FeaturePyramid::read(&p.join("pyr.json")).unwrap().to_json().unwrap(),
        text("pyr.json")
    );
    assert_eq!(FeaturePyramid::read(&p.join("pyr.json")).unwrap(), pyr);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = DecoderConfig::micro();
    let params = DecoderParams::init(&cfg, &mut RngState::new(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    params.save(&path).unwrap();
    let back = DecoderParams::load(&cfg, &path).unwrap();
    assert_eq!(back, params);
    let mut other = cfg.clone();
    other.d_q = 24;
    assert!(DecoderParams::load(&other, &path).is_err());
}

#[test]
fn run_config_round_trip() {
    for cfg in [RunConfig::default(), RunConfig::toy()] {
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_over(&text, &RunConfig::default()).unwrap(), cfg);
    }
}

#[test]
fn parallel_forward_matches_serial() {
    let mut cfg = small_run();
    cfg.num_scenes = 3;
    let params = init_params(&cfg).unwrap();
    let serial = run_forward(&cfg, &params, None).unwrap();
    cfg.parallel = true;
    assert_eq!(run_forward(&cfg, &params, None).unwrap(), serial);
    assert_ne!(serial.predictions[0], serial.predictions[1]);
}

#[test]
fn external_pyramid_matches_generated_scene() {
    let cfg = small_run();
    let params = init_params(&cfg).unwrap();
    let (_, pyr) = scene_for(&cfg, 0).unwrap();
    let direct = run_forward(&cfg, &params, None).unwrap();
    let external = run_forward(&cfg, &params, Some(&pyr)).unwrap();
    assert_eq!(direct, external);
}
