// Runs the multi-stage decoder on a synthetic scene.

use querymix::decoder::{decoder_forward, init_queries, DecoderConfig, DecoderParams};
use querymix::scene::{gen_pyramid, SceneSpec, SyntheticScene};
use querymix::tensor::RngState;

pub fn run_example() -> querymix::Result<()> {
    let cfg = DecoderConfig::toy();
    let spec = SceneSpec::default();
    let mut rng = RngState::new(11);
    let scene = SyntheticScene::random(&spec, cfg.num_classes, &mut rng)?;
    let pyr = gen_pyramid(
        &scene,
        cfg.d_feat,
        cfg.num_classes,
        &spec.strides,
        cfg.s_base,
        spec.noise,
        &mut rng,
    )?;
    let params = DecoderParams::init(&cfg, &mut rng)?;
    println!(
        "{} parameters, {} objects in the scene",
        params.param_count(),
        scene.objects.len()
    );

    let (w, h) = scene.image_size();
    let queries = init_queries(&cfg, w, h, &params)?;
    println!("initial position {:?}", queries[0].pos.to_array());
    let outputs = decoder_forward(&queries, &pyr, &params, &cfg)?;
    for (s, out) in outputs.iter().enumerate() {
        let b = out.boxes[0];
        println!(
            "stage {s}: query 0 box [{:.2}, {:.2}, {:.2}, {:.2}] logits {:?}",
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            out.logits.row(0).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
