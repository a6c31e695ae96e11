// Mixes sampled features with query-generated channel and spatial weights.

use querymix::mixer::{adaptive_mixing, dynamic_weight_count, MixerMode, MixerOrder, MixerParams, MixerShape};
use querymix::sampler::SampledFeatures;
use querymix::tensor::RngState;

pub fn run_example() -> querymix::Result<()> {
    let mut rng = RngState::new(7);
    let shape = MixerShape {
        d_q: 32,
        groups: 2,
        channels: 8,
        p_in: 4,
        p_out: 6,
    };
    let q: Vec<f64> = (0..shape.d_q).map(|_| rng.normal()).collect();
    let sampled = SampledFeatures {
        groups: shape.groups,
        points: shape.p_in,
        channels: shape.channels,
        data: (0..shape.groups * shape.p_in * shape.channels)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect(),
    };
    for order in [
        MixerOrder::AcmAsm,
        MixerOrder::AsmAcm,
        MixerOrder::AcmAcm,
        MixerOrder::AsmAsm,
    ] {
        let mut params = MixerParams::init(shape, order, &mut rng)?;
        // Generators start at zero weight; perturb them so the output
        // depends on the query.
        for g in &mut params.groups {
            for step in &mut g.steps {
                for v in step.generator.weight.data_mut() {
                    *v = rng.uniform(-0.05, 0.05);
                }
            }
        }
        let adaptive = adaptive_mixing(&q, &sampled, &params, MixerMode { order, frozen: false })?;
        let frozen = adaptive_mixing(&q, &sampled, &params, MixerMode { order, frozen: true })?;
        let gap: f64 = adaptive
            .iter()
            .zip(&frozen)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "{order:<8} dynamic weights={:<4} output={} |adaptive-frozen|max={gap:.3}",
            dynamic_weight_count(&shape, order),
            adaptive.len()
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
