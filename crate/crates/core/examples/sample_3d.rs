// Reads a pyramid at fractional `(x̃, ỹ, z̃)` positions.

use querymix::feature_space::{gauss_z_weights, sample_point_3d, FeatureLevel, FeaturePyramid};
use querymix::tensor::Tensor;

/// A two-channel pyramid whose channel 0 holds the level index and
/// channel 1 the cell column.
fn ramp_pyramid() -> querymix::Result<FeaturePyramid> {
    let mut levels = Vec::new();
    for (j, stride) in [4u32, 8, 16, 32].into_iter().enumerate() {
        let side = (64 / stride) as usize;
        let mut values = Tensor::zeros(&[side, side, 2]);
        for y in 0..side {
            for x in 0..side {
                let cell = &mut values.data_mut()[(y * side + x) * 2..][..2];
                cell[0] = j as f64;
                cell[1] = x as f64;
            }
        }
        levels.push(FeatureLevel::new(stride, side, side, values)?);
    }
    FeaturePyramid::new(4, levels)
}

pub fn run_example() -> querymix::Result<()> {
    let pyr = ramp_pyramid()?;
    let zs = pyr.level_zs();
    println!("level z: {zs:?}");
    for z in [0.0, 0.5, 1.0, 2.5, 3.0] {
        let w = gauss_z_weights(z, &zs, 2.0);
        let v = sample_point_3d(&pyr, 6.0, 6.0, z, 2.0, 0..2);
        let weights: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
        println!(
            "z={z:<4} weights=[{}] level-mix={:.4} column={:.4}",
            weights.join(", "),
            v[0],
            v[1]
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
