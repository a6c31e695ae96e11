// One-to-one matching of predictions to ground truth and the set loss.

use querymix::geometry::BoxXYXY;
use querymix::matching::{cost_matrix, hungarian, stage_loss, GroundTruth, LossConfig};
use querymix::tensor::Tensor;

pub fn run_example() -> querymix::Result<()> {
    let image = (64.0, 64.0);
    let gt = GroundTruth::new(
        vec![BoxXYXY::new(4.0, 4.0, 20.0, 24.0), BoxXYXY::new(30.0, 30.0, 60.0, 50.0)],
        vec![0, 1],
    )?;
    let boxes = vec![
        BoxXYXY::new(28.0, 32.0, 58.0, 52.0),
        BoxXYXY::new(0.0, 0.0, 64.0, 64.0),
        BoxXYXY::new(6.0, 2.0, 22.0, 22.0),
    ];
    let logits = Tensor::from_rows(&[vec![-2.0, 1.5], vec![-1.0, -1.0], vec![2.0, -2.0]])?;
    let cfg = LossConfig::default();

    let cost = cost_matrix(&logits, &boxes, &gt, image, &cfg)?;
    for i in 0..cost.rows() {
        println!(
            "pred {i}: costs {:?}",
            cost.row(i).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
    }
    let m = hungarian(&cost)?;
    println!("pairs {:?}, unmatched {:?}, cost {:.4}", m.pairs, m.unmatched, m.cost);

    let loss = stage_loss(&logits, &boxes, &gt, image, &cfg)?;
    let b = loss.breakdown;
    println!(
        "loss total {:.4} = cls {:.4} + l1 {:.4} + giou {:.4}",
        b.total, b.cls, b.l1, b.giou
    );
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
