// Self-attention between queries with a log-IoF box bias.

use querymix::attention::{iof_attention, multi_head_attention, pos_embed, AttentionParams};
use querymix::geometry::{box_to_pos, iof_bias, BoxXYXY, IOF_EPS};
use querymix::tensor::{RngState, Tensor};

pub fn run_example() -> querymix::Result<()> {
    let boxes = [
        BoxXYXY::new(0.0, 0.0, 40.0, 40.0),
        BoxXYXY::new(10.0, 10.0, 20.0, 20.0),
        BoxXYXY::new(30.0, 30.0, 60.0, 60.0),
        BoxXYXY::new(50.0, 0.0, 64.0, 10.0),
    ];
    let bias = iof_bias(&boxes, IOF_EPS);
    println!("log-IoF bias (row i attends to column j):");
    for i in 0..bias.rows() {
        let row: Vec<String> = bias.row(i).iter().map(|v| format!("{v:>8.3}")).collect();
        println!("  {}", row.join(" "));
    }

    let d_q = 16;
    let mut rng = RngState::new(3);
    let mut params = AttentionParams::init(d_q, 4, &mut rng)?;
    let content = rng.uniform_tensor(&[boxes.len(), d_q], -1.0, 1.0);
    let mut rows = Vec::new();
    for b in &boxes {
        rows.push(pos_embed(box_to_pos(*b, 4.0)?, d_q)?);
    }
    let embeds = Tensor::from_rows(&rows)?;

    let plain = multi_head_attention(&content, &embeds, &params)?;
    println!(
        "alpha=0 equals plain attention: {}",
        iof_attention(&content, &embeds, &bias, &params)? == plain
    );
    params.alpha.data_mut().fill(1.0);
    let biased = iof_attention(&content, &embeds, &bias, &params)?;
    for i in 0..boxes.len() {
        let d: f64 = biased.row(i).iter().zip(plain.row(i)).map(|(a, b)| (a - b).abs()).sum();
        println!("query {i}: L1 change from bias = {d:.4}");
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
