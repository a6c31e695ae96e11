// Exports where each query sampled, stage by stage, as SVG.

use querymix::harness::{init_params, run_forward, RunConfig};
use querymix::trace::write_svgs;

pub fn run_example() -> querymix::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.decoder.num_queries = 4;
    let params = init_params(&cfg)?;
    let art = run_forward(&cfg, &params, None)?;
    let trace = &art.traces[0];
    for st in &trace.stages {
        let zs: Vec<f64> = st.queries[0].groups.iter().flatten().map(|p| p[2]).collect();
        let (lo, hi) = zs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| (a.min(*z), b.max(*z)));
        println!("stage {}: query 0 samples z in [{lo:.3}, {hi:.3}]", st.stage);
    }
    let dir = std::env::temp_dir().join("querymix_trace_svg");
    for p in write_svgs(trace, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
