use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use querymix::decoder::DecoderParams;
use querymix::feature_space::FeaturePyramid;
use querymix::gradcheck::reports_json;
use querymix::harness::{self, RunConfig};
use querymix::mixer::MixerOrder;
use querymix::sampler::SamplerMode;
use querymix::trace::{write_svgs, SamplingTrace};
use querymix::train::Optimizer;
use querymix::Result;

#[derive(Parser)]
#[command(name = "querymix", about = "Adaptive query decoder toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; absent keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// adaptive-3d | adaptive-2d | single-level:<j> | frozen
    #[arg(long)]
    mode: Option<SamplerMode>,
    /// acm-asm | asm-acm | acm-acm | asm-asm
    #[arg(long)]
    mixer_order: Option<MixerOrder>,
    /// Run independent work items on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the decoder and write predictions.json and trace.json.
    Forward {
        #[command(flatten)]
        common: Common,
        /// Parameters saved by train-toy; fresh initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pyramid JSON to run on instead of a generated scene.
        #[arg(long)]
        pyramid: Option<PathBuf>,
    },
    /// Render a sampling trace as one SVG per stage.
    TraceSvg {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the toy decoder on synthetic scenes.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// sgd | adamw
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<Optimizer>,
        /// Print one line per step.
        #[arg(long)]
        verbose: bool,
    },
    /// Run the invariant suite.
    Invariants {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write invariants.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every analytic backward with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        parallel: bool,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scene.json and pyramid.json for the configured seed.
    GenScene {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adamw" => Ok(Optimizer::AdamW),
        _ => Err(format!("unknown optimizer '{s}'")),
    }
}

fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &base)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(mode) = common.mode {
        cfg.decoder.mode = mode;
    }
    if let Some(order) = common.mixer_order {
        cfg.decoder.mixer_order = order;
    }
    cfg.parallel |= common.parallel;
    cfg.validate()?;
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn write_report(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Forward {
            common,
            checkpoint,
            pyramid,
        } => {
            let cfg = resolve(&common, RunConfig::default())?;
            let params = match &checkpoint {
                Some(p) => DecoderParams::load(&cfg.decoder, p)?,
                None => harness::init_params(&cfg)?,
            };
            let pyr = pyramid.as_deref().map(FeaturePyramid::read).transpose()?;
            let art = harness::run_forward(&cfg, &params, pyr.as_ref())?;
            print_paths(&harness::write_forward(&art, &cfg.out)?);
            Ok(true)
        }
        Command::TraceSvg { trace, out } => {
            if !trace.is_file() {
                return Err(querymix::Error::Input(format!(
                    "trace file {} not found",
                    trace.display()
                )));
            }
            let t = SamplingTrace::read(&trace)?;
            print_paths(&write_svgs(&t, &out)?);
            Ok(true)
        }
        Command::TrainToy {
            common,
            steps,
            optimizer,
            verbose,
        } => {
            let mut cfg = resolve(&common, RunConfig::toy())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = optimizer {
                cfg.train.optimizer = o;
            }
            let (log, params) = harness::run_train(&cfg, |s| {
                if verbose {
                    println!(
                        "step {:>4}  total {:.6}  cls {:.6}  l1 {:.6}  giou {:.6}",
                        s.step, s.loss.total, s.loss.cls, s.loss.l1, s.loss.giou
                    );
                }
            })?;
            let n = log.steps.len();
            println!(
                "first10 {:.6}  last10 {:.6}  final_eval {:.6}",
                log.mean_total(1, 10.min(n)),
                log.final_loss(),
                log.final_eval.total
            );
            write_report(&cfg.out, "train_log.json", &serde_json::to_string_pretty(&log)?)?;
            std::fs::create_dir_all(&cfg.out)?;
            let ckpt = cfg.out.join("checkpoint.json");
            params.save(&ckpt)?;
            println!("wrote {}", ckpt.display());
            Ok(true)
        }
        Command::Invariants { seed, out } => {
            let reports = harness::run_invariants(seed);
            for r in &reports {
                println!("{}", r.line());
            }
            if let Some(dir) = out {
                write_report(&dir, "invariants.json", &serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(harness::exit_code(reports.iter().map(|r| r.pass)) == 0)
        }
        Command::Gradcheck { seed, parallel, out } => {
            let reports = harness::run_gradchecks(seed, parallel)?;
            for r in &reports {
                println!("{}", r.line());
            }
            if let Some(dir) = out {
                write_report(&dir, "gradcheck.json", &reports_json(&reports)?)?;
            }
            Ok(harness::exit_code(reports.iter().map(|r| r.pass)) == 0)
        }
        Command::GenScene { common } => {
            let cfg = resolve(&common, RunConfig::default())?;
            print_paths(&harness::write_scene(&cfg, &cfg.out)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
