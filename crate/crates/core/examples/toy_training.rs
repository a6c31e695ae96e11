// A short toy training run on synthetic scenes.

use querymix::decoder::DecoderConfig;
use querymix::scene::SceneSpec;
use querymix::train::{toy_train, TrainSettings};

pub fn run_example() -> querymix::Result<()> {
    let settings = TrainSettings {
        steps: 30,
        ..TrainSettings::default()
    };
    let (log, _params) = toy_train(&DecoderConfig::toy(), &SceneSpec::default(), &settings, 0, |s| {
        if s.step % 5 == 0 {
            println!("step {:>3}  loss {:.4}", s.step, s.loss.total);
        }
    })?;
    println!(
        "first 10 steps {:.4}, last 10 steps {:.4}, pool loss after training {:.4}",
        log.mean_total(1, 10),
        log.final_loss(),
        log.final_eval.total
    );
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
