//! Backbone pretraining, joint SIM/generator training and classifier
//! transfer on the default synthetic data, then one self-training round.
//!
//! `cargo run --release --example train_pipeline -- [seed] [none|ape|ape-interp|rpe]`

use std::time::Instant;

use sign::datagen::{generate_dataset, DataConfig};
use sign::pipeline::{PeChoice, PipelineConfig, Trainer};

fn main() -> sign::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let pe = match args.get(2).map(String::as_str) {
        Some("none") => PeChoice::None,
        Some("ape") => PeChoice::Ape,
        Some("ape-interp") => PeChoice::ApeInterp,
        _ => PeChoice::Rpe,
    };
    let data = generate_dataset(&DataConfig::default(), seed)?;
    let cfg = PipelineConfig {
        seed,
        pe,
        ..PipelineConfig::default()
    };
    let mut t = Trainer::new(cfg, &data.catalog, (32, 32))?;
    let t0 = Instant::now();
    t.run(&data.train, None)?;
    for r in &t.reports {
        let last: Vec<String> = r
            .loss_series
            .iter()
            .map(|(k, v)| format!("{k} {:.4}", v.last().copied().unwrap_or(f64::NAN)))
            .collect();
        println!("{:?}: {} steps, {}", r.stage, r.steps, last.join(", "));
    }
    println!("trained in {:.0}s", t0.elapsed().as_secs_f64());
    println!("after transfer   seen / unseen / harmonic: {}", t.evaluate(&data.test)?.gzsl.row());
    t.self_train_round(&data.unlabeled, &data.train)?;
    println!("after self-train seen / unseen / harmonic: {}", t.evaluate(&data.test)?.gzsl.row());
    Ok(())
}
