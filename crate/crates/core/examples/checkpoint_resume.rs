//! Halt training mid-way, round-trip the state through a checkpoint file
//! and finish; the result matches an uninterrupted run.

use sign::cli::checkpoint::Checkpoint;
use sign::cli::state::{trainer_from_checkpoint, trainer_to_checkpoint};
use sign::datagen::{generate_dataset, DataConfig};
use sign::pipeline::{PipelineConfig, StepBudgets, Trainer};

fn main() -> sign::Result<()> {
    let data = generate_dataset(&DataConfig { train: 16, unlabeled: 8, test: 8, ..DataConfig::default() }, 3)?;
    let cfg = PipelineConfig {
        seed: 3,
        steps: StepBudgets { backbone: 20, sim_g: 40, transfer: 20, self_train: 10 },
        ..PipelineConfig::default()
    };
    let mut straight = Trainer::new(cfg.clone(), &data.catalog, (32, 32))?;
    straight.run(&data.train, None)?;

    let mut first = Trainer::new(cfg, &data.catalog, (32, 32))?;
    first.run(&data.train, Some(70))?;
    let path = std::env::temp_dir().join("sign-example.ckpt");
    trainer_to_checkpoint(&first, &data.catalog)?.save(&path)?;
    println!("halted at step {} ({:?}), saved {}", first.global_step(), first.phase, path.display());

    let (mut resumed, _) = trainer_from_checkpoint(&Checkpoint::load(&path)?)?;
    resumed.run(&data.train, None)?;
    let same = straight.model.store.ids().all(|id| straight.model.store.value(id) == resumed.model.store.value(id));
    println!("resumed parameters identical to uninterrupted run: {same}");
    println!("{}", resumed.evaluate(&data.test)?.gzsl.row());
    std::fs::remove_file(&path).ok();
    Ok(())
}
