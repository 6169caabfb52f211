//! Small temperature sweep with reduced budgets; prints the CSV table.

use sign::cli::cmd_ablate;
use sign::cli::config::RunConfig;
use sign::datagen::DataConfig;
use sign::pipeline::StepBudgets;

fn main() -> sign::Result<()> {
    let mut cfg = RunConfig {
        data: DataConfig { train: 32, unlabeled: 16, test: 16, ..DataConfig::default() },
        ..RunConfig::default()
    };
    cfg.pipeline.steps = StepBudgets { backbone: 50, sim_g: 100, transfer: 50, self_train: 30 };
    let values: Vec<String> = ["0.5", "2", "8"].iter().map(|s| s.to_string()).collect();
    let table = cmd_ablate(&cfg, "temperature", &values, &[0, 1])?;
    print!("{}", table.to_csv());
    Ok(())
}
