//! Command-line surface: data generation, training, self-training,
//! evaluation and ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration or IO error, 3 undefined metric,
//! 4 numeric abort.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod state;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::datagen::{generate_dataset, ClassCatalog, Dataset};
use crate::error::{Error, Result};
use crate::eval::GzslReport;
use crate::pipeline::{PeChoice, PipelineConfig, RunStatus, Strategy, Trainer};
use crate::sim::SimArch;

use checkpoint::Checkpoint;
use config::RunConfig;
use metrics::{MetricsRecord, SelfTrainSummary, SweepRun, SweepTable};

pub const TRAIN_CHECKPOINT: &str = "train.ckpt";
pub const TRAIN_METRICS: &str = "train-metrics.json";
pub const SELFTRAIN_CHECKPOINT: &str = "selftrain.ckpt";
pub const SELFTRAIN_METRICS: &str = "selftrain-metrics.json";
pub const EVAL_METRICS: &str = "eval-metrics.json";

fn parse_tag<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

fn tag<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .expect("unit enum")
}

#[derive(Debug, Parser)]
#[command(name = "sign", version, about = "Zero-shot segmentation on synthetic shape scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    #[arg(long, value_parser = parse_tag::<PeChoice>)]
    pub pe: Option<PeChoice>,
    #[arg(long = "sim-arch", value_parser = parse_tag::<SimArch>)]
    pub sim_arch: Option<SimArch>,
}

#[derive(Debug, Clone, Args)]
pub struct SelfTrainFlags {
    #[arg(long, value_parser = parse_tag::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long = "keep-fraction")]
    pub keep_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the catalog and the three splits into a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Backbone pretraining, joint SIM/generator training and transfer.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Dataset directory; defaults to `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop and checkpoint once this many total steps are done.
        #[arg(long = "halt-at")]
        halt_at: Option<usize>,
    },
    /// One self-training round on the unlabelled split.
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        st: SelfTrainFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Full pipeline for every (value, seed) pair of one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        st: SelfTrainFlags,
        #[arg(long, value_parser = ["pe", "temperature", "sim-arch"])]
        axis: String,
        /// Comma-separated values; each axis has a default grid.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelFlags) {
    if let Some(pe) = m.pe {
        cfg.pipeline.pe = pe;
    }
    if let Some(a) = m.sim_arch {
        cfg.pipeline.sim.arch = a;
    }
}

fn apply_self_train(cfg: &mut PipelineConfig, st: &SelfTrainFlags) {
    if let Some(s) = st.strategy {
        cfg.self_train.strategy = s;
    }
    if let Some(t) = st.temperature {
        cfg.weights.temperature = t;
    }
    if let Some(k) = st.keep_fraction {
        cfg.self_train.keep_fraction = k;
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn dataset_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.paths.dataset.clone())
}

fn image_size(data: &Dataset) -> Result<(usize, usize)> {
    let s = data
        .train
        .first()
        .or(data.test.first())
        .or(data.unlabeled.first())
        .ok_or_else(|| Error::Config("dataset has no images".into()))?
        .image
        .shape();
    Ok((s[1], s[2]))
}

fn check_catalog(model: &ClassCatalog, data: &ClassCatalog) -> Result<()> {
    if model.num_classes() != data.num_classes() {
        return Err(Error::shape(
            "eval",
            format!(
                "checkpoint classifier has {} classes, dataset catalog has {}",
                model.num_classes(),
                data.num_classes()
            ),
        ));
    }
    if model.seen != data.seen || model.unseen != data.unseen {
        return Err(Error::Config("checkpoint and dataset disagree on the seen/unseen split".into()));
    }
    Ok(())
}

fn record(run_id: String, cfg: &RunConfig, t: &Trainer, test: &Dataset) -> Result<MetricsRecord> {
    let ev = t.evaluate(&test.test)?;
    Ok(MetricsRecord {
        run_id,
        seed: t.cfg.seed,
        config_hash: cfg.hash(),
        stage_reports: t.reports.clone(),
        gzsl: ev.gzsl,
        per_class_iou: ev.per_class_iou,
        self_train: None,
    })
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<data::Manifest> {
    cfg.validate()?;
    let seed = cfg.data_seed();
    let d = generate_dataset(&cfg.data, seed)?;
    data::write_dataset(out, &d, &cfg.data, seed)
}

/// Outcome of `train`: either finished with metrics, or halted early.
pub enum TrainOutcome {
    Finished(MetricsRecord),
    Halted { global_step: usize },
}

pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    resume: Option<&Path>,
    halt_at: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (data, _) = data::read_dataset(dataset)?;
    let mut trainer = match resume {
        Some(p) => {
            let (t, cat) = state::trainer_from_checkpoint(&Checkpoint::load(p)?)?;
            check_catalog(&cat, &data.catalog)?;
            t
        }
        None => Trainer::new(cfg.pipeline(), &data.catalog, image_size(&data)?)?,
    };
    let status = trainer.run(&data.train, halt_at)?;
    state::trainer_to_checkpoint(&trainer, &data.catalog)?.save(&out.join(TRAIN_CHECKPOINT))?;
    if status == RunStatus::Halted {
        return Ok(TrainOutcome::Halted {
            global_step: trainer.global_step(),
        });
    }
    let id = format!("train-{}-s{}", trainer.cfg.pe.as_str(), trainer.cfg.seed);
    let rec = record(id, cfg, &trainer, &data)?;
    rec.save(&out.join(TRAIN_METRICS))?;
    Ok(TrainOutcome::Finished(rec))
}

pub fn cmd_selftrain(cfg: &RunConfig, st: &SelfTrainFlags, ckpt: &Path, dataset: &Path, out: &Path) -> Result<MetricsRecord> {
    let (data, _) = data::read_dataset(dataset)?;
    let (mut t, cat) = state::trainer_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    check_catalog(&cat, &data.catalog)?;
    if t.phase != crate::pipeline::Phase::Done {
        return Err(Error::Checkpoint(format!("{} holds an unfinished training run", ckpt.display())));
    }
    apply_self_train(&mut t.cfg, st);
    t.cfg.validate()?;
    let before = t.evaluate(&data.test)?.gzsl;
    let report = t.self_train_round(&data.unlabeled, &data.train)?;
    t.reports.push(report);
    state::trainer_to_checkpoint(&t, &data.catalog)?.save(&out.join(SELFTRAIN_CHECKPOINT))?;
    let strategy = t.cfg.self_train.strategy;
    let id = format!("selftrain-{}-s{}", tag(&strategy), t.cfg.seed);
    let mut rec = record(id, cfg, &t, &data)?;
    rec.self_train = Some(SelfTrainSummary {
        strategy,
        temperature: t.cfg.weights.temperature,
        keep_fraction: t.cfg.self_train.keep_fraction,
        before,
    });
    rec.save(&out.join(SELFTRAIN_METRICS))?;
    Ok(rec)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, dataset: &Path, out: &Path) -> Result<MetricsRecord> {
    let (data, _) = data::read_dataset(dataset)?;
    let (t, cat) = state::trainer_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    check_catalog(&cat, &data.catalog)?;
    let rec = record(format!("eval-s{}", t.cfg.seed), cfg, &t, &data)?;
    rec.save(&out.join(EVAL_METRICS))?;
    Ok(rec)
}

/// Default grid of an ablation axis.
pub fn default_values(axis: &str) -> Vec<String> {
    let v: &[&str] = match axis {
        "pe" => &["none", "ape", "ape-interp", "rpe"],
        "temperature" => &["0.5", "1", "2", "4", "8"],
        _ => &["conv", "attention", "self-attn", "mhsa"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn apply_axis(cfg: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    let bad = |e: String| Error::Config(format!("{axis} value: {e}"));
    match axis {
        "pe" => cfg.pipeline.pe = parse_tag(value).map_err(bad)?,
        "sim-arch" => cfg.pipeline.sim.arch = parse_tag(value).map_err(bad)?,
        "temperature" => {
            cfg.pipeline.weights.temperature = value.parse().map_err(|_| bad(format!("{value:?} is not a number")))?
        }
        _ => return Err(Error::Config(format!("unknown axis {axis}"))),
    }
    Ok(())
}

/// Data generation, training, one self-training round and test scoring,
/// all in memory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<GzslReport> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data, cfg.data_seed())?;
    let mut t = Trainer::new(cfg.pipeline(), &data.catalog, (cfg.data.image_size, cfg.data.image_size))?;
    t.run(&data.train, None)?;
    t.self_train_round(&data.unlabeled, &data.train)?;
    Ok(t.evaluate(&data.test)?.gzsl)
}

pub fn cmd_ablate(cfg: &RunConfig, axis: &str, values: &[String], seeds: &[u64]) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one value and one seed".into()));
    }
    let mut runs = Vec::new();
    for v in values {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let result = apply_axis(&mut c, axis, v).and_then(|_| run_pipeline(&c));
            runs.push(match result {
                Ok(g) => SweepRun {
                    value: v.clone(),
                    seed,
                    gzsl: Some(g),
                    error: None,
                },
                Err(e) => SweepRun {
                    value: v.clone(),
                    seed,
                    gzsl: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(SweepTable::new(axis, values, seeds, runs))
}

fn parse_csv<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::Config(format!("bad {what} entry {x:?}"))))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Execute a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve_config(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
            let m = cmd_gen_data(&cfg, &dir)?;
            for (name, s) in &m.splits {
                println!("{name}: {} samples", s.count);
            }
            println!("wrote {}", dir.display());
        }
        Command::Train {
            common,
            model,
            dataset,
            resume,
            halt_at,
        } => {
            let mut cfg = resolve_config(&common)?;
            apply_model(&mut cfg, &model);
            let out = out_dir(&common, &cfg)?;
            match cmd_train(&cfg, &dataset_dir(&dataset, &cfg), &out, resume.as_deref(), halt_at)? {
                TrainOutcome::Finished(rec) => println!("{}", rec.gzsl.row()),
                TrainOutcome::Halted { global_step } => {
                    println!("halted after {global_step} steps; resume with --resume {}", out.join(TRAIN_CHECKPOINT).display())
                }
            }
        }
        Command::Selftrain {
            common,
            st,
            checkpoint,
            dataset,
        } => {
            let cfg = resolve_config(&common)?;
            let out = out_dir(&common, &cfg)?;
            let rec = cmd_selftrain(&cfg, &st, &checkpoint, &dataset_dir(&dataset, &cfg), &out)?;
            if let Some(s) = &rec.self_train {
                println!("before {}", s.before.row());
            }
            println!("after  {}", rec.gzsl.row());
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let cfg = resolve_config(&common)?;
            let out = out_dir(&common, &cfg)?;
            let rec = cmd_eval(&cfg, &checkpoint, &dataset_dir(&dataset, &cfg), &out)?;
            println!("{}", rec.gzsl.row());
        }
        Command::Ablate {
            common,
            model,
            st,
            axis,
            values,
            seeds,
        } => {
            let mut cfg = resolve_config(&common)?;
            apply_model(&mut cfg, &model);
            apply_self_train(&mut cfg.pipeline, &st);
            let out = out_dir(&common, &cfg)?;
            let values = match values {
                Some(v) => parse_csv::<String>(&v, "value")?,
                None => default_values(&axis),
            };
            let seeds = parse_csv::<u64>(&seeds, "seed")?;
            let table = cmd_ablate(&cfg, &axis, &values, &seeds)?;
            let mut json = serde_json::to_string_pretty(&table).expect("table serializes");
            json.push('\n');
            write_text(&out.join(format!("ablate-{axis}.json")), &json)?;
            write_text(&out.join(format!("ablate-{axis}.csv")), &table.to_csv())?;
            print!("{}", table.to_text());
            for r in table.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!("{} seed {}: {}", r.value, r.seed, r.error.as_deref().unwrap_or_default());
            }
        }
    }
    Ok(())
}

/// Parse `args`, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
