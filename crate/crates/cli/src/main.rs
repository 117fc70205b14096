//! `diffpo` command line: generate → train → sample → evaluate, plus the
//! perturbed-propensity sample-size experiment and point baselines.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use diffpo_core::config::{DataSource, ExperimentConfig};
use diffpo_core::data::{load_csv, load_oracle_csv, write_csv, write_oracle_csv, CsvSchema, DataScaler, Dataset};
use diffpo_core::evaluation::{
    evaluate_model, fit_st_learners, in_sample_subset, run_orthogonality_experiment, score_point_predictions,
    PosteriorSamples, ORTHOGONALITY_COLUMNS,
};
use diffpo_core::propensity::PerturbationMode;
use diffpo_core::training::{train, LossKind, TrainedModel};
use diffpo_core::{Error, Result};

const TRAIN_CSV: &str = "train.csv";
const TEST_CSV: &str = "test.csv";
const ORACLE_CSV: &str = "oracle.csv";
const MODEL_DIR: &str = "model";
const LOCK_FILE: &str = ".diffpo.lock";

#[derive(Parser)]
#[command(
    name = "diffpo",
    version,
    about = "Potential-outcome distributions with conditional diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the configured generator and write train/test CSVs plus the oracle sidecar.
    Generate,
    /// Fit the propensity model and the denoiser on `train.csv`.
    Train,
    /// Draw potential-outcome samples for every test unit.
    Sample,
    /// Score the trained model on both splits against the oracle.
    Evaluate,
    /// Out-of-sample PEHE over training sizes and seeds with perturbed propensities.
    SimulateOrthogonality,
    /// Fit S- and T-learner point baselines and score them.
    Baselines,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[arg(long = "perturb-propensity", global = true, value_enum)]
    perturb_propensity: Option<PerturbArg>,
    /// Small sizes for a quick end-to-end run.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Orthogonal,
    Unweighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    None,
    Uniform,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.smoke {
            cfg.apply_smoke();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(l) = self.loss {
            cfg.train.loss = match l {
                LossArg::Orthogonal => LossKind::Orthogonal,
                LossArg::Unweighted => LossKind::Unweighted,
            };
        }
        if let Some(p) = self.perturb_propensity {
            cfg.train.perturbation = match p {
                PerturbArg::None => PerturbationMode::None,
                PerturbArg::Uniform => PerturbationMode::UniformRandom,
            };
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exclusive ownership of the output directory for the life of the process.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "output directory {} is locked by another run ({})",
                    dir.display(),
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id()).ok();
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

/// `train.csv`/`test.csv` from the output directory with their oracle
/// attached when the sidecar exists.
fn load_splits(cfg: &ExperimentConfig, need_oracle: bool) -> Result<(Dataset, Dataset)> {
    let schema = match &cfg.data {
        DataSource::Csv { schema, .. } => schema.clone(),
        DataSource::Dgp(_) => CsvSchema::default(),
    };
    let mut out = Vec::with_capacity(2);
    for (file, split) in [(TRAIN_CSV, "train"), (TEST_CSV, "test")] {
        let path = cfg.out.join(file);
        if !path.exists() {
            return Err(Error::Io {
                path,
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "dataset file not found; run `generate` first",
                ),
            });
        }
        let mut data = load_csv(&path, &schema)?;
        let oracle_path = cfg.out.join(ORACLE_CSV);
        if oracle_path.exists() {
            data = data.with_oracle(load_oracle_csv(&oracle_path, split)?)?;
        } else if need_oracle {
            return Err(Error::Io {
                path: oracle_path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "oracle sidecar required for this command"),
            });
        }
        out.push(data);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

fn load_model(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let model = TrainedModel::load(&cfg.out.join(MODEL_DIR))?;
    let (have, want) = (model.schedule.steps(), cfg.train.schedule.steps);
    if have != want {
        return Err(Error::Configuration(format!(
            "checkpoint was trained with T={have} but the configuration sets T={want}"
        )));
    }
    Ok(model)
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let stamp = cfg.stamp()?;
    let (train_data, test_data) = cfg.load_split()?;
    write_csv(&cfg.out.join(TRAIN_CSV), &train_data, Some(&stamp))?;
    write_csv(&cfg.out.join(TEST_CSV), &test_data, Some(&stamp))?;
    // CSV sources carry no oracle, so no sidecar.
    if let (Some(tr), Some(te)) = (train_data.oracle(), test_data.oracle()) {
        write_oracle_csv(&cfg.out.join(ORACLE_CSV), &[("train", tr), ("test", te)], Some(&stamp))?;
    }
    write_text(&cfg.out.join("config.toml"), &format!("# {stamp}\n{}", cfg.to_toml()?))?;
    Ok(json!({ "train_rows": train_data.n(), "test_rows": test_data.n() }))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let (train_data, _) = load_splits(cfg, false)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(cfg.out.join(MODEL_DIR));
    let model = train(&train_data, &tc)?;
    let stamp = cfg.stamp()?;
    write_text(
        &cfg.out.join("loss.csv"),
        &format!("# {stamp}\n{}", model.report.loss_csv()),
    )?;
    write_json(
        &cfg.out.join("train_report.json"),
        &json!({ "config_hash": cfg.hash()?, "seed": cfg.seed, "report": model.report }),
    )?;
    Ok(json!({ "epochs": model.report.epoch_loss.len(), "final_loss": model.report.final_loss() }))
}

fn cmd_sample(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let (_, test_data) = load_splits(cfg, false)?;
    let model = load_model(cfg)?;
    let samples = PosteriorSamples::draw(&model, &test_data, cfg.eval.m, cfg.eval.seed)?;
    let path = cfg.out.join("samples.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut body = format!("# {}\nunit,arm,draw,value\n", cfg.stamp()?);
    for i in 0..samples.units {
        for arm in 0..2 {
            for (k, v) in samples.unit(i, arm).iter().enumerate() {
                body.push_str(&format!("{i},{arm},{k},{v:?}\n"));
            }
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_err(&path))?;
    Ok(json!({ "units": samples.units, "m": samples.m }))
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let (train_data, test_data) = load_splits(cfg, true)?;
    let model = load_model(cfg)?;
    let hash = cfg.hash()?;
    let eval = evaluate_model(&model, &train_data, &test_data, &cfg.eval, &hash)?;
    write_text(&cfg.out.join("eval_report.json"), &eval.report.to_json()?)?;
    write_text(
        &cfg.out.join("eval_units.csv"),
        &format!("# {}\n{}", cfg.stamp()?, eval.rows_csv()),
    )?;
    serde_json::to_value(&eval.report.out_of_sample).map_err(|e| Error::Serialization(e.to_string()))
}

fn cmd_simulate(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let DataSource::Dgp(spec) = &cfg.data else {
        return Err(Error::Configuration(
            "the sample-size experiment needs a generator data source".into(),
        ));
    };
    let path = cfg.out.join("orthogonality.csv");
    let mut f = File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "# {}\n{}", cfg.stamp()?, ORTHOGONALITY_COLUMNS.join(",")).map_err(io_err(&path))?;
    let rows = run_orthogonality_experiment(spec, &cfg.orthogonality, &cfg.train, |row| {
        writeln!(f, "{}", row.csv_line())
            .and_then(|_| f.flush())
            .map_err(io_err(&path))?;
        log::info!("n={} seed={} pehe={:.4}", row.n, row.seed, row.pehe);
        Ok(())
    })?;
    Ok(json!({ "rows": rows.len() }))
}

fn cmd_baselines(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let (train_data, test_data) = load_splits(cfg, true)?;
    let learners = fit_st_learners(&train_data, &cfg.baselines, cfg.train.seed)?;
    let scale = DataScaler::fit(&train_data).outcome_scale();
    let in_data = in_sample_subset(&train_data, &cfg.eval);
    let mut out = serde_json::Map::new();
    let named = [
        ("s_learner", Some(&learners.s_learner)),
        ("t_learner", learners.t_learner.as_ref()),
    ];
    for (name, learner) in named {
        let Some(learner) = learner else {
            out.insert(name.into(), serde_json::Value::Null);
            continue;
        };
        let mut entry = serde_json::Map::new();
        for (split, data) in [("in_sample", &in_data), ("out_of_sample", &test_data)] {
            let metrics = score_point_predictions(&learner.predict(data)?, data.require_oracle()?, scale, &cfg.eval)?;
            entry.insert(split.into(), json!(metrics));
        }
        out.insert(name.into(), entry.into());
    }
    let report = json!({ "config_hash": cfg.hash()?, "seed": cfg.seed, "learners": out });
    write_json(&cfg.out.join("baselines.json"), &report)?;
    Ok(report["learners"].clone())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.common.resolve()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let (stage, f): (&str, fn(&ExperimentConfig) -> Result<serde_json::Value>) = match cli.command {
        Command::Generate => ("generate", cmd_generate),
        Command::Train => ("train", cmd_train),
        Command::Sample => ("sample", cmd_sample),
        Command::Evaluate => ("evaluate", cmd_evaluate),
        Command::SimulateOrthogonality => ("simulate-orthogonality", cmd_simulate),
        Command::Baselines => ("baselines", cmd_baselines),
    };
    let start = Instant::now();
    let summary = f(&cfg)?;
    // Wall-clock time lives apart from the deterministic artifacts.
    write_json(
        &cfg.out.join(format!("timing_{stage}.json")),
        &json!({ "stage": stage, "seconds": start.elapsed().as_secs_f64(), "threads": diffpo_core::parallel::worker_count() }),
    )?;
    println!("{}", json!({ "stage": stage, "out": cfg.out, "summary": summary }));
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("internal", Error::kind);
    // Library errors already render their source; the alternate form would repeat it.
    let message = match err.downcast_ref::<Error>() {
        Some(e) => e.to_string(),
        None => format!("{err:#}"),
    };
    json!({ "error": kind, "message": message })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
