//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation/config/data error, 2 I/O or
//! checkpoint error. Failures print one JSON line to stderr:
//! `{"error":"<kind>","message":"..."}`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baselines::init_baseline;
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_csv, mix, save_csv, split_dataset, Dataset, FeatureStats};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Scorer};
use crate::gradcheck::model_grad_check;
use crate::model::mae::{init_mae, transfer_encoder};
use crate::model::transformer::init_classifier;
use crate::training::{baseline_loop, finetune_loop, pretrain_loop, Checkpoint, ModelKind, TrainMode, TrainRun};

#[derive(Debug, Parser)]
#[command(name = "edgeformer", version, about = "Edge Transformer training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train.csv, val.csv).
    Generate,
    /// Masked-autoencoder pre-training on paths.train.
    Pretrain,
    /// Fine-tune the classifier on the labeled edges of paths.train.
    Finetune,
    /// Train the baseline named by baseline.kind.
    Baseline,
    /// Rank paths.val and print the report.
    Evaluate,
    /// Check analytic gradients of the configured model.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Baseline => "baseline",
            Command::Evaluate => "evaluate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Exit status for an error: 2 for I/O and checkpoint faults, else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub config: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

struct OutDir {
    dir: PathBuf,
    lock: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl OutDir {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join(".edgeformer.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| Error::io(&lock, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            lock,
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let p = self.path(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.artifacts.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.record(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, key: &str) -> Result<Dataset> {
    load_csv(&cfg.require_path(key)?, None)
}

fn trace_lines(trace: &[f64]) -> String {
    trace
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\n", serde_json::json!({ "epoch": i + 1, "loss": l })))
        .collect()
}

fn save_run(out: &mut OutDir, stdout: &mut dyn Write, run: &TrainRun, stem: &str) -> Result<()> {
    out.write(&format!("{stem}.ckpt"), &run.checkpoint.to_bytes()?)?;
    let trace = trace_lines(&run.trace);
    out.write(&format!("{stem}_trace.jsonl"), trace.as_bytes())?;
    stdout.write_all(trace.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Runs one parsed command, writing the report or trace to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<Manifest> {
    let cfg = resolve_config(cli)?;
    let seed = cfg.seed()?;
    let mut out = OutDir::open(&cli.out)?;
    let init_rng = || ChaCha8Rng::seed_from_u64(mix(seed, 0x1_1417));

    match cli.command {
        Command::Generate => {
            let spec = cfg.dataset_spec()?;
            let data = generate_dataset(&spec)?;
            let (train, val) = split_dataset(&data, spec.split_ratio, seed)?;
            for (name, d) in [("train.csv", &train), ("val.csv", &val)] {
                save_csv(d, &out.path(name))?;
                out.record(name)?;
            }
            let summary = serde_json::json!({
                "train_edges": train.len(),
                "val_edges": val.len(),
                "labeled_edges": data.labeled().len(),
                "unlabeled_edges": data.unlabeled().len(),
            });
            writeln!(stdout, "{summary}").map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::Pretrain => {
            let data = load_data(&cfg, "paths.train")?;
            let model = cfg.model_config(data.widths)?;
            let tcfg = cfg.train_config(TrainMode::Pretrain)?;
            let stats = FeatureStats::fit(&data);
            let run = pretrain_loop(&data, &stats, &model, &tcfg, init_mae(&model, &mut init_rng())?)?;
            save_run(&mut out, stdout, &run, "pretrain")?;
        }
        Command::Finetune => {
            let data = load_data(&cfg, "paths.train")?.labeled();
            if data.is_empty() {
                return Err(Error::Validation("training data has no labeled edges to fine-tune on".into()));
            }
            let tcfg = cfg.train_config(TrainMode::Finetune)?;
            let (model, stats, init) = match cfg.path("paths.init") {
                Some(p) => {
                    let pre = Checkpoint::load(&p)?;
                    if pre.kind != ModelKind::Mae {
                        return Err(Error::Validation(format!("{} is not a pre-training checkpoint", p.display())));
                    }
                    if pre.config.widths() != data.widths {
                        return Err(Error::Schema(format!(
                            "checkpoint expects widths {:?}, dataset has {:?}",
                            pre.config.widths(),
                            data.widths
                        )));
                    }
                    let init = transfer_encoder(&pre.params, &pre.config, &mut init_rng())?;
                    (pre.config, pre.stats, init)
                }
                None => {
                    let model = cfg.model_config(data.widths)?;
                    let init = init_classifier(&model, &mut init_rng())?;
                    (model, FeatureStats::fit(&data), init)
                }
            };
            let run = finetune_loop(&data, &stats, &model, &tcfg, init)?;
            save_run(&mut out, stdout, &run, "finetune")?;
        }
        Command::Baseline => {
            let kind = cfg.baseline_kind()?;
            let data = load_data(&cfg, "paths.train")?.labeled();
            if data.is_empty() {
                return Err(Error::Validation("training data has no labeled edges".into()));
            }
            let model = cfg.model_config(data.widths)?;
            let tcfg = cfg.train_config(TrainMode::Baseline(kind))?;
            let stats = FeatureStats::fit(&data);
            let run = baseline_loop(&data, &stats, &model, kind, &tcfg, init_baseline(kind, &model, &mut init_rng())?)?;
            save_run(&mut out, stdout, &run, &format!("baseline_{kind}"))?;
        }
        Command::Evaluate => {
            let data = load_data(&cfg, "paths.val")?;
            let default_scorer = if cfg.raw("eval.checkpoint").is_some() { "checkpoint" } else { "" };
            let scorer = match cfg.raw("eval.scorer").unwrap_or(default_scorer) {
                "checkpoint" => Scorer::from_checkpoint(&Checkpoint::load(&cfg.require_path("eval.checkpoint")?)?)?,
                "intimacy" => Scorer::Intimacy { index: 0 },
                "fresh" => {
                    let model = cfg.model_config(data.widths)?;
                    Scorer::Classifier {
                        params: init_classifier(&model, &mut init_rng())?,
                        config: model,
                        stats: FeatureStats::fit(&data),
                    }
                }
                "" => return Err(Error::Config("set eval.checkpoint or eval.scorer".into())),
                other => return Err(Error::Config(format!("unknown eval.scorer '{other}'"))),
            };
            let report = evaluate(&scorer, &data, seed)?;
            let line = format!("{}\n", report.to_json());
            out.write("report.json", line.as_bytes())?;
            stdout.write_all(line.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::Gradcheck => {
            let widths = cfg.dataset_spec()?.widths;
            let model = cfg.model_config(widths)?;
            let r = model_grad_check(&model, 4, seed, 1e-5)?;
            let line = format!("{}\n", serde_json::to_string(&r).expect("serializable"));
            out.write("gradcheck.json", line.as_bytes())?;
            stdout.write_all(line.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
        }
    }

    let manifest = Manifest {
        command: cli.command.name().to_string(),
        config_sha256: cfg.hash(),
        config: cfg.canonical(),
        seed,
        artifacts: out.artifacts.clone(),
    };
    let path = out.path(&format!("manifest_{}.json", cli.command.name()));
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    Ok(manifest)
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let line = serde_json::json!({ "error": "usage", "message": first });
            let _ = writeln!(stderr, "{line}");
            return 1;
        }
    };
    match execute(&cli, stdout) {
        Ok(_) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(&e));
            exit_code(&e)
        }
    }
}
