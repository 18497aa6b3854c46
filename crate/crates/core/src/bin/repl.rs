//! `repl`: train, evaluate, cost, export and analyze replacement-learning
//! experiments from a TOML config.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use repl_core::autodiff::Mode;
use repl_core::builder::Method;
use repl_core::cost::{cost_report, FlopConvention};
use repl_core::deploy::{equivalence_check, export_deploy};
use repl_core::error::{ReplError, Result};
use repl_core::harness::checkpoint::{load_checkpoint, save_deploy, Checkpoint};
use repl_core::harness::config::{load_config, ExperimentConfig};
use repl_core::harness::dataset::load_dataset;
use repl_core::harness::experiment::{analyze, run_experiment, run_sweep, Outcome, RunOptions};
use repl_core::harness::metrics::{read_metrics, summary_table};
use repl_core::tensor::Tensor;
use repl_core::trainer::{evaluate, top_k_accuracy, Dataset};

#[derive(Parser)]
#[command(name = "repl", version, about = "Replacement learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config file plus overrides. Named flags win over `--set`, which wins over
/// the file.
#[derive(Args)]
struct ConfigArgs {
    config: PathBuf,
    /// Override any config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replaces the seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Replacement interval.
    #[arg(long)]
    k: Option<usize>,
    /// Runs only this method.
    #[arg(long, value_parser = ["e2e", "remove_only", "repl"])]
    method: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue a previous run in the same output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total; resume later with `--resume`.
    #[arg(long)]
    stop_after_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every cell of the experiment grid.
    Train(RunArgs),
    /// Like `train`, one independent experiment per seed on worker threads.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a dynamic or deploy checkpoint on the config's test split.
    Evaluate {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Parameter, FLOP and activation-memory report for the config's model.
    Cost {
        #[command(flatten)]
        config: ConfigArgs,
        /// Count element-wise operations too.
        #[arg(long)]
        elementwise: bool,
        #[arg(long, default_value_t = 8)]
        bytes_per_value: usize,
    },
    /// Fold a trained checkpoint into a static inference graph.
    Deploy {
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Store single-precision weights.
        #[arg(long)]
        f32: bool,
        /// Random inputs for the equivalence check.
        #[arg(long, default_value_t = 8)]
        check: usize,
    },
    /// Coefficient fits and error decomposition of a trained repl checkpoint.
    Analyze {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Markdown table of the summaries in a metrics file.
    Table { metrics: PathBuf },
}

fn usage(key: &str, detail: impl Into<String>) -> ReplError {
    ReplError::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut o = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| usage("--set", format!("`{s}` is not KEY=VALUE")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut flag = |k: &str, v: String| o.push((k.into(), v));
        if let Some(v) = &self.name {
            flag("name", toml_str(v));
        }
        if let Some(v) = &self.output {
            flag("output", toml_str(&v.display().to_string()));
        }
        if !self.seeds.is_empty() {
            flag("seeds", format!("{:?}", self.seeds));
        }
        if let Some(v) = self.epochs {
            flag("train.epochs", v.to_string());
        }
        if let Some(v) = self.batch_size {
            flag("train.batch_size", v.to_string());
        }
        if let Some(v) = self.k {
            flag("model.k", v.to_string());
            flag("k_sweep", "[]".into());
        }
        if let Some(m) = &self.method {
            flag("model.method", toml_str(m));
            flag("methods", format!("[{}]", toml_str(m)));
        }
        let mut cfg = load_config(&self.config, &o)?;
        if let Some(dir) = self.config.parent() {
            cfg.data.rebase(dir);
        }
        Ok(cfg)
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(ReplError::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn report(outcomes: &[Outcome]) {
    for o in outcomes {
        let n = o.summaries().count();
        if o.interrupted {
            println!("{}: stopped early with {n} finished cells; rerun with --resume", o.metrics.display());
        } else {
            println!("{}: {n} cells", o.metrics.display());
        }
    }
}

fn run_options(a: &RunArgs) -> RunOptions {
    RunOptions {
        resume: a.resume,
        stop_after_epochs: a.stop_after_epochs,
    }
}

fn eval_deploy(logits: Tensor, data: &Dataset) -> serde_json::Value {
    let mut v = serde_json::json!({
        "split": "test",
        "samples": data.len(),
        "top1": top_k_accuracy(&logits, &data.y, 1),
    });
    if data.classes >= 5 {
        v["top5"] = top_k_accuracy(&logits, &data.y, 5).into();
    }
    v
}

fn trained(path: &Path) -> Result<repl_core::builder::Network> {
    match load_checkpoint(path)? {
        Checkpoint::Dynamic(st) => Ok(st.net),
        _ => Err(usage("checkpoint", format!("{} is a deploy checkpoint; a training checkpoint is needed", path.display()))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => {
            let cfg = a.config.load()?;
            report(&[run_experiment(&cfg, run_options(&a))?]);
        }
        Cmd::Sweep { run, jobs } => {
            let cfg = run.config.load()?;
            report(&run_sweep(&cfg, jobs, run_options(&run))?);
        }
        Cmd::Evaluate { checkpoint, config } => {
            let cfg = config.load()?;
            let (_, test) = load_dataset(&cfg.data)?;
            let batch = cfg.train.batch_size;
            match load_checkpoint(&checkpoint)? {
                Checkpoint::Dynamic(st) => print_json(&evaluate(&st.net, &test, batch, st.epoch)?)?,
                Checkpoint::Deploy64(m) => print_json(&eval_deploy(m.logits(&test.x)?, &test))?,
                Checkpoint::Deploy32(m) => {
                    let x: Vec<f32> = test.x.data().iter().map(|&v| v as f32).collect();
                    let out: Vec<f64> = m.forward(test.len(), &x)?.into_iter().map(f64::from).collect();
                    let logits = Tensor::new(vec![test.len(), m.classes], out)?;
                    print_json(&eval_deploy(logits, &test))?
                }
            }
        }
        Cmd::Cost {
            config,
            elementwise,
            bytes_per_value,
        } => {
            let cfg = config.load()?;
            let conv = FlopConvention {
                include_elementwise: elementwise,
            };
            let mut spec = cfg.model.clone();
            spec.method = Method::Repl;
            print_json(&cost_report(&spec, conv, cfg.train.batch_size, bytes_per_value)?)?;
        }
        Cmd::Deploy {
            checkpoint,
            out,
            f32,
            check,
        } => {
            let net = trained(&checkpoint)?;
            let dm = export_deploy(&net, Mode::Eval)?;
            let [c, h, w] = net.input_shape();
            let x = Tensor::randn(&[check.max(1), c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
            let diff = if f32 {
                let d = dm.cast::<f32>();
                save_deploy(&out, &d)?;
                equivalence_check(&net, &d, &x)?
            } else {
                save_deploy(&out, &dm)?;
                equivalence_check(&net, &dm, &x)?
            };
            print_json(&serde_json::json!({
                "output": out,
                "ops": dm.op_count(),
                "max_abs_diff": diff,
            }))?;
        }
        Cmd::Analyze {
            checkpoint,
            config,
            samples,
        } => {
            let cfg = config.load()?;
            let net = trained(&checkpoint)?;
            if net.spec.method != Method::Repl {
                return Err(usage("checkpoint", "analysis needs a repl network"));
            }
            let (_, test) = load_dataset(&cfg.data)?;
            let (fits, error) = analyze(&net, &test, samples.unwrap_or(cfg.analysis.samples))?;
            print_json(&serde_json::json!({ "fits": fits, "error": error }))?;
        }
        Cmd::Table { metrics } => {
            if !metrics.exists() {
                return Err(usage("metrics", format!("{} does not exist", metrics.display())));
            }
            emit(&summary_table(&read_metrics(&metrics)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
