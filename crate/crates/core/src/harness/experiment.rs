//! Experiment grids: every (k, method, variant, seed) cell is trained,
//! evaluated per epoch, checkpointed and summarized into one metrics file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::analysis::{site_fits, telescoped_deviation};
use crate::builder::{build_network, stage_removal_plan, Method, Network, NetworkSpec};
use crate::cost::{cost_report, FlopConvention};
use crate::error::{ReplError, Result};
use crate::trainer::{evaluate, train_epoch, Dataset, Metrics, OptimState};

use super::checkpoint::{load_checkpoint, save_dynamic, Checkpoint, TrainingState};
use super::config::ExperimentConfig;
use super::dataset::load_dataset;
use super::metrics::{read_metrics, MetricsWriter, Record, RunId};

/// Variant label used for methods that have no replacement layers.
pub const NO_VARIANT: &str = "-";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip finished cells and continue unfinished ones from their checkpoints.
    pub resume: bool,
    /// Stop after this many epochs in total, leaving the run resumable.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub metrics: PathBuf,
    /// Every record in the metrics file after the run.
    pub records: Vec<Record>,
    pub interrupted: bool,
}

impl Outcome {
    pub fn summaries(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| matches!(r, Record::Summary { .. }))
    }
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(&cfg.name)
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    run_dir(cfg).join("metrics.jsonl")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, run: &RunId) -> PathBuf {
    run_dir(cfg).join("checkpoints").join(format!("{}.ckpt", run.label()))
}

/// A cell: its identity and the network spec it trains.
#[derive(Clone, Debug)]
pub struct Cell {
    pub run: RunId,
    pub spec: NetworkSpec,
}

/// Grid in execution order. The end-to-end baseline does not depend on `k`,
/// so it runs once per seed under the first swept `k`.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let ks = cfg.ks();
    let mut out = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        for &seed in &cfg.seeds {
            for method in cfg.methods() {
                let mut spec = cfg.model.with_method(method);
                spec.k = k;
                match method {
                    Method::E2e if ki > 0 => {}
                    Method::Repl => {
                        for nv in cfg.variants() {
                            let mut spec = spec.clone();
                            spec.variant = nv.variant;
                            out.push(Cell {
                                run: RunId {
                                    method,
                                    variant: nv.name.clone(),
                                    k,
                                    seed,
                                },
                                spec,
                            });
                        }
                    }
                    _ => out.push(Cell {
                        run: RunId {
                            method,
                            variant: NO_VARIANT.into(),
                            k,
                            seed,
                        },
                        spec,
                    }),
                }
            }
        }
    }
    out
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    writer: MetricsWriter,
    history: Vec<Record>,
    budget: Option<usize>,
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Outcome> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.data)?;
    if train.sample_shape() != cfg.model.input {
        return Err(ReplError::Config {
            key: "model.input".into(),
            detail: format!("{:?} does not match the dataset shape {:?}", cfg.model.input, train.sample_shape()),
        });
    }
    let path = metrics_path(cfg);
    let history = if opts.resume { read_metrics(&path)? } else { Vec::new() };
    if !opts.resume && path.exists() {
        return Err(ReplError::Config {
            key: "output".into(),
            detail: format!("{} already exists; pass resume or choose another output", path.display()),
        });
    }
    let mut ctx = Ctx {
        cfg,
        train: &train,
        test: &test,
        writer: MetricsWriter::open(&path)?,
        history,
        budget: opts.stop_after_epochs,
    };
    let planned: BTreeSet<usize> = ctx
        .history
        .iter()
        .filter_map(|r| match r {
            Record::Plan { k, .. } => Some(*k),
            _ => None,
        })
        .collect();
    for k in cfg.ks() {
        if planned.contains(&k) {
            continue;
        }
        let mut spec = cfg.model.clone();
        spec.k = k;
        let plan = stage_removal_plan(&spec)?;
        ctx.writer.emit(&Record::Plan {
            k,
            removed: plan.count(),
            depth: plan.depth(),
            ratio: plan.ratio(),
        })?;
    }
    let done: BTreeSet<RunId> = ctx
        .history
        .iter()
        .filter_map(|r| match r {
            Record::Summary { run, .. } => Some(run.clone()),
            _ => None,
        })
        .collect();
    let mut interrupted = false;
    for cell in cells(cfg) {
        if done.contains(&cell.run) {
            log::info!("{}: already summarized", cell.run.label());
            continue;
        }
        let finished = run_cell(&mut ctx, &cell, opts.resume).inspect_err(|e| log::error!("{}: {e}", cell.run.label()))?;
        if !finished {
            interrupted = true;
            break;
        }
    }
    Ok(Outcome {
        records: read_metrics(&path)?,
        metrics: path,
        interrupted,
    })
}

/// Last epoch record of `run` in `history`.
fn last_epoch<'h>(history: &'h [Record], run: &RunId) -> Option<(&'h Metrics, &'h Metrics)> {
    history.iter().rev().find_map(|r| match r {
        Record::Epoch { run: r_run, train, test } if r_run == run => Some((train, test)),
        _ => None,
    })
}

fn start_state(ctx: &Ctx, cell: &Cell, resume: bool, ckpt: &Path) -> Result<TrainingState> {
    let tc = ctx.cfg.train.resolve(cell.spec.family);
    if resume && ckpt.exists() {
        if let Checkpoint::Dynamic(st) = load_checkpoint(ckpt)? {
            if st.net.spec != cell.spec || st.net.seed != cell.run.seed {
                return Err(ReplError::Checkpoint(format!(
                    "{} was written for a different model or seed",
                    ckpt.display()
                )));
            }
            if st.optim.as_ref().is_some_and(|o| o.optimizer == tc.optimizer) {
                log::info!("{}: resuming after epoch {}", cell.run.label(), st.epoch);
                return Ok(st);
            }
            return Err(ReplError::Checkpoint(format!("{} holds a different optimizer", ckpt.display())));
        }
        return Err(ReplError::Checkpoint(format!("{} is not a training checkpoint", ckpt.display())));
    }
    let net = build_network(&cell.spec, cell.run.seed)?;
    let optim = OptimState::new(tc.optimizer, &net.store)?;
    Ok(TrainingState {
        net,
        optim: Some(optim),
        epoch: 0,
    })
}

/// Trains one cell to completion or until the epoch budget runs out.
/// Returns whether the cell finished.
fn run_cell(ctx: &mut Ctx, cell: &Cell, resume: bool) -> Result<bool> {
    let cfg = ctx.cfg;
    let tc = cfg.train.resolve(cell.spec.family);
    let ckpt = checkpoint_path(cfg, &cell.run);
    let TrainingState { mut net, optim, epoch } = start_state(ctx, cell, resume, &ckpt)?;
    let mut optim = optim.expect("training state carries an optimizer");
    let stop_at = cfg.train.stop_at_train_accuracy;
    let mut last: Option<(Metrics, Metrics)> = if epoch > 0 {
        last_epoch(&ctx.history, &cell.run).map(|(a, b)| (a.clone(), b.clone()))
    } else {
        None
    };
    let mut stopped = last
        .as_ref()
        .is_some_and(|(tr, _)| stop_at.is_some_and(|s| tr.top1 >= s));
    let mut e = epoch;
    while e < tc.epochs && !stopped {
        if ctx.budget == Some(0) {
            return Ok(false);
        }
        let tr = train_epoch(&mut net, ctx.train, &mut optim, &tc, cell.run.seed, e)?;
        let te = evaluate(&net, ctx.test, tc.batch_size, e)?;
        log::info!("{} epoch {e}: train {:.4}, test {:.4}", cell.run.label(), tr.top1, te.top1);
        stopped = stop_at.is_some_and(|s| tr.top1 >= s);
        e += 1;
        if e % cfg.checkpoint_every == 0 || e == tc.epochs || stopped {
            save_dynamic(&ckpt, &net, Some(&optim), e)?;
        }
        let rec = Record::Epoch {
            run: cell.run.clone(),
            train: tr.clone(),
            test: te.clone(),
        };
        ctx.writer.emit(&rec)?;
        ctx.history.push(rec);
        last = Some((tr, te));
        if let Some(b) = ctx.budget.as_mut() {
            *b -= 1;
        }
    }
    let (train, test) = match last {
        Some(l) => l,
        None => {
            // zero epochs, or a checkpoint without records: measure as is
            let tr = evaluate(&net, ctx.train, tc.batch_size, e)?;
            let te = evaluate(&net, ctx.test, tc.batch_size, e)?;
            (Metrics { split: "train".into(), ..tr }, te)
        }
    };
    let (fits, error) = if cell.run.method == Method::Repl && cfg.analysis.enabled {
        let (f, r) = analyze(&net, ctx.test, cfg.analysis.samples)?;
        (Some(f), Some(r))
    } else {
        (None, None)
    };
    ctx.writer.emit(&Record::Summary {
        run: cell.run.clone(),
        epochs: e,
        train,
        test,
        trainable_params: net.trainable_count(),
        cost: cost_report(&cell.spec, FlopConvention::default(), tc.batch_size, 8)?,
        fits,
        error,
    })?;
    Ok(true)
}

/// Coefficient fits and error decomposition of a trained repl network
/// against its own end-to-end reference, on the first `samples` test inputs.
pub fn analyze(
    net: &Network,
    test: &Dataset,
    samples: usize,
) -> Result<(Vec<crate::analysis::SiteFit>, crate::analysis::ErrorReport)> {
    let reference = net.e2e_reference()?;
    let n = samples.min(test.len()).max(1);
    let inputs = test.x.slice_rows(0, n);
    Ok((site_fits(&reference, net)?, telescoped_deviation(&reference, net, &inputs)?))
}

/// Runs each seed as its own experiment under `<name>/seed<seed>` on up to
/// `jobs` worker threads. Outcomes come back in seed order.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize, opts: RunOptions) -> Result<Vec<Outcome>> {
    cfg.validate()?;
    let parts: Vec<ExperimentConfig> = cfg
        .seeds
        .iter()
        .map(|&s| ExperimentConfig {
            name: format!("{}/seed{s}", cfg.name),
            seeds: vec![s],
            ..cfg.clone()
        })
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<Outcome>>>> = parts.iter().map(|_| Default::default()).collect();
    std::thread::scope(|sc| {
        for _ in 0..jobs.clamp(1, parts.len()) {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(p) = parts.get(i) else { break };
                let r = run_experiment(p, opts);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("unpoisoned").expect("every cell ran"))
        .collect()
}
