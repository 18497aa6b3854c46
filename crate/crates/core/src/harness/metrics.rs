//! Newline-delimited JSON records. Files are only ever appended to.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{ErrorReport, SiteFit};
use crate::builder::Method;
use crate::cost::CostReport;
use crate::error::{ReplError, Result};
use crate::trainer::Metrics;

/// Identifies one training cell of an experiment grid.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunId {
    pub method: Method,
    pub variant: String,
    pub k: usize,
    pub seed: u64,
}

impl RunId {
    /// File-name friendly label.
    pub fn label(&self) -> String {
        match self.variant.as_str() {
            "-" => format!("{}-k{}-s{}", self.method.name(), self.k, self.seed),
            v => format!("{}-{v}-k{}-s{}", self.method.name(), self.k, self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Plan {
        k: usize,
        removed: usize,
        depth: usize,
        ratio: f64,
    },
    Epoch {
        run: RunId,
        train: Metrics,
        test: Metrics,
    },
    Summary {
        run: RunId,
        epochs: usize,
        train: Metrics,
        test: Metrics,
        trainable_params: usize,
        cost: CostReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fits: Option<Vec<SiteFit>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<ErrorReport>,
    },
}

impl Record {
    pub fn run(&self) -> Option<&RunId> {
        match self {
            Record::Plan { .. } => None,
            Record::Epoch { run, .. } | Record::Summary { run, .. } => Some(run),
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ReplError::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ReplError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn emit(&mut self, record: &Record) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| ReplError::io(&self.path, e))
    }
}

pub fn parse_record(line: &str) -> Result<Record> {
    Ok(serde_json::from_str(line)?)
}

/// Every record in `path`; a missing file reads as empty.
pub fn read_metrics(path: &Path) -> Result<Vec<Record>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ReplError::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| ReplError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_record(&line)?);
        }
    }
    Ok(out)
}

/// Markdown table of the summary records: one row per run.
pub fn summary_table(records: &[Record]) -> String {
    let mut out = String::from(
        "| method | variant | k | seed | epochs | train acc | test acc | trainable params | params | FLOPs | act. memory |\n\
         |---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in records {
        if let Record::Summary {
            run,
            epochs,
            train,
            test,
            trainable_params,
            cost,
            ..
        } = r
        {
            let (params, flops, mem) = match run.method {
                Method::E2e => (cost.params_e2e, cost.flops_e2e, cost.act_mem_e2e.to_string()),
                Method::Repl => (cost.params_repl, cost.flops_repl, cost.act_mem_repl.to_string()),
                Method::RemoveOnly => (cost.params_remove_only, test.flops, "-".to_string()),
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {} | {} | {} | {} |\n",
                run.method.name(),
                run.variant,
                run.k,
                run.seed,
                epochs,
                train.top1,
                test.top1,
                trainable_params,
                params,
                flops,
                mem
            ));
        }
    }
    out
}
