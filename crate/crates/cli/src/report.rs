//! On-disk artifacts of a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use degm_core::degm::{ExpansionRecord, NodeKind};
use degm_core::replay::EvalRecord;
use degm_core::train::EpochMetrics;

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "run_id,seed,method,task_index,eval_task,nll,elbo,kl_term,recon_term,k_prime,epoch,wall_ms";

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.degm";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SNAPSHOT_INDEX: &str = "index.json";
pub const EVAL_FILE: &str = "eval.json";
pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";

/// One metrics.csv row: an epoch row leaves the evaluation columns empty,
/// an evaluation row leaves `epoch` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: Method,
    pub task_index: usize,
    pub eval_task: Option<usize>,
    pub nll: Option<f64>,
    pub elbo: f64,
    pub kl_term: f64,
    pub recon_term: f64,
    pub k_prime: usize,
    pub epoch: Option<usize>,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn epoch(cfg: &RunConfig, task: usize, e: &EpochMetrics, k_prime: usize, wall_ms: u64) -> Self {
        Self {
            run_id: cfg.run_id(),
            seed: cfg.seed,
            method: cfg.method,
            task_index: task,
            eval_task: None,
            nll: None,
            elbo: e.objective,
            kl_term: e.kl,
            recon_term: e.recon,
            k_prime,
            epoch: Some(e.epoch),
            wall_ms,
        }
    }

    pub fn eval(cfg: &RunConfig, r: &EvalRecord, wall_ms: u64) -> Self {
        Self {
            run_id: cfg.run_id(),
            seed: cfg.seed,
            method: cfg.method,
            task_index: r.after_task,
            eval_task: Some(r.eval_task),
            nll: Some(r.nll),
            elbo: r.elbo,
            kl_term: r.kl,
            recon_term: r.recon,
            k_prime: r.k_prime,
            epoch: None,
            wall_ms,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub config: String,
    pub checkpoint: String,
    pub metrics: String,
    pub snapshots: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub method: Method,
    pub tasks: usize,
    /// Row `r` holds the NLL of tasks `1..=r+1` after learning task `r+1`.
    pub nll_matrix: Vec<Vec<f64>>,
    pub nll_se_matrix: Vec<Vec<f64>>,
    pub elbo_matrix: Vec<Vec<f64>>,
    /// Mean of each row of `nll_matrix`.
    pub average_nll: Vec<f64>,
    pub final_average_nll: f64,
    pub eval_k_prime: usize,
    /// Node chosen for each evaluation, same layout as `nll_matrix`.
    pub selected_nodes: Option<Vec<Vec<usize>>>,
    pub node_kinds: Option<Vec<NodeKind>>,
    pub expansion_log: Vec<ExpansionRecord>,
    pub parameter_count: usize,
    pub wall_clock_ms: u64,
    pub config: RunConfig,
    pub artifacts: Artifacts,
}

impl RunReport {
    /// Lower-triangular matrices from the evaluation records.
    pub fn matrices(evals: &[EvalRecord], tasks: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<Vec<usize>>>) {
        let mut nll = vec![Vec::new(); tasks];
        let mut se = vec![Vec::new(); tasks];
        let mut elbo = vec![Vec::new(); tasks];
        let mut nodes = vec![Vec::new(); tasks];
        let mut any_node = false;
        for r in evals {
            let row = r.after_task - 1;
            nll[row].push(r.nll);
            se[row].push(r.nll_se);
            elbo[row].push(r.elbo);
            if let Some(n) = r.node {
                any_node = true;
                nodes[row].push(n);
            }
        }
        (nll, se, elbo, any_node.then_some(nodes))
    }
}

/// Mean and standard error per field over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_average_nll: MeanSe,
    /// Per task, final-row NLL.
    pub final_nll_per_task: BTreeMap<usize, MeanSe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mean, se) = degm_core::vae::mean_and_se(values);
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub time: usize,
    pub task: usize,
    pub epoch: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotIndex {
    pub snapshots: Vec<SnapshotEntry>,
    /// Task → mixed-set file.
    pub mixed: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub nll: f64,
    pub nll_se: f64,
    pub batches: usize,
    pub selection_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub run_id: String,
    pub k_prime: usize,
    pub batch_size: usize,
    pub per_task: Vec<TaskEval>,
    pub average_nll: f64,
    /// Fraction of test batches routed to the node trained on their task.
    pub selection_accuracy: Option<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
