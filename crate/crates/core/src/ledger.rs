//! Time-indexed diagnostics: per-epoch model snapshots and the bound terms
//! measured on them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{lelbo_breakdown, BreakdownConfig, Hypothesis, HypothesisPool};
use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::replay::{GrObserver, MixedDataset};
use crate::tensor::Tensor;
use crate::train::EpochMetrics;
use crate::vae::VaeModel;

/// CSV header of [`DiagnosticsLedger::write_csv`].
pub const LEDGER_HEADER: &str = "time,task,epoch,source_risk,target_risk,discrepancy,slack,kl_gap,residual";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub time: usize,
    pub task: usize,
    pub epoch: usize,
    pub source_risk: f64,
    pub target_risk: f64,
    pub discrepancy: f64,
    pub slack: f64,
    pub kl_gap: f64,
    pub residual: f64,
}

/// Append-only record list with a non-decreasing time index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsLedger {
    records: Vec<LedgerRecord>,
}

impl DiagnosticsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, r: LedgerRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.time < last.time {
                return Err(Error::Contract(format!("ledger time {} after {}", r.time, last.time)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Last record of each task, in task order.
    pub fn task_ends(&self) -> Vec<LedgerRecord> {
        let mut ends: BTreeMap<usize, LedgerRecord> = BTreeMap::new();
        for r in &self.records {
            ends.insert(r.task, *r);
        }
        ends.into_values().collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<ledger>", e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = rd.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
        if header != LEDGER_HEADER {
            return Err(Error::InvalidArgument(format!(
                "{}: header `{header}` differs from `{LEDGER_HEADER}`",
                path.display()
            )));
        }
        let mut ledger = Self::new();
        for r in rd.deserialize() {
            ledger.append(r.map_err(csv_err)?)?;
        }
        Ok(ledger)
    }

    pub fn summary(&self) -> LedgerSummary {
        let col = |f: fn(&LedgerRecord) -> f64| -> Vec<(f64, f64)> {
            self.records.iter().map(|r| (r.time as f64, f(r))).collect()
        };
        LedgerSummary {
            records: self.records.len(),
            discrepancy_slope: slope(&col(|r| r.discrepancy)),
            kl_gap_slope: slope(&col(|r| r.kl_gap)),
            source_risk_slope: slope(&col(|r| r.source_risk)),
            target_risk_slope: slope(&col(|r| r.target_risk)),
            task_ends: self.task_ends(),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub records: usize,
    pub discrepancy_slope: f64,
    pub kl_gap_slope: f64,
    pub source_risk_slope: f64,
    pub target_risk_slope: f64,
    pub task_ends: Vec<LedgerRecord>,
}

/// Least-squares slope of `y` on `x`; 0 for fewer than two distinct `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
}

/// A model frozen at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub task: usize,
    pub epoch: usize,
    pub model: VaeModel,
}

/// Collects snapshots and the mixed training sets of a replay run.
#[derive(Debug, Clone, Default)]
pub struct SnapshotRecorder {
    pub every: usize,
    /// Rows of each mixed set kept; 0 keeps everything.
    pub mixed_cap: usize,
    pub snapshots: Vec<Snapshot>,
    pub mixed: BTreeMap<usize, Tensor>,
}

impl SnapshotRecorder {
    pub fn new(every: usize, mixed_cap: usize) -> Self {
        Self {
            every: every.max(1),
            mixed_cap,
            ..Default::default()
        }
    }
}

impl GrObserver for SnapshotRecorder {
    fn on_mixture(&mut self, task_id: usize, mixed: &MixedDataset) -> Result<()> {
        let keep = if self.mixed_cap == 0 {
            mixed.len()
        } else {
            self.mixed_cap.min(mixed.len())
        };
        self.mixed.insert(task_id, mixed.samples.slice_rows(0, keep)?);
        Ok(())
    }

    fn on_epoch(&mut self, task_id: usize, model: &VaeModel, metrics: &EpochMetrics) -> Result<()> {
        if (metrics.epoch + 1).is_multiple_of(self.every) {
            self.snapshots.push(Snapshot {
                task: task_id,
                epoch: metrics.epoch,
                model: model.clone(),
            });
        }
        Ok(())
    }
}

/// Pool entry: the true encode/decode labelling or a snapshot.
pub enum PoolMember<'a> {
    Identity,
    Model(&'a VaeModel),
}

impl Hypothesis for PoolMember<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            PoolMember::Identity => Ok(x.clone()),
            PoolMember::Model(m) => m.reconstruct(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    /// Most recent snapshots in each hypothesis pool (the identity map is
    /// always added).
    pub pool_size: usize,
    /// Rows taken from each test set and mixed set.
    pub eval_size: usize,
    pub breakdown: BreakdownConfig,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            pool_size: 5,
            eval_size: 500,
            breakdown: BreakdownConfig::default(),
        }
    }
}

fn head(x: &Tensor, n: usize) -> Result<Tensor> {
    x.slice_rows(0, n.min(x.rows()))
}

/// Measures the bound terms on every snapshot in order.
pub fn diagnose_snapshots(
    snapshots: &[Snapshot],
    mixed: &BTreeMap<usize, Tensor>,
    stream: &TaskStream,
    cfg: &DiagnoseConfig,
) -> Result<DiagnosticsLedger> {
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument(
            "no snapshots recorded; enable diagnostics for the training run".into(),
        ));
    }
    if cfg.pool_size == 0 || cfg.eval_size == 0 {
        return Err(Error::InvalidArgument("pool_size and eval_size must be positive".into()));
    }
    let mut ledger = DiagnosticsLedger::new();
    for (time, snap) in snapshots.iter().enumerate() {
        let mix = mixed
            .get(&snap.task)
            .ok_or_else(|| Error::InvalidArgument(format!("no mixed set recorded for task {}", snap.task)))?;
        let mix = head(mix, cfg.eval_size)?;
        let targets = (1..=snap.task)
            .map(|t| {
                let task = stream
                    .task(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("stream has no task {t}")))?;
                head(task.test.images(), cfg.eval_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let target_refs: Vec<&Tensor> = targets.iter().collect();
        let lo = (time + 1).saturating_sub(cfg.pool_size);
        let mut pool = HypothesisPool::new();
        pool.push("identity", PoolMember::Identity);
        for s in &snapshots[lo..=time] {
            pool.push(format!("task{}/epoch{}", s.task, s.epoch), PoolMember::Model(&s.model));
        }
        let mut bcfg = cfg.breakdown;
        bcfg.seed = crate::rng::SeedStreams::new(cfg.breakdown.seed).child(&format!("diag/{time}")).seed();
        let b = lelbo_breakdown(&snap.model, &target_refs, &mix, &pool, &bcfg)?;
        ledger.append(LedgerRecord {
            time,
            task: snap.task,
            epoch: snap.epoch,
            source_risk: b.source_risk_elbo,
            target_risk: b.target_risk_elbo,
            discrepancy: b.empirical_discrepancy,
            slack: b.slack,
            kl_gap: b.kl_gap,
            residual: b.residual,
        })?;
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(time: usize) -> LedgerRecord {
        LedgerRecord {
            time,
            task: 1 + time / 2,
            epoch: time % 2,
            source_risk: 0.5,
            target_risk: 0.25 * time as f64,
            discrepancy: 1.0 / 3.0,
            slack: 0.0,
            kl_gap: 0.1,
            residual: -0.125,
        }
    }

    #[test]
    fn append_only_monotone() {
        let mut l = DiagnosticsLedger::new();
        l.append(rec(0)).unwrap();
        l.append(rec(2)).unwrap();
        assert!(l.append(rec(1)).is_err());
        l.append(rec(2)).unwrap();
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let mut l = DiagnosticsLedger::new();
        for t in 0..4 {
            l.append(rec(t)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        l.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), LEDGER_HEADER);
        assert_eq!(DiagnosticsLedger::read_csv(&path).unwrap(), l);
        assert_eq!(l.task_ends().len(), 2);
    }

    #[test]
    fn slope_of_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 - 1.0)).collect();
        assert!((slope(&pts) - 3.0).abs() < 1e-12);
        assert_eq!(slope(&pts[..1]), 0.0);
    }
}
