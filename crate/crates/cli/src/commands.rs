//! The four experiment commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use degm_core::bounds::{assignment_summary, AssignmentLog, BreakdownConfig};
use degm_core::checkpoint::{self, Checkpoint};
use degm_core::data::{make_cross_domain_stream, TaskStream};
use degm_core::degm::{select_node, train_degm_sequence, DegmConfig, ExpansionOverride, GraphState, NodeRef, Scoring};
use degm_core::ledger::{diagnose_snapshots, DiagnoseConfig, DiagnosticsLedger, Snapshot, SnapshotRecorder};
use degm_core::optim::AdamConfig;
use degm_core::replay::{run_gr_sequence, GrConfig};
use degm_core::rng::SeedStreams;
use degm_core::tensor::Tensor;
use degm_core::train::{Objective, TrainConfig};
use degm_core::vae::{nll_estimate, LatentModel, Likelihood};

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::*;

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn build_stream(cfg: &RunConfig) -> CliResult<TaskStream> {
    let specs = cfg.domain_specs()?;
    let seed = SeedStreams::new(cfg.seed).child("data").seed();
    make_cross_domain_stream(&specs, &cfg.stream_settings(), seed).map_err(CliError::classify("building the task stream"))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    let objective = match cfg.method {
        Method::IwelboGr | Method::DegmIwelbo => Objective::Iwelbo { k_prime: cfg.k_prime },
        _ => Objective::Elbo { mc_samples: 1 },
    };
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
        objective,
    }
}

fn degm_config(cfg: &RunConfig) -> DegmConfig {
    let (overrides, tau) = match cfg.method {
        Method::Degm2 => (ExpansionOverride::ForceBasic, cfg.tau.unwrap_or(f64::INFINITY)),
        _ => (ExpansionOverride::None, cfg.tau.unwrap_or(f64::INFINITY)),
    };
    let scoring = match cfg.method {
        Method::DegmIwelbo => Scoring::Iwelbo { k_prime: cfg.k_prime },
        _ => Scoring::Elbo,
    };
    DegmConfig {
        arch: cfg.arch(),
        train: train_config(cfg),
        tau,
        overrides,
        probe_size: cfg.probe_size,
        eval_k_prime: cfg.diagnostics.eval_k_prime,
        scoring,
    }
}

/// Trains one seed into `dir` and returns its report.
pub fn train_one(cfg: &RunConfig, dir: &Path) -> CliResult<RunReport> {
    let started = Instant::now();
    create_dir(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let stream = build_stream(cfg)?;
    let wall = |t: &Instant| if cfg.record_wall_clock { t.elapsed().as_millis() as u64 } else { 0 };
    let tc = train_config(cfg);
    let ctx = format!("training run {}", cfg.run_id());
    let (evals, epochs, ckpt, expansion_log, node_kinds, parameter_count, snapshots) = if cfg.method.is_graph() {
        let run = train_degm_sequence(&stream, &degm_config(cfg), cfg.seed, &mut ()).map_err(CliError::runtime(&ctx))?;
        let kinds = run.graph.nodes().iter().map(NodeRef::kind).collect();
        let count = run.graph.basic.iter().map(|b| b.model.param_count()).sum::<usize>()
            + run.graph.specific.iter().map(|s| s.param_count()).sum::<usize>();
        let log = run.graph.expansion_log.clone();
        (run.evals, run.epochs, Checkpoint::Graph(run.graph), log, Some(kinds), count, None)
    } else {
        let gr = GrConfig {
            train: tc,
            replay_ratio: cfg.replay_ratio,
            binarize_replay: cfg.model.likelihood == Likelihood::Bernoulli && cfg.data.binarize.is_some(),
            warm_start: true,
        };
        let mut recorder = SnapshotRecorder::new(cfg.diagnostics.snapshot_every, cfg.diagnostics.eval_size);
        let run = if cfg.diagnostics.enabled {
            run_gr_sequence(&stream, cfg.arch(), &gr, cfg.diagnostics.eval_k_prime, cfg.seed, &mut recorder)
        } else {
            run_gr_sequence(&stream, cfg.arch(), &gr, cfg.diagnostics.eval_k_prime, cfg.seed, &mut ())
        }
        .map_err(CliError::runtime(&ctx))?;
        let count = run.model.param_count();
        let ck = Checkpoint::Single {
            model: run.model,
            task_id: stream.len(),
        };
        let snaps = cfg.diagnostics.enabled.then_some(recorder);
        (run.evals, run.epochs, ck, Vec::new(), None, count, snaps)
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ckpt).map_err(CliError::classify("writing the checkpoint"))?;
    let snapshot_dir = match snapshots {
        Some(rec) => {
            save_snapshots(&dir.join(SNAPSHOT_DIR), &rec)?;
            Some(SNAPSHOT_DIR.to_string())
        }
        None => None,
    };

    let mut rows = Vec::new();
    for task in 1..=stream.len() {
        for (_, e) in epochs.iter().filter(|(t, _)| *t == task) {
            rows.push(MetricsRow::epoch(cfg, task, e, tc.objective.samples(), wall(&started)));
        }
        for r in evals.iter().filter(|r| r.after_task == task) {
            rows.push(MetricsRow::eval(cfg, r, wall(&started)));
        }
    }
    write_metrics(&dir.join(METRICS_FILE), &rows)?;

    let (nll_matrix, nll_se_matrix, elbo_matrix, selected_nodes) = RunReport::matrices(&evals, stream.len());
    let average_nll: Vec<f64> = nll_matrix.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        run_id: cfg.run_id(),
        seed: cfg.seed,
        method: cfg.method,
        tasks: stream.len(),
        final_average_nll: *average_nll.last().expect("non-empty stream"),
        nll_matrix,
        nll_se_matrix,
        elbo_matrix,
        average_nll,
        eval_k_prime: cfg.diagnostics.eval_k_prime,
        selected_nodes,
        node_kinds,
        expansion_log,
        parameter_count,
        wall_clock_ms: wall(&started),
        config: cfg.clone(),
        artifacts: Artifacts {
            config: CONFIG_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
            metrics: METRICS_FILE.into(),
            snapshots: snapshot_dir,
        },
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn save_snapshots(dir: &Path, rec: &SnapshotRecorder) -> CliResult<()> {
    create_dir(dir)?;
    let ctx = || CliError::classify("writing snapshots");
    let mut index = SnapshotIndex {
        snapshots: Vec::new(),
        mixed: BTreeMap::new(),
    };
    for (time, s) in rec.snapshots.iter().enumerate() {
        let file = format!("snap-{time:04}.degm");
        let ck = Checkpoint::Single {
            model: s.model.clone(),
            task_id: s.task,
        };
        checkpoint::save(&dir.join(&file), &ck).map_err(ctx())?;
        index.snapshots.push(SnapshotEntry {
            time,
            task: s.task,
            epoch: s.epoch,
            file,
        });
    }
    for (task, t) in &rec.mixed {
        let file = format!("mixed-{task}.dten");
        checkpoint::save_tensor(&dir.join(&file), t).map_err(ctx())?;
        index.mixed.insert(*task, file);
    }
    write_json(&dir.join(SNAPSHOT_INDEX), &index)
}

/// Trains every seed; with more than one seed each run gets a `seed-<n>`
/// subdirectory and `aggregate.json` summarises them.
pub fn cmd_train(cfg: &RunConfig, seeds: &[u64]) -> CliResult<Vec<RunReport>> {
    if seeds.len() <= 1 {
        let mut c = cfg.clone();
        if let Some(&s) = seeds.first() {
            c.seed = s;
        }
        return Ok(vec![train_one(&c, &c.output_dir.clone())?]);
    }
    let mut reports = Vec::new();
    for &s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        if let Some(id) = &cfg.run_id {
            c.run_id = Some(format!("{id}-s{s}"));
        }
        let dir = cfg.output_dir.join(format!("seed-{s}"));
        reports.push(train_one(&c, &dir)?);
    }
    let tasks = reports[0].tasks;
    let agg = Aggregate {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        seeds: seeds.to_vec(),
        final_average_nll: MeanSe::of(reports.iter().map(|r| r.final_average_nll)),
        final_nll_per_task: (1..=tasks)
            .map(|t| (t, MeanSe::of(reports.iter().map(|r| r.nll_matrix[tasks - 1][t - 1]))))
            .collect(),
    };
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
    Ok(reports)
}

fn load_run_config(run: &Path) -> CliResult<RunConfig> {
    let path = run.join(CONFIG_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("{}: not a run directory (no {CONFIG_FILE})", run.display())));
    }
    let cfg: RunConfig = read_json(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn batch_nll<M: LatentModel + ?Sized>(model: &M, x: &Tensor, k: usize, seed: u64) -> CliResult<(f64, f64)> {
    let est = nll_estimate(model, x, k, &mut SeedStreams::new(seed).stream("nll")).map_err(CliError::runtime("NLL estimate"))?;
    Ok((est.nll, est.std_err))
}

/// Per-task NLL of a saved model on its run's test sets; graph checkpoints
/// route each batch through node selection first.
pub fn cmd_eval(run: &Path, checkpoint_path: Option<&Path>, k_prime: Option<usize>, batch_size: usize) -> CliResult<EvalReport> {
    if batch_size == 0 {
        return Err(CliError::Config("field `batch_size`: must be positive".into()));
    }
    let cfg = load_run_config(run)?;
    let k = k_prime.unwrap_or(cfg.diagnostics.eval_k_prime);
    if k == 0 {
        return Err(CliError::Config("field `k_prime`: must be positive".into()));
    }
    let ck_path = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINT_FILE));
    let ck = checkpoint::load(&ck_path).map_err(CliError::classify("loading checkpoint"))?;
    let stream = build_stream(&cfg)?;
    if ck.arch().data_dim != stream.dim() {
        return Err(CliError::Data(format!(
            "{}: model dimension {} does not match stream dimension {}",
            ck_path.display(),
            ck.arch().data_dim,
            stream.dim()
        )));
    }
    let root = SeedStreams::new(cfg.seed).child("cli-eval");
    let mut per_task = Vec::new();
    let (mut hits, mut total_batches) = (0usize, 0usize);
    for task in stream.tasks() {
        let x = task.test.images();
        let (mut sum, mut var, mut batches, mut task_hits) = (0.0, 0.0, 0, 0);
        for (b, start) in (0..x.rows()).step_by(batch_size).enumerate() {
            let batch = x.slice_rows(start, (start + batch_size).min(x.rows())).map_err(CliError::runtime("batching"))?;
            let n = batch.rows() as f64;
            let seed = root.child(&format!("{}/{b}", task.task_id)).seed();
            let (nll, se) = match &ck {
                Checkpoint::Single { model, .. } => batch_nll(model, &batch, k, seed)?,
                Checkpoint::Graph(g) => {
                    let (id, _) = select_node(g, &batch, Scoring::Elbo, seed).map_err(CliError::runtime("node selection"))?;
                    if node_task(g, id) == Some(task.task_id) {
                        task_hits += 1;
                    }
                    match g.node(id) {
                        Some(NodeRef::Basic(bn)) => batch_nll(&bn.model, &batch, k, seed)?,
                        Some(NodeRef::Specific(s)) => batch_nll(&g.specific_view(s), &batch, k, seed)?,
                        None => unreachable!("selected node exists"),
                    }
                }
            };
            sum += nll * n;
            var += (se * n).powi(2);
            batches += 1;
        }
        let n = x.rows() as f64;
        let graph = matches!(ck, Checkpoint::Graph(_));
        hits += task_hits;
        total_batches += batches;
        per_task.push(TaskEval {
            task: task.task_id,
            nll: sum / n,
            nll_se: var.sqrt() / n,
            batches,
            selection_accuracy: graph.then(|| task_hits as f64 / batches as f64),
        });
    }
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        run_id: cfg.run_id(),
        k_prime: k,
        batch_size,
        average_nll: per_task.iter().map(|t| t.nll).sum::<f64>() / per_task.len() as f64,
        per_task,
        selection_accuracy: matches!(ck, Checkpoint::Graph(_)).then(|| hits as f64 / total_batches as f64),
    };
    write_json(&run.join(EVAL_FILE), &report)?;
    Ok(report)
}

fn node_task(g: &GraphState, id: usize) -> Option<usize> {
    g.node(id).map(|n| match n {
        NodeRef::Basic(b) => b.task_id,
        NodeRef::Specific(s) => s.task_id,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub run_id: String,
    pub pool_size: usize,
    pub eval_size: usize,
    pub summary: degm_core::ledger::LedgerSummary,
    pub accounting: degm_core::bounds::AssignmentSummary,
}

/// Measures the bound terms on every saved snapshot of a replay run.
pub fn cmd_diagnose(run: &Path, pool_size: Option<usize>, eval_size: Option<usize>) -> CliResult<(DiagnosticsLedger, DiagnosticsReport)> {
    let cfg = load_run_config(run)?;
    let dir = run.join(SNAPSHOT_DIR);
    let index_path = dir.join(SNAPSHOT_INDEX);
    if !index_path.exists() {
        return Err(CliError::Data(format!(
            "{}: no snapshots; rerun `train` with diagnostics.enabled = true",
            run.display()
        )));
    }
    let index: SnapshotIndex = read_json(&index_path)?;
    let mut snapshots = Vec::new();
    for e in &index.snapshots {
        match checkpoint::load(&dir.join(&e.file)) {
            Ok(Checkpoint::Single { model, .. }) => snapshots.push(Snapshot {
                task: e.task,
                epoch: e.epoch,
                model,
            }),
            Ok(Checkpoint::Graph(_)) => {
                return Err(CliError::Data(format!("{}: expected a single-model snapshot", e.file)));
            }
            Err(err) => return Err(CliError::classify("loading snapshots")(err)),
        }
    }
    let mut mixed = BTreeMap::new();
    for (task, file) in &index.mixed {
        mixed.insert(*task, checkpoint::load_tensor(&dir.join(file)).map_err(CliError::classify("loading mixed sets"))?);
    }
    let stream = build_stream(&cfg)?;
    let dcfg = DiagnoseConfig {
        pool_size: pool_size.unwrap_or(cfg.diagnostics.pool_size),
        eval_size: eval_size.unwrap_or(cfg.diagnostics.eval_size),
        breakdown: BreakdownConfig {
            normalize: true,
            seed: SeedStreams::new(cfg.seed).child("diagnose").seed(),
            ..Default::default()
        },
    };
    let ledger = diagnose_snapshots(&snapshots, &mixed, &stream, &dcfg).map_err(CliError::runtime("diagnostics"))?;
    let csv_path = run.join(DIAGNOSTICS_CSV);
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    ledger.write_csv(file).map_err(CliError::classify("writing diagnostics"))?;
    let owners = vec![0; stream.len()];
    let log = AssignmentLog::from_owners(&owners).map_err(CliError::runtime("assignment log"))?;
    let report = DiagnosticsReport {
        schema_version: SCHEMA_VERSION,
        run_id: cfg.run_id(),
        pool_size: dcfg.pool_size,
        eval_size: dcfg.eval_size,
        summary: ledger.summary(),
        accounting: assignment_summary(&log),
    };
    write_json(&run.join(DIAGNOSTICS_JSON), &report)?;
    Ok((ledger, report))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes whitespace-separated plot tables into `out` and returns their paths.
pub fn cmd_export_plots(runs: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(CliError::Config("at least one --run directory is required".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    let mut reports = Vec::new();
    let mut ledgers = Vec::new();
    for run in runs {
        let rp = run.join(REPORT_FILE);
        if !rp.exists() {
            return Err(CliError::Data(format!("{}: missing {REPORT_FILE}", run.display())));
        }
        let report: RunReport = read_json(&rp)?;
        let lp = run.join(DIAGNOSTICS_CSV);
        let ledger = if lp.exists() {
            Some(DiagnosticsLedger::read_csv(&lp).map_err(CliError::classify("reading diagnostics"))?)
        } else {
            None
        };
        reports.push(report);
        ledgers.push(ledger);
    }

    for (report, ledger) in reports.iter().zip(&ledgers) {
        if let Some(l) = ledger {
            let mut s = String::from("# epoch source_risk discrepancy kl_gap target_risk\n");
            for r in l.records() {
                writeln!(s, "{} {} {} {} {}", r.time, r.source_risk, r.discrepancy, r.kl_gap, r.target_risk).unwrap();
            }
            let p = out.join(format!("fig3b_{}.dat", report.run_id));
            write_text(&p, &s)?;
            written.push(p);
        }
    }

    let with_ledger: Vec<(&RunReport, &DiagnosticsLedger)> = reports
        .iter()
        .zip(&ledgers)
        .filter_map(|(r, l)| l.as_ref().map(|l| (r, l)))
        .collect();
    if !with_ledger.is_empty() {
        let mut s = String::from("# epoch");
        for (r, _) in &with_ledger {
            write!(s, " {}", r.run_id).unwrap();
        }
        s.push('\n');
        let rows = with_ledger.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
        for i in 0..rows {
            write!(s, "{i}").unwrap();
            for (_, l) in &with_ledger {
                match l.records().get(i) {
                    Some(r) => write!(s, " {}", r.target_risk).unwrap(),
                    None => s.push_str(" nan"),
                }
            }
            s.push('\n');
        }
        let p = out.join("fig3a.dat");
        write_text(&p, &s)?;
        written.push(p);
    }

    let tasks = reports.iter().map(|r| r.tasks).max().unwrap_or(0);
    let mut s = String::from("# task");
    for r in &reports {
        write!(s, " {}", r.run_id).unwrap();
    }
    s.push('\n');
    for t in 0..tasks {
        write!(s, "{}", t + 1).unwrap();
        for r in &reports {
            match r.nll_matrix.last().and_then(|row| row.get(t)) {
                Some(v) => write!(s, " {v}").unwrap(),
                None => s.push_str(" nan"),
            }
        }
        s.push('\n');
    }
    let p = out.join("nll_bars.dat");
    write_text(&p, &s)?;
    written.push(p);
    Ok(written)
}
