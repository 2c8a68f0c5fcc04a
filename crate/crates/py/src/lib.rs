//! Python bindings for the lifelong generative-learning core.
//!
//! Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use degm_core::bounds;
use degm_core::checkpoint::{self, Checkpoint};
use degm_core::data::{make_cross_domain_stream, synth_generate, DomainSpec, Family, StreamSettings};
use degm_core::degm::{self as graph, DegmConfig, ExpansionOverride, GraphState, NodeKind, Scoring};
use degm_core::rng::SeedStreams;
use degm_core::train::{train, Objective, TrainConfig};
use degm_core::vae::{self, Likelihood, VaeArch};
use degm_core::{Activation, Tensor};

create_exception!(degm, DegmError, PyException);

fn err(e: degm_core::Error) -> PyErr {
    DegmError::new_err(e.to_string())
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(DegmError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Tensor::matrix(n, cols, rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_likelihood(s: &str) -> PyResult<Likelihood> {
    match s {
        "bernoulli" => Ok(Likelihood::Bernoulli),
        "gaussian_half" => Ok(Likelihood::GaussianHalf),
        "gaussian_identity" => Ok(Likelihood::GaussianIdentity),
        _ => Err(DegmError::new_err(format!("unknown likelihood '{s}'"))),
    }
}

/// Bound estimate as `(total, recon_term, kl_term)`.
type Estimate = (f64, f64, f64);

fn bound(e: vae::ElboEstimate) -> Estimate {
    (e.total, e.recon_term, e.kl_term)
}

#[pyclass(name = "VaeModel", module = "degm", skip_from_py_object)]
#[derive(Clone)]
struct PyVae {
    inner: vae::VaeModel,
}

#[pymethods]
impl PyVae {
    #[new]
    #[pyo3(signature = (data_dim, encoder_hidden=128, latent_dim=16, decoder_hidden=128, likelihood="bernoulli", normalize_recon=false, seed=0))]
    fn new(
        data_dim: usize,
        encoder_hidden: usize,
        latent_dim: usize,
        decoder_hidden: usize,
        likelihood: &str,
        normalize_recon: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = VaeArch {
            data_dim,
            encoder_hidden,
            latent_dim,
            decoder_hidden,
            activation: Activation::Tanh,
            likelihood: parse_likelihood(likelihood)?,
            normalize_recon,
        };
        Ok(Self {
            inner: vae::VaeModel::new(arch, seed).map_err(err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_hash(&self) -> String {
        checkpoint::param_hash(self.inner.params())
    }

    #[pyo3(signature = (x, mc_samples=1, seed=0))]
    fn elbo(&self, x: Vec<Vec<f64>>, mc_samples: usize, seed: u64) -> PyResult<Estimate> {
        let x = to_tensor(x)?;
        vae::elbo(&self.inner, &x, mc_samples, &mut SeedStreams::new(seed).stream("elbo"))
            .map(bound)
            .map_err(err)
    }

    #[pyo3(signature = (x, k_prime, seed=0))]
    fn iwelbo(&self, x: Vec<Vec<f64>>, k_prime: usize, seed: u64) -> PyResult<Estimate> {
        let x = to_tensor(x)?;
        vae::iwelbo(&self.inner, &x, k_prime, &mut SeedStreams::new(seed).stream("elbo"))
            .map(bound)
            .map_err(err)
    }

    /// `(nll, std_err)` from an importance-weighted estimate.
    #[pyo3(signature = (x, k_prime=vae::DEFAULT_NLL_K_PRIME, seed=0))]
    fn nll(&self, x: Vec<Vec<f64>>, k_prime: usize, seed: u64) -> PyResult<(f64, f64)> {
        let x = to_tensor(x)?;
        let e = vae::nll_estimate(&self.inner, &x, k_prime, &mut SeedStreams::new(seed).stream("nll")).map_err(err)?;
        Ok((e.nll, e.std_err))
    }

    fn reconstruct(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.reconstruct(&to_tensor(x)?).map_err(err)?))
    }

    /// Trains in place and returns the per-epoch mean objective.
    #[pyo3(signature = (x, epochs=10, batch_size=64, learning_rate=1e-3, k_prime=1, seed=0))]
    fn fit(&mut self, x: Vec<Vec<f64>>, epochs: usize, batch_size: usize, learning_rate: f64, k_prime: usize, seed: u64) -> PyResult<Vec<f64>> {
        let x = to_tensor(x)?;
        let mut cfg = TrainConfig {
            epochs,
            batch_size,
            objective: if k_prime == 1 {
                Objective::Elbo { mc_samples: 1 }
            } else {
                Objective::Iwelbo { k_prime }
            },
            ..Default::default()
        };
        cfg.adam.learning_rate = learning_rate;
        let hist = train(&mut self.inner, &x, &cfg, &SeedStreams::new(seed), |_, _| Ok(())).map_err(err)?;
        Ok(hist.iter().map(|e| e.objective).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint::Single {
            model: self.inner.clone(),
            task_id: 1,
        };
        checkpoint::save(&path, &ck).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match checkpoint::load(&path).map_err(err)? {
            Checkpoint::Single { model, .. } => Ok(Self { inner: model }),
            Checkpoint::Graph(_) => Err(DegmError::new_err("checkpoint holds a graph; use Graph.load")),
        }
    }
}

#[pyclass(name = "Graph", module = "degm")]
struct PyGraph {
    inner: GraphState,
}

#[pymethods]
impl PyGraph {
    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn kinds(&self) -> Vec<&'static str> {
        self.inner
            .nodes()
            .iter()
            .map(|n| match n.kind() {
                NodeKind::Basic => "basic",
                NodeKind::Specific => "specific",
            })
            .collect()
    }

    #[getter]
    fn adjacency(&self) -> Vec<Vec<f64>> {
        self.inner.adjacency.clone()
    }

    /// `(task_id, decision, ks, pi)` per learned task.
    #[getter]
    fn expansion_log(&self) -> Vec<(usize, String, Vec<f64>, Vec<f64>)> {
        self.inner
            .expansion_log
            .iter()
            .map(|r| {
                let d = match r.decision {
                    NodeKind::Basic => "basic",
                    NodeKind::Specific => "specific",
                };
                (r.task_id, d.to_string(), r.ks.clone(), r.pi.clone())
            })
            .collect()
    }

    /// Best node for `x` and every node's mean bound.
    #[pyo3(signature = (x, seed=0))]
    fn select(&self, x: Vec<Vec<f64>>, seed: u64) -> PyResult<(usize, Vec<(usize, f64)>)> {
        graph::select_node(&self.inner, &to_tensor(x)?, Scoring::Elbo, seed).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &Checkpoint::Graph(self.inner.clone())).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match checkpoint::load(&path).map_err(err)? {
            Checkpoint::Graph(g) => Ok(Self { inner: g }),
            Checkpoint::Single { .. } => Err(DegmError::new_err("checkpoint holds a single model; use VaeModel.load")),
        }
    }
}

/// Images of a synthetic family as `(rows, labels)`.
#[pyfunction]
#[pyo3(signature = (family, n, width=12, height=12, seed=0))]
fn synth_images(family: &str, n: usize, width: usize, height: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let fam: Family = family.parse().map_err(err)?;
    let ds = synth_generate(fam, n, width, height, seed).map_err(err)?;
    Ok((to_rows(ds.images()), ds.labels().map(<[u32]>::to_vec).unwrap_or_default()))
}

/// Learns a cross-domain stream with the expansion graph; returns the graph
/// and the final-row NLL per task.
#[pyfunction]
#[pyo3(signature = (stream, tau=None, epochs=10, n_train=2000, n_test=500, eval_k_prime=200, force_basic=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_degm(
    stream: Vec<String>,
    tau: Option<f64>,
    epochs: usize,
    n_train: usize,
    n_test: usize,
    eval_k_prime: usize,
    force_basic: bool,
    seed: u64,
) -> PyResult<(PyGraph, Vec<f64>)> {
    let specs = stream
        .iter()
        .map(|s| s.parse::<DomainSpec>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let settings = StreamSettings {
        n_train,
        n_test,
        ..Default::default()
    };
    let st = make_cross_domain_stream(&specs, &settings, seed).map_err(err)?;
    let cfg = DegmConfig {
        train: TrainConfig {
            epochs,
            ..Default::default()
        },
        tau: tau.unwrap_or(f64::INFINITY),
        overrides: if force_basic {
            ExpansionOverride::ForceBasic
        } else {
            ExpansionOverride::None
        },
        eval_k_prime,
        ..Default::default()
    };
    let run = graph::train_degm_sequence(&st, &cfg, seed, &mut ()).map_err(err)?;
    let t = st.len();
    let nll = run.evals.iter().filter(|e| e.after_task == t).map(|e| e.nll).collect();
    Ok((PyGraph { inner: run.graph }, nll))
}

#[pyfunction]
fn importance_weights(ks: Vec<f64>) -> PyResult<Vec<f64>> {
    graph::importance_weights(&ks).map_err(err)
}

/// `"basic"` or `"specific"`; `override` is `"force_basic"` or `"force_specific"`.
#[pyfunction]
#[pyo3(signature = (ks, tau, r#override=None))]
fn expansion_decision(ks: Vec<f64>, tau: f64, r#override: Option<&str>) -> PyResult<&'static str> {
    let o = match r#override {
        None => ExpansionOverride::None,
        Some("force_basic") => ExpansionOverride::ForceBasic,
        Some("force_specific") => ExpansionOverride::ForceSpecific,
        Some(s) => return Err(DegmError::new_err(format!("unknown override '{s}'"))),
    };
    Ok(match graph::expansion_decision(&ks, tau, o) {
        NodeKind::Basic => "basic",
        NodeKind::Specific => "specific",
    })
}

#[pyfunction]
fn gaussian_kl(mu: Vec<Vec<f64>>, logvar: Vec<Vec<f64>>) -> PyResult<f64> {
    vae::gaussian_kl(&to_tensor(mu)?, &to_tensor(logvar)?).map_err(err)
}

#[pyfunction]
fn squared_loss(x: Vec<f64>, x_prime: Vec<f64>) -> PyResult<f64> {
    bounds::squared_loss(&x, &x_prime).map_err(err)
}

#[pyfunction]
fn discrepancy_slack(m_p: usize, m_q: usize, m_bound: f64, delta: f64, rad_p: f64, rad_q: f64) -> PyResult<f64> {
    bounds::discrepancy_slack(m_p, m_q, m_bound, delta, rad_p, rad_q).map_err(err)
}

/// Task → number of accumulated transfer terms, from `owners[a-1]` =
/// component of task `a`.
#[pyfunction]
fn accumulated_term_counts(owners: Vec<usize>) -> PyResult<BTreeMap<usize, usize>> {
    let log = bounds::AssignmentLog::from_owners(&owners).map_err(err)?;
    Ok(bounds::assignment_summary(&log).accumulated_term_counts)
}

#[pymodule]
fn degm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DegmError", m.py().get_type::<DegmError>())?;
    m.add_class::<PyVae>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(synth_images, m)?)?;
    m.add_function(wrap_pyfunction!(train_degm, m)?)?;
    m.add_function(wrap_pyfunction!(importance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(expansion_decision, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(squared_loss, m)?)?;
    m.add_function(wrap_pyfunction!(discrepancy_slack, m)?)?;
    m.add_function(wrap_pyfunction!(accumulated_term_counts, m)?)?;
    Ok(())
}
