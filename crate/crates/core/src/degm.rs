//! Dynamic expansion graph model.
//!
//! Every task adds one node. A Basic node is a full VAE whose encoder trunk
//! (X → Z̃) and decoder trunk (Z → X̃) become reusable knowledge once frozen.
//! A Specific node owns only a pair of posterior heads (Z̃ → Z) and an output
//! layer (X̃ → X) and reaches the data through every Basic node that existed
//! when it was created, weighted by importance weights π:
//!
//! ```text
//! z = Σ_i π_i (μ_i + σ_i ⊙ γ)        μ_i, log σ_i² = heads(trunk_i(x))
//! x̂ = out(Σ_i π_i dec_trunk_i(z))
//! ```
//!
//! All branches share one noise draw γ, so the composed posterior is
//! `N(Σ π_i μ_i, (Σ π_i σ_i)²)`; its KL to the prior never exceeds
//! `Σ π_i KL(q_i ‖ p)`, which keeps the mixture ELBO a lower bound on the
//! composed model's log-likelihood.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::nn::{build_mlp, Mlp, MlpSpec};
use crate::replay::{evaluate_model, EvalRecord};
use crate::rng::{SeedStreams, StreamRng};
use crate::tensor::Tensor;
use crate::train::{train, EpochMetrics, TrainConfig, Trainable};
use crate::vae::{elbo, iwelbo, kl_rows, ElboEstimate, LatentModel, Likelihood, Posterior, VaeArch, VaeModel};

/// Default probe size for novelty scoring.
pub const DEFAULT_PROBE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct BasicNode {
    pub id: usize,
    pub task_id: usize,
    pub model: VaeModel,
    /// Best per-epoch mean training ELBO on the node's own task.
    pub best_elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecificNode {
    pub id: usize,
    pub task_id: usize,
    pub mean_head: Mlp,
    pub logvar_head: Mlp,
    pub decoder_out: Mlp,
    /// Edge weights over the Basic nodes present at creation, in Basic order.
    pub pi: Vec<f64>,
}

impl SpecificNode {
    pub fn new(id: usize, task_id: usize, arch: &VaeArch, pi: Vec<f64>, seed: u64) -> Result<Self> {
        let seeds = SeedStreams::new(seed);
        let id_act = Activation::Identity;
        let out_act = match arch.likelihood {
            Likelihood::Bernoulli => Activation::Sigmoid,
            _ => Activation::Identity,
        };
        Ok(Self {
            id,
            task_id,
            mean_head: build_mlp(&MlpSpec::uniform(
                &[arch.encoder_hidden, arch.latent_dim],
                id_act,
                id_act,
                seeds.child("mean_head").seed(),
            ))?,
            logvar_head: build_mlp(&MlpSpec::uniform(
                &[arch.encoder_hidden, arch.latent_dim],
                id_act,
                id_act,
                seeds.child("logvar_head").seed(),
            ))?,
            decoder_out: build_mlp(&MlpSpec::uniform(
                &[arch.decoder_hidden, arch.data_dim],
                arch.activation,
                out_act,
                seeds.child("decoder_out").seed(),
            ))?,
            pi,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [&self.mean_head, &self.logvar_head, &self.decoder_out]
            .into_iter()
            .flat_map(Mlp::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.mean_head, &mut self.logvar_head, &mut self.decoder_out]
            .into_iter()
            .flat_map(Mlp::params_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Basic,
    Specific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub task_id: usize,
    pub decision: NodeKind,
    pub ks: Vec<f64>,
    /// Threshold in effect; `None` when it was infinite.
    pub tau: Option<f64>,
    pub pi: Vec<f64>,
}

/// Nodes, adjacency and expansion history.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub arch: VaeArch,
    pub basic: Vec<BasicNode>,
    pub specific: Vec<SpecificNode>,
    /// Row `r` describes the node of task `r + 1`; column `c` is node id `c`.
    pub adjacency: Vec<Vec<f64>>,
    pub expansion_log: Vec<ExpansionRecord>,
}

/// Borrowed reference to any node.
#[derive(Debug, Clone, Copy)]
pub enum NodeRef<'a> {
    Basic(&'a BasicNode),
    Specific(&'a SpecificNode),
}

impl NodeRef<'_> {
    pub fn id(&self) -> usize {
        match self {
            NodeRef::Basic(b) => b.id,
            NodeRef::Specific(s) => s.id,
        }
    }

    pub fn task_id(&self) -> usize {
        match self {
            NodeRef::Basic(b) => b.task_id,
            NodeRef::Specific(s) => s.task_id,
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            NodeRef::Basic(_) => NodeKind::Basic,
            NodeRef::Specific(_) => NodeKind::Specific,
        }
    }
}

impl GraphState {
    pub fn new(arch: VaeArch) -> Result<Self> {
        if arch.encoder_hidden <= arch.latent_dim || arch.decoder_hidden >= arch.data_dim {
            return Err(Error::InvalidSpec(format!(
                "graph nodes need dim(Z̃) > dim(Z) and dim(X̃) < dim(X), got {} / {} and {} / {}",
                arch.encoder_hidden, arch.latent_dim, arch.decoder_hidden, arch.data_dim
            )));
        }
        Ok(Self {
            arch,
            basic: Vec::new(),
            specific: Vec::new(),
            adjacency: Vec::new(),
            expansion_log: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.basic.len() + self.specific.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_count() == 0
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> Vec<NodeRef<'_>> {
        let mut all: Vec<NodeRef<'_>> = self
            .basic
            .iter()
            .map(NodeRef::Basic)
            .chain(self.specific.iter().map(NodeRef::Specific))
            .collect();
        all.sort_by_key(NodeRef::id);
        all
    }

    pub fn node(&self, id: usize) -> Option<NodeRef<'_>> {
        self.nodes().into_iter().find(|n| n.id() == id)
    }

    pub fn specific_view<'a>(&'a self, node: &'a SpecificNode) -> SpecificView<'a> {
        SpecificView {
            node,
            basics: &self.basic[..node.pi.len()],
        }
    }

    fn grow_adjacency(&mut self) {
        let t = self.node_count();
        for row in &mut self.adjacency {
            row.resize(t, 0.0);
        }
        self.adjacency.push(vec![0.0; t]);
    }

    /// Appends an untrained Basic node for `task_id`; its adjacency row is zero.
    pub fn build_basic_node(&mut self, task_id: usize, seed: u64) -> Result<usize> {
        let id = self.node_count();
        let model = VaeModel::new(self.arch, seed)?;
        self.basic.push(BasicNode {
            id,
            task_id,
            model,
            best_elbo: f64::NEG_INFINITY,
        });
        self.grow_adjacency();
        Ok(id)
    }

    /// Appends an untrained Specific node wired to every current Basic node
    /// with weights `pi`; its adjacency row holds `pi` over the Basic columns.
    pub fn build_specific_node(&mut self, task_id: usize, pi: Vec<f64>, seed: u64) -> Result<usize> {
        if pi.len() != self.basic.len() || pi.is_empty() {
            return Err(Error::Contract(format!(
                "{} importance weights for {} Basic nodes",
                pi.len(),
                self.basic.len()
            )));
        }
        let sum: f64 = pi.iter().sum();
        if pi.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("importance weights {pi:?} are not on the simplex")));
        }
        let id = self.node_count();
        let node = SpecificNode::new(id, task_id, &self.arch, pi.clone(), seed)?;
        self.specific.push(node);
        self.grow_adjacency();
        let basic_ids: Vec<usize> = self.basic.iter().map(|b| b.id).collect();
        for (col, w) in basic_ids.into_iter().zip(&pi) {
            self.adjacency[id][col] = *w;
        }
        Ok(id)
    }
}

/// A Specific node composed with the Basic nodes it is wired to.
#[derive(Debug, Clone, Copy)]
pub struct SpecificView<'a> {
    pub node: &'a SpecificNode,
    pub basics: &'a [BasicNode],
}

fn specific_encode(node: &SpecificNode, basics: &[BasicNode], tape: &mut Tape, x: Var) -> Result<Posterior> {
    let mut means = Vec::with_capacity(basics.len());
    let mut scales = Vec::with_capacity(basics.len());
    let mut kls = Vec::with_capacity(basics.len());
    for (b, &w) in basics.iter().zip(&node.pi) {
        let h = b.model.encoder_trunk.forward(tape, x)?;
        let mu = node.mean_head.forward(tape, h)?;
        let lv = node.logvar_head.forward(tape, h)?;
        let half = tape.scale(lv, 0.5);
        let sigma = tape.exp(half);
        kls.push((kl_rows(tape, mu, lv)?, w));
        means.push((mu, w));
        scales.push((sigma, w));
    }
    let mean = tape.combine(&means)?;
    let scale = tape.combine(&scales)?;
    let log_scale = tape.log(scale);
    let kl = tape.combine(&kls)?;
    Ok(Posterior { mean, log_scale, kl })
}

fn specific_decode(node: &SpecificNode, basics: &[BasicNode], tape: &mut Tape, z: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(basics.len());
    for (b, &w) in basics.iter().zip(&node.pi) {
        parts.push((b.model.decoder_trunk.forward(tape, z)?, w));
    }
    let mixed = tape.combine(&parts)?;
    node.decoder_out.forward(tape, mixed)
}

macro_rules! specific_latent_model {
    ($t:ty) => {
        impl LatentModel for $t {
            fn data_dim(&self) -> usize {
                self.node.decoder_out.output_width()
            }

            fn latent_dim(&self) -> usize {
                self.node.mean_head.output_width()
            }

            fn likelihood(&self) -> Likelihood {
                self.basics[0].model.arch.likelihood
            }

            fn normalize_recon(&self) -> bool {
                self.basics[0].model.arch.normalize_recon
            }

            fn encode(&self, tape: &mut Tape, x: Var) -> Result<Posterior> {
                specific_encode(&self.node, self.basics, tape, x)
            }

            fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
                specific_decode(&self.node, self.basics, tape, z)
            }
        }
    };
}

specific_latent_model!(SpecificView<'_>);

/// Mutable pairing used while training a Specific node; only the node's own
/// tensors are exposed for optimisation.
pub struct SpecificTrainer<'a> {
    pub node: &'a mut SpecificNode,
    pub basics: &'a [BasicNode],
}

specific_latent_model!(SpecificTrainer<'_>);

impl Trainable for SpecificTrainer<'_> {
    fn trainable_params(&mut self) -> Vec<&mut Tensor> {
        self.node.params_mut()
    }
}

/// Untaped pass through a Specific node with explicit noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecificForward {
    pub z: Tensor,
    /// Per Basic branch: (μ_i, log σ_i²).
    pub branches: Vec<(Tensor, Tensor)>,
    pub reconstruction: Tensor,
}

pub fn specific_forward(node: &SpecificNode, graph: &GraphState, x: &Tensor, noise: &Tensor) -> Result<SpecificForward> {
    let basics = &graph.basic[..node.pi.len()];
    let mut branches = Vec::with_capacity(basics.len());
    let mut z = vec![0.0; noise.len()];
    for (b, &w) in basics.iter().zip(&node.pi) {
        let h = b.model.encoder_trunk.predict(x)?;
        let mu = node.mean_head.predict(&h)?;
        let lv = node.logvar_head.predict(&h)?;
        let zi = crate::vae::reparameterize(&mu, &lv, noise)?;
        for (acc, v) in z.iter_mut().zip(zi.data()) {
            *acc += w * v;
        }
        branches.push((mu, lv));
    }
    let z = Tensor::new(noise.shape().to_vec(), z)?;
    let mut mixed: Option<Vec<f64>> = None;
    for (b, &w) in basics.iter().zip(&node.pi) {
        let h = b.model.decoder_trunk.predict(&z)?;
        let acc = mixed.get_or_insert_with(|| vec![0.0; h.len()]);
        for (a, v) in acc.iter_mut().zip(h.data()) {
            *a += w * v;
        }
    }
    let mixed = Tensor::matrix(z.rows(), graph.arch.decoder_hidden, mixed.expect("at least one branch"))?;
    let reconstruction = node.decoder_out.predict(&mixed)?;
    Ok(SpecificForward {
        z,
        branches,
        reconstruction,
    })
}

/// Mixture ELBO: reconstruction under the node's decoder minus the
/// π-weighted sum of per-branch KL terms.
pub fn melbo(node: &SpecificNode, graph: &GraphState, x: &Tensor, mc_samples: usize, rng: &mut StreamRng) -> Result<ElboEstimate> {
    elbo(&graph.specific_view(node), x, mc_samples, rng)
}

/// `|best_elbo_i − mean ELBO_i(probe)|` for each Basic node, one Monte-Carlo
/// sample per probe example.
pub fn knowledge_novelty(graph: &GraphState, probe: &Tensor, seed: u64) -> Result<Vec<f64>> {
    if graph.basic.is_empty() {
        return Err(Error::Contract("novelty needs at least one Basic node".into()));
    }
    let streams = SeedStreams::new(seed);
    graph
        .basic
        .iter()
        .map(|b| {
            let e = elbo(&b.model, probe, 1, &mut streams.indexed("novelty", b.id as u64))?;
            Ok((b.best_elbo - e.total).abs())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionOverride {
    #[default]
    None,
    ForceBasic,
    ForceSpecific,
}

/// Basic iff this is the first task or `min(ks) > τ`, unless overridden.
pub fn expansion_decision(ks: &[f64], tau: f64, overrides: ExpansionOverride) -> NodeKind {
    if ks.is_empty() {
        return NodeKind::Basic;
    }
    match overrides {
        ExpansionOverride::ForceBasic => NodeKind::Basic,
        ExpansionOverride::ForceSpecific => NodeKind::Specific,
        ExpansionOverride::None => {
            let min = ks.iter().copied().fold(f64::INFINITY, f64::min);
            if min > tau {
                NodeKind::Basic
            } else {
                NodeKind::Specific
            }
        }
    }
}

/// `π_i = (w* − ks_i) / Σ_j (w* − ks_j)` with `w* = Σ_j ks_j`.
///
/// A single score yields `(1)`; when the denominator vanishes (all scores
/// zero) or all scores are equal the weights are uniform.
pub fn importance_weights(ks: &[f64]) -> Result<Vec<f64>> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("importance weights of no scores".into()));
    }
    if ks.iter().any(|k| *k < 0.0 || !k.is_finite()) {
        return Err(Error::InvalidArgument(format!("novelty scores must be finite and ≥ 0: {ks:?}")));
    }
    let k = ks.len();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let uniform = vec![1.0 / k as f64; k];
    if ks.iter().all(|v| *v == ks[0]) {
        return Ok(uniform);
    }
    let w_star: f64 = ks.iter().sum();
    let denom: f64 = ks.iter().map(|v| w_star - v).sum();
    if denom <= 0.0 {
        return Ok(uniform);
    }
    Ok(ks.iter().map(|v| (w_star - v) / denom).collect())
}

/// How nodes are scored for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scoring {
    Elbo,
    Iwelbo { k_prime: usize },
}

/// Mean ELBO (Basic) / MELBO (Specific) of each node on `x`, or their
/// importance-weighted variants.
pub fn node_scores(graph: &GraphState, x: &Tensor, scoring: Scoring, seed: u64) -> Result<Vec<(usize, f64)>> {
    if graph.is_empty() {
        return Err(Error::Contract("node selection on an empty graph".into()));
    }
    let streams = SeedStreams::new(seed);
    graph
        .nodes()
        .into_iter()
        .map(|n| {
            let mut rng = streams.indexed("select", n.id() as u64);
            let est = match (n, scoring) {
                (NodeRef::Basic(b), Scoring::Elbo) => elbo(&b.model, x, 1, &mut rng)?,
                (NodeRef::Basic(b), Scoring::Iwelbo { k_prime }) => iwelbo(&b.model, x, k_prime, &mut rng)?,
                (NodeRef::Specific(s), Scoring::Elbo) => elbo(&graph.specific_view(s), x, 1, &mut rng)?,
                (NodeRef::Specific(s), Scoring::Iwelbo { k_prime }) => {
                    iwelbo(&graph.specific_view(s), x, k_prime, &mut rng)?
                }
            };
            Ok((n.id(), est.total))
        })
        .collect()
}

/// Index of the highest score; ties go to the earliest entry.
pub fn argmax_score(scores: &[(usize, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s > scores[best].1 {
            best = i;
        }
    }
    scores[best].0
}

/// Picks the node with the highest likelihood bound on `x`.
pub fn select_node(graph: &GraphState, x: &Tensor, scoring: Scoring, seed: u64) -> Result<(usize, Vec<(usize, f64)>)> {
    let scores = node_scores(graph, x, scoring, seed)?;
    Ok((argmax_score(&scores), scores))
}

/// Evaluation helper over any node.
pub fn evaluate_node(
    graph: &GraphState,
    id: usize,
    data: &Tensor,
    k_prime: usize,
    streams: &SeedStreams,
) -> Result<(crate::vae::NllEstimate, ElboEstimate)> {
    match graph.node(id) {
        Some(NodeRef::Basic(b)) => evaluate_model(&b.model, data, k_prime, streams),
        Some(NodeRef::Specific(s)) => evaluate_model(&graph.specific_view(s), data, k_prime, streams),
        None => Err(Error::Contract(format!("no node with id {id}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegmConfig {
    pub arch: VaeArch,
    pub train: TrainConfig,
    pub tau: f64,
    pub overrides: ExpansionOverride,
    pub probe_size: usize,
    pub eval_k_prime: usize,
    pub scoring: Scoring,
}

impl Default for DegmConfig {
    fn default() -> Self {
        Self {
            arch: VaeArch::default(),
            train: TrainConfig::default(),
            tau: 600.0,
            overrides: ExpansionOverride::None,
            probe_size: DEFAULT_PROBE,
            eval_k_prime: crate::vae::DEFAULT_NLL_K_PRIME,
            scoring: Scoring::Elbo,
        }
    }
}

/// Observer for per-epoch hooks during graph training.
pub trait DegmObserver {
    fn on_epoch(&mut self, _task_id: usize, _node: NodeKind, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl DegmObserver for () {}

pub struct DegmRun {
    pub graph: GraphState,
    pub evals: Vec<EvalRecord>,
    pub epochs: Vec<(usize, EpochMetrics)>,
}

/// Adds and trains the node for one task and returns its id.
pub fn learn_task(
    graph: &mut GraphState,
    task_id: usize,
    train_data: &Tensor,
    cfg: &DegmConfig,
    seed: u64,
    observer: &mut dyn DegmObserver,
) -> Result<(usize, Vec<EpochMetrics>)> {
    let streams = SeedStreams::new(seed).child(&format!("task/{task_id}"));
    let ks = if graph.basic.is_empty() {
        Vec::new()
    } else {
        let n = cfg.probe_size.min(train_data.rows()).max(1);
        let mut idx: Vec<usize> = (0..train_data.rows()).collect();
        idx.shuffle(&mut streams.stream("probe"));
        idx.truncate(n);
        idx.sort_unstable();
        let probe = train_data.gather_rows(&idx)?;
        knowledge_novelty(graph, &probe, streams.child("novelty").seed())?
    };
    let decision = expansion_decision(&ks, cfg.tau, cfg.overrides);
    let node_seed = streams.child("node").seed();
    let train_streams = streams.child("train");
    let (id, pi, history) = match decision {
        NodeKind::Basic => {
            let id = graph.build_basic_node(task_id, node_seed)?;
            let node = graph.basic.last_mut().expect("just pushed");
            let history = train(&mut node.model, train_data, &cfg.train, &train_streams, |_, e| {
                observer.on_epoch(task_id, NodeKind::Basic, e)
            })?;
            node.best_elbo = history.iter().map(|e| e.objective).fold(f64::NEG_INFINITY, f64::max);
            node.model.set_trainable(false);
            (id, Vec::new(), history)
        }
        NodeKind::Specific => {
            let pi = importance_weights(&ks)?;
            let id = graph.build_specific_node(task_id, pi.clone(), node_seed)?;
            let (basics, specific) = (&graph.basic, &mut graph.specific);
            let node = specific.last_mut().expect("just pushed");
            let mut trainer = SpecificTrainer { node, basics };
            let history = train(&mut trainer, train_data, &cfg.train, &train_streams, |_, e| {
                observer.on_epoch(task_id, NodeKind::Specific, e)
            })?;
            trainer.node.set_trainable(false);
            (id, pi, history)
        }
    };
    graph.expansion_log.push(ExpansionRecord {
        task_id,
        decision,
        ks,
        tau: cfg.tau.is_finite().then_some(cfg.tau),
        pi,
    });
    Ok((id, history))
}

/// Learns every task of the stream, then after each task evaluates all seen
/// test sets through likelihood-based node selection.
pub fn train_degm_sequence(stream: &TaskStream, cfg: &DegmConfig, seed: u64, observer: &mut dyn DegmObserver) -> Result<DegmRun> {
    if cfg.arch.data_dim != stream.dim() {
        return Err(Error::Shape(format!(
            "model dimension {} vs stream dimension {}",
            cfg.arch.data_dim,
            stream.dim()
        )));
    }
    let root = SeedStreams::new(seed);
    let mut graph = GraphState::new(cfg.arch)?;
    let mut evals = Vec::new();
    let mut epochs = Vec::new();
    for task in stream.tasks() {
        let (_, history) = learn_task(&mut graph, task.task_id, task.train.images(), cfg, seed, observer)?;
        epochs.extend(history.into_iter().map(|e| (task.task_id, e)));
        for prev in &stream.tasks()[..task.task_id] {
            let s = root.child(&format!("eval/{}/{}", task.task_id, prev.task_id));
            let (node, _) = select_node(&graph, prev.test.images(), cfg.scoring, s.child("select").seed())?;
            let (nll, e) = evaluate_node(&graph, node, prev.test.images(), cfg.eval_k_prime, &s)?;
            evals.push(EvalRecord {
                after_task: task.task_id,
                eval_task: prev.task_id,
                node: Some(node),
                nll: nll.nll,
                nll_se: nll.std_err,
                elbo: e.total,
                recon: e.recon_term,
                kl: e.kl_term,
                k_prime: cfg.eval_k_prime,
            });
        }
    }
    Ok(DegmRun { graph, evals, epochs })
}
