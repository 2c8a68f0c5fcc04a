//! Measurable terms of the lifelong generalization bounds.
//!
//! Risks use the squared reconstruction loss. The hypothesis class is
//! approximated by a finite pool of frozen snapshots, so every supremum below
//! is an exact maximum over that pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, StreamRng};
use crate::tensor::Tensor;
use crate::vae::{elbo, LatentModel, VaeModel};

/// `Σ_i (x_i − x′_i)²`.
pub fn squared_loss(x: &[f64], x_prime: &[f64]) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::Shape(format!("squared loss of {} vs {} values", x.len(), x_prime.len())));
    }
    Ok(x.iter().zip(x_prime).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// A deterministic map `X → X`.
pub trait Hypothesis {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

impl Hypothesis for VaeModel {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.reconstruct(x)
    }
}

/// The true labelling function of an encode/decode task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityMap;

impl Hypothesis for IdentityMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Element-wise `a·x + b`; small enough to enumerate by hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

impl Hypothesis for Affine {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| self.scale * v + self.shift).collect())
    }
}

#[derive(Clone, Copy)]
pub enum Reference<'a> {
    Identity,
    Hypothesis(&'a dyn Hypothesis),
}

fn check_rows(x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!("expected a sample matrix, got shape {:?}", x.shape())));
    }
    Ok(())
}

fn mean_row_loss(a: &Tensor, b: &Tensor, normalize: bool) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let d = a.cols();
    let mut total = 0.0;
    for i in 0..a.rows() {
        total += squared_loss(a.row(i), b.row(i))?;
    }
    let per = total / a.rows() as f64;
    Ok(if normalize { per / d as f64 } else { per })
}

/// Mean squared loss between `h(x)` and the reference labelling of `x`,
/// optionally divided by the data dimension.
pub fn risk(h: &dyn Hypothesis, data: &Tensor, reference: Reference<'_>, normalize: bool) -> Result<f64> {
    check_rows(data)?;
    let out = h.apply(data)?;
    let target = match reference {
        Reference::Identity => data.clone(),
        Reference::Hypothesis(r) => r.apply(data)?,
    };
    mean_row_loss(&out, &target, normalize)
}

/// Finite stand-in for a hypothesis class.
pub struct HypothesisPool<H> {
    entries: Vec<(String, H)>,
}

impl<H: Hypothesis> HypothesisPool<H> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, h: H) {
        self.entries.push((label.into(), h));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn hypotheses(&self) -> impl Iterator<Item = &H> {
        self.entries.iter().map(|(_, h)| h)
    }

    /// Keeps only the most recent `n` entries.
    pub fn keep_last(&mut self, n: usize) {
        let drop = self.entries.len().saturating_sub(n);
        self.entries.drain(..drop);
    }

    fn outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.entries.iter().map(|(_, h)| h.apply(x)).collect()
    }
}

impl<H: Hypothesis> Default for HypothesisPool<H> {
    fn default() -> Self {
        Self::new()
    }
}

impl<H: Hypothesis> FromIterator<(String, H)> for HypothesisPool<H> {
    fn from_iter<I: IntoIterator<Item = (String, H)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

fn pair_losses(outputs: &[Tensor], normalize: bool) -> Result<Vec<f64>> {
    let n = outputs.len();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                out[a * n + b] = mean_row_loss(&outputs[b], &outputs[a], normalize)?;
            }
        }
    }
    Ok(out)
}

/// `max_{h,h′ ∈ pool} |E_P L(h′(x), h(x)) − E_Q L(h′(x), h(x))|`.
pub fn empirical_discrepancy<H: Hypothesis>(set_p: &Tensor, set_q: &Tensor, pool: &HypothesisPool<H>, normalize: bool) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!("discrepancy needs a pool of at least 2, got {}", pool.len())));
    }
    check_rows(set_p)?;
    check_rows(set_q)?;
    let lp = pair_losses(&pool.outputs(set_p)?, normalize)?;
    let lq = pair_losses(&pool.outputs(set_q)?, normalize)?;
    Ok(lp.iter().zip(&lq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Finite-sample slack added to the empirical discrepancy:
/// `8(rad_P + rad_Q) + 3M(√(log(4/δ)/2m_P) + √(log(4/δ)/2m_Q))`.
pub fn discrepancy_slack(m_p: usize, m_q: usize, m_bound: f64, delta: f64, rad_p: f64, rad_q: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("δ must lie in (0, 1), got {delta}")));
    }
    if m_p == 0 || m_q == 0 {
        return Err(Error::InvalidArgument("sample sizes must be positive".into()));
    }
    if !(m_bound > 0.0) || rad_p < 0.0 || rad_q < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss bound {m_bound} must be positive and complexities non-negative"
        )));
    }
    let log_term = (4.0 / delta).ln();
    let conc = |m: usize| (log_term / (2.0 * m as f64)).sqrt();
    Ok(8.0 * (rad_p + rad_q) + 3.0 * m_bound * (conc(m_p) + conc(m_q)))
}

/// Rademacher surrogate over the loss-composed pool
/// `ℓ_{h,h′}(x) = L(h′(x), h(x))`: the mean over sign draws of
/// `max_{h,h′} |Σ_i σ_i ℓ_{h,h′}(x_i)| / m`.
pub fn rademacher_estimate<H: Hypothesis>(
    data: &Tensor,
    pool: &HypothesisPool<H>,
    n_sign_draws: usize,
    normalize: bool,
    rng: &mut StreamRng,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("Rademacher estimate over an empty pool".into()));
    }
    if n_sign_draws == 0 {
        return Err(Error::InvalidArgument("at least one sign draw is required".into()));
    }
    check_rows(data)?;
    let outputs = pool.outputs(data)?;
    let m = data.rows();
    let scale = if normalize { data.cols() as f64 } else { 1.0 };
    let mut funcs: Vec<Vec<f64>> = Vec::new();
    for a in &outputs {
        for b in &outputs {
            let f = (0..m)
                .map(|i| squared_loss(b.row(i), a.row(i)).map(|l| l / scale))
                .collect::<Result<Vec<f64>>>()?;
            funcs.push(f);
        }
    }
    let mut total = 0.0;
    let mut sigma = vec![0.0; m];
    for _ in 0..n_sign_draws {
        for s in sigma.iter_mut() {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let best = funcs
            .iter()
            .map(|f| f.iter().zip(&sigma).map(|(v, s)| v * s).sum::<f64>().abs())
            .fold(0.0, f64::max);
        total += best / m as f64;
    }
    Ok(total / n_sign_draws as f64)
}

/// Mean analytic posterior KL of any latent model over `x`.
pub fn mean_posterior_kl<M: LatentModel + ?Sized>(model: &M, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let post = model.encode(&mut tape, xv)?;
    let kl = tape.value(post.kl);
    Ok(kl.iter().sum::<f64>() / kl.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlGap {
    /// Task-averaged KL on the target sets.
    pub kl_target: f64,
    /// KL on the mixed training set.
    pub kl_mixed: f64,
    pub gap: f64,
}

/// `|KL₁ − KL₂|` with `KL₁ = (1/t) Σ_i E_{P_i} KL(q(z|x)‖p)` and
/// `KL₂ = E_mixed KL(q(z|x̃)‖p)`.
pub fn kl_gap<M: LatentModel + ?Sized>(model: &M, target_sets: &[&Tensor], mixed: &Tensor) -> Result<KlGap> {
    if target_sets.is_empty() {
        return Err(Error::InvalidArgument("KL gap needs at least one target set".into()));
    }
    let mut kl_target = 0.0;
    for set in target_sets {
        kl_target += mean_posterior_kl(model, set)?;
    }
    kl_target /= target_sets.len() as f64;
    let kl_mixed = mean_posterior_kl(model, mixed)?;
    Ok(KlGap {
        kl_target,
        kl_mixed,
        gap: (kl_target - kl_mixed).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownConfig {
    /// Divide −ELBO, KL and squared losses by the data dimension.
    pub normalize: bool,
    pub delta: f64,
    pub mc_samples: usize,
    pub sign_draws: usize,
    pub seed: u64,
}

impl Default for BreakdownConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            delta: 0.05,
            mc_samples: 1,
            sign_draws: 20,
            seed: 0,
        }
    }
}

/// The terms of the lifelong −ELBO bound, measured on one model state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LelboBreakdown {
    /// `E_mixed[−ELBO]`.
    pub source_risk_elbo: f64,
    pub kl_gap: f64,
    pub empirical_discrepancy: f64,
    pub slack: f64,
    /// `(1/t) Σ_i E_{P_i}[−ELBO]`.
    pub target_risk_elbo: f64,
    /// `target − (source + gap)`, the share left to the discrepancy terms.
    pub residual: f64,
    /// The optimal combined risk is not estimable; 0 is its only lower bound.
    pub epsilon_lower_bound: f64,
}

/// Measures every right-hand-side term independently.
pub fn lelbo_breakdown<M, H>(
    model: &M,
    target_sets: &[&Tensor],
    mixed: &Tensor,
    pool: &HypothesisPool<H>,
    cfg: &BreakdownConfig,
) -> Result<LelboBreakdown>
where
    M: LatentModel + ?Sized,
    H: Hypothesis,
{
    if target_sets.is_empty() {
        return Err(Error::InvalidArgument("breakdown needs at least one target set".into()));
    }
    let d = model.data_dim() as f64;
    // Already divided by d when the model normalizes its reconstruction term.
    let scale = if cfg.normalize && !model.normalize_recon() { d } else { 1.0 };
    let kl_scale = if cfg.normalize { d } else { 1.0 };
    let streams = SeedStreams::new(cfg.seed);
    let neg = |x: &Tensor, rng: &mut StreamRng| -> Result<f64> {
        let e = elbo(model, x, cfg.mc_samples, rng)?;
        let recon = e.recon_term / scale;
        Ok(-(recon - e.kl_term / kl_scale))
    };
    let source = neg(mixed, &mut streams.stream("source"))?;
    let mut target = 0.0;
    for (i, set) in target_sets.iter().enumerate() {
        target += neg(set, &mut streams.indexed("target", i as u64))?;
    }
    target /= target_sets.len() as f64;
    let gap = kl_gap(model, target_sets, mixed)?.gap / kl_scale;
    let pooled = Tensor::vstack(target_sets)?;
    let disc = empirical_discrepancy(&pooled, mixed, pool, cfg.normalize)?;
    let rad_p = rademacher_estimate(&pooled, pool, cfg.sign_draws, cfg.normalize, &mut streams.stream("rad/target"))?;
    let rad_q = rademacher_estimate(mixed, pool, cfg.sign_draws, cfg.normalize, &mut streams.stream("rad/source"))?;
    let m_bound = if cfg.normalize { 1.0 } else { d };
    let slack = discrepancy_slack(pooled.rows(), mixed.rows(), m_bound, cfg.delta, rad_p, rad_q)?;
    Ok(LelboBreakdown {
        source_risk_elbo: source,
        kl_gap: gap,
        empirical_discrepancy: disc,
        slack,
        target_risk_elbo: target,
        residual: target - (source + gap),
        epsilon_lower_bound: 0.0,
    })
}

/// Tasks learned by one mixture component, in order, with the number of
/// further training rounds each task's replayed distribution went through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentTasks {
    pub component: usize,
    pub tasks: Vec<usize>,
    pub retrain_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentLog {
    pub t: usize,
    pub components: Vec<ComponentTasks>,
}

impl AssignmentLog {
    /// Checks coverage and the retrain-count rules.
    pub fn new(t: usize, components: Vec<ComponentTasks>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &components {
            if !ids.insert(c.component) {
                return Err(Error::InvalidLog(format!("component {} listed twice", c.component)));
            }
            if c.tasks.is_empty() || c.tasks.len() != c.retrain_counts.len() {
                return Err(Error::InvalidLog(format!(
                    "component {} has {} tasks and {} retrain counts",
                    c.component,
                    c.tasks.len(),
                    c.retrain_counts.len()
                )));
            }
            if c.tasks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidLog(format!("component {} tasks out of order", c.component)));
            }
            for (&a, &count) in c.tasks.iter().zip(&c.retrain_counts) {
                if a == 0 || a > t {
                    return Err(Error::InvalidLog(format!("task {a} outside 1..={t}")));
                }
                if !seen.insert(a) {
                    return Err(Error::InvalidLog(format!("task {a} assigned twice")));
                }
                if count > t - a || (c.tasks.len() == 1 && count != 0) {
                    return Err(Error::InvalidLog(format!(
                        "task {a} of component {} has retrain count {count}",
                        c.component
                    )));
                }
            }
        }
        let missing: Vec<usize> = (1..=t).filter(|a| !seen.contains(a)).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidLog(format!("tasks {missing:?} are not assigned")));
        }
        Ok(Self { t, components })
    }

    /// Builds the log from `owner[a − 1]` = component of task `a`, assuming
    /// a component replays all its earlier tasks whenever it learns a new one.
    pub fn from_owners(owner: &[usize]) -> Result<Self> {
        let t = owner.len();
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in owner.iter().enumerate() {
            by.entry(c).or_default().push(i + 1);
        }
        let components = by
            .into_iter()
            .map(|(component, tasks)| {
                let n = tasks.len();
                let retrain_counts = if n == 1 { vec![0] } else { (0..n).map(|j| n - 1 - j).collect() };
                ComponentTasks {
                    component,
                    tasks,
                    retrain_counts,
                }
            })
            .collect();
        Self::new(t, components)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub t: usize,
    /// Once-trained components and their single task.
    pub once: Vec<(usize, usize)>,
    /// Multi-trained components and their tasks.
    pub multi: Vec<(usize, Vec<usize>)>,
    /// Number of tasks modelled by each multi-trained component.
    pub a_tilde: Vec<usize>,
    /// `(component, task, c)` for every task of a multi-trained component.
    pub c_table: Vec<(usize, usize, usize)>,
    /// Task → number of accumulated transfer terms (`c + 1` for multi-trained
    /// components, 0 otherwise).
    pub accumulated_term_counts: BTreeMap<usize, usize>,
}

impl AssignmentSummary {
    pub fn component_count(&self) -> usize {
        self.once.len() + self.multi.len()
    }
}

pub fn assignment_summary(log: &AssignmentLog) -> AssignmentSummary {
    let mut once = Vec::new();
    let mut multi = Vec::new();
    let mut a_tilde = Vec::new();
    let mut c_table = Vec::new();
    let mut acc = BTreeMap::new();
    for c in &log.components {
        if c.tasks.len() == 1 {
            once.push((c.component, c.tasks[0]));
            acc.insert(c.tasks[0], 0);
        } else {
            multi.push((c.component, c.tasks.clone()));
            a_tilde.push(c.tasks.len());
            for (&a, &count) in c.tasks.iter().zip(&c.retrain_counts) {
                c_table.push((c.component, a, count));
                acc.insert(a, count + 1);
            }
        }
    }
    AssignmentSummary {
        t: log.t,
        once,
        multi,
        a_tilde,
        c_table,
        accumulated_term_counts: acc,
    }
}

/// Which measured quantity a risk entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum Stage {
    /// Risk of the component against the reference on its training distribution.
    Risk,
    /// Discrepancy between consecutive approximations `k` and `k + 1`
    /// of a task's distribution (`k = −1` is the true distribution).
    Transfer(i64),
    /// `E[−ELBO]` of the component on the task's training distribution.
    NegElbo,
    /// KL gap of a multi-trained component, keyed by its first task.
    KlGap,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Risk => write!(f, "risk"),
            Stage::Transfer(k) => write!(f, "transfer({k})"),
            Stage::NegElbo => write!(f, "neg_elbo"),
            Stage::KlGap => write!(f, "kl_gap"),
        }
    }
}

pub type RiskKey = (usize, Stage);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureBoundReport {
    /// Summed terms of the once-trained components.
    pub r_c: f64,
    /// Accumulated terms of the multi-trained components.
    pub r_a_prime: f64,
    /// Transfer share of `r_c`.
    pub r_c_transfer: f64,
    /// Transfer share of `r_a_prime`.
    pub r_a_prime_transfer: f64,
    pub d_star_diff: f64,
    /// `(r_c + r_a_prime) / t`.
    pub risk_bound: f64,
    /// `(1/t)(Σ −ELBO + r_a_prime_transfer + r_c_transfer + d_star_diff)`.
    pub nll_bound: f64,
    pub epsilon_lower_bound: f64,
    pub epsilon_estimable: bool,
}

/// Keys `mixture_bound_report` reads for a summary.
pub fn required_keys(summary: &AssignmentSummary) -> Vec<RiskKey> {
    let mut keys = Vec::new();
    for &(_, a) in &summary.once {
        keys.extend([(a, Stage::Risk), (a, Stage::Transfer(-1)), (a, Stage::NegElbo)]);
    }
    for &(_, a, c) in &summary.c_table {
        keys.push((a, Stage::Risk));
        keys.extend((-1..c as i64).map(|k| (a, Stage::Transfer(k))));
        keys.push((a, Stage::NegElbo));
    }
    for (_, tasks) in &summary.multi {
        keys.push((tasks[0], Stage::KlGap));
    }
    keys
}

pub fn mixture_bound_report(summary: &AssignmentSummary, risks: &BTreeMap<RiskKey, f64>) -> Result<MixtureBoundReport> {
    let keys = required_keys(summary);
    let missing: Vec<String> = keys
        .iter()
        .filter(|k| !risks.contains_key(k))
        .map(|(a, s)| format!("({a}, {s})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteInput(missing));
    }
    let get = |a: usize, s: Stage| risks[&(a, s)];
    let mut r_c_transfer = 0.0;
    let mut r_c = 0.0;
    let mut neg_elbo = 0.0;
    for &(_, a) in &summary.once {
        let tr = get(a, Stage::Transfer(-1));
        r_c += get(a, Stage::Risk) + tr;
        r_c_transfer += tr;
        neg_elbo += get(a, Stage::NegElbo);
    }
    let mut r_a_prime = 0.0;
    let mut r_a_prime_transfer = 0.0;
    for &(_, a, c) in &summary.c_table {
        let tr: f64 = (-1..c as i64).map(|k| get(a, Stage::Transfer(k))).sum();
        r_a_prime += get(a, Stage::Risk) + tr;
        r_a_prime_transfer += tr;
        neg_elbo += get(a, Stage::NegElbo);
    }
    let d_star_diff: f64 = summary.multi.iter().map(|(_, tasks)| get(tasks[0], Stage::KlGap)).sum();
    let t = summary.t as f64;
    Ok(MixtureBoundReport {
        r_c,
        r_a_prime,
        r_c_transfer,
        r_a_prime_transfer,
        d_star_diff,
        risk_bound: (r_c + r_a_prime) / t,
        nll_bound: (neg_elbo + r_a_prime_transfer + r_c_transfer + d_star_diff) / t,
        epsilon_lower_bound: 0.0,
        epsilon_estimable: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn loss_cases() {
        assert_eq!(squared_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(squared_loss(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.0);
        assert!(squared_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn risk_of_mean_image_is_variance() {
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0]).unwrap();
        struct MeanImage;
        impl Hypothesis for MeanImage {
            fn apply(&self, x: &Tensor) -> Result<Tensor> {
                Tensor::matrix(x.rows(), 2, [0.5, 0.5].repeat(x.rows()))
            }
        }
        let r = risk(&MeanImage, &x, Reference::Identity, false).unwrap();
        assert!((r - (0.5 + 0.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(risk(&IdentityMap, &x, Reference::Identity, false).unwrap(), 0.0);
        assert_eq!(risk(&MeanImage, &x, Reference::Hypothesis(&MeanImage), true).unwrap(), 0.0);
    }

    #[test]
    fn discrepancy_on_affine_pair() {
        let mut pool = HypothesisPool::new();
        pool.push("id", Affine { scale: 1.0, shift: 0.0 });
        pool.push("double", Affine { scale: 2.0, shift: 0.0 });
        // L(h′, h) = x² for this pair in either order.
        let p = col(&[1.0, 0.0]);
        let q = col(&[0.5, 0.5]);
        let d = empirical_discrepancy(&p, &q, &pool, false).unwrap();
        assert!((d - (0.5 - 0.25)).abs() < 1e-15);
        assert_eq!(d, empirical_discrepancy(&q, &p, &pool, false).unwrap());
        assert_eq!(empirical_discrepancy(&p, &p, &pool, false).unwrap(), 0.0);
        pool.keep_last(1);
        assert!(empirical_discrepancy(&p, &q, &pool, false).is_err());
    }

    #[test]
    fn slack_closed_form() {
        let s = discrepancy_slack(1000, 1000, 1.0, 0.05, 0.0, 0.0).unwrap();
        assert!((s - 6.0 * (80f64.ln() / 2000.0).sqrt()).abs() < 1e-12);
        assert!((s - 0.2810).abs() < 5e-4);
        assert!(discrepancy_slack(10, 10, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(discrepancy_slack(10, 10, 1.0, 0.0, 0.0, 0.0).is_err());
        let with_rad = discrepancy_slack(10, 10, 1.0, 0.1, 0.1, 0.2).unwrap();
        let base = discrepancy_slack(10, 10, 1.0, 0.1, 0.0, 0.0).unwrap();
        assert!((with_rad - base - 2.4).abs() < 1e-12);
    }

    #[test]
    fn rademacher_nonnegative_and_validated() {
        let mut pool = HypothesisPool::new();
        pool.push("a", Affine { scale: 1.0, shift: 0.0 });
        let x = col(&[0.1, 0.2, 0.3]);
        let mut rng = StreamRng::seed_from_u64(1);
        assert_eq!(rademacher_estimate(&x, &pool, 5, false, &mut rng).unwrap(), 0.0);
        let empty: HypothesisPool<Affine> = HypothesisPool::new();
        assert!(rademacher_estimate(&x, &empty, 5, false, &mut rng).is_err());
    }

    #[test]
    fn owners_to_counts() {
        let log = AssignmentLog::from_owners(&[0, 0, 0, 0]).unwrap();
        let s = assignment_summary(&log);
        let counts: Vec<usize> = s.accumulated_term_counts.values().copied().collect();
        assert_eq!(counts, vec![4, 3, 2, 1]);
        let s = assignment_summary(&AssignmentLog::from_owners(&[0, 1, 2]).unwrap());
        assert!(s.multi.is_empty());
        assert!(s.accumulated_term_counts.values().all(|&c| c == 0));
    }

    #[test]
    fn invalid_logs() {
        let c = |component, tasks: Vec<usize>, retrain_counts| ComponentTasks {
            component,
            tasks,
            retrain_counts,
        };
        assert!(AssignmentLog::new(2, vec![c(0, vec![1], vec![0])]).is_err());
        assert!(AssignmentLog::new(2, vec![c(0, vec![1, 2], vec![1, 0]), c(1, vec![2], vec![0])]).is_err());
        assert!(AssignmentLog::new(2, vec![c(0, vec![1, 2], vec![2, 0])]).is_err());
        assert!(AssignmentLog::new(2, vec![c(0, vec![1], vec![1]), c(1, vec![2], vec![0])]).is_err());
        assert!(AssignmentLog::new(2, vec![c(0, vec![1, 2], vec![1, 0])]).is_ok());
    }

    #[test]
    fn report_two_tasks_unit_risks() {
        let s = assignment_summary(&AssignmentLog::from_owners(&[0, 0]).unwrap());
        let risks: BTreeMap<RiskKey, f64> = required_keys(&s).into_iter().map(|k| (k, 1.0)).collect();
        let r = mixture_bound_report(&s, &risks).unwrap();
        assert_eq!(r.r_c, 0.0);
        assert_eq!(r.r_a_prime, 5.0);
        let mut partial = risks.clone();
        partial.remove(&(1, Stage::Transfer(0)));
        match mixture_bound_report(&s, &partial) {
            Err(Error::IncompleteInput(keys)) => assert_eq!(keys, vec!["(1, transfer(0))".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
