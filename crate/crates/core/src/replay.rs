//! Generative-replay training of a single VAE over a task stream.
//!
//! Before each task after the first, the current model samples a pseudo
//! dataset the size of everything seen so far (scaled by the replay ratio),
//! which is mixed with the new task's data by per-example fair coin flips.
//! The model is then trained on the mixture, warm-started from its previous
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;
use crate::train::{train, EpochMetrics, TrainConfig};
use crate::vae::{elbo, nll_estimate, standard_normal, Likelihood, VaeArch, VaeModel};

/// Samples drawn from a model's generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub samples: Tensor,
    /// How many tasks the generating model had been trained on.
    pub source_task_count: usize,
    pub generation_seed: u64,
}

/// Draws `n` samples `x ~ p(x | z), z ~ N(0, I)`. Bernoulli models emit the
/// decoder means, binarized per pixel when `binarize` is set; Gaussian models
/// emit their means.
pub fn generate_pseudo(model: &VaeModel, n: usize, seed: u64, source_task_count: usize, binarize: bool) -> Result<PseudoDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("pseudo dataset size must be positive".into()));
    }
    let streams = SeedStreams::new(seed);
    let z = standard_normal(&mut streams.stream("pseudo/latent"), n, model.arch.latent_dim);
    let mut samples = model.decode_mean(&z)?;
    match model.arch.likelihood {
        Likelihood::Bernoulli if binarize => {
            let mut rng = streams.stream("pseudo/binarize");
            for v in samples.data_mut() {
                *v = if rng.random::<f64>() < *v { 1.0 } else { 0.0 };
            }
        }
        Likelihood::Bernoulli => {}
        // keep replay inside the data support
        _ => samples.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
    }
    Ok(PseudoDataset {
        samples,
        source_task_count,
        generation_seed: seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Replay,
    New,
}

/// Replay and new samples interleaved by fair coin flips.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDataset {
    pub samples: Tensor,
    pub source_flags: Vec<SampleSource>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.source_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_flags.is_empty()
    }

    pub fn count(&self, source: SampleSource) -> usize {
        self.source_flags.iter().filter(|&&s| s == source).count()
    }
}

/// Emits every replay and every new sample exactly once. While both sources
/// have samples left, each output slot flips a fair coin from the `mix`
/// stream; once one runs out the other fills the rest. Each source is read in
/// its stored order.
pub fn mix_datasets(replay: Option<&PseudoDataset>, new: &Tensor, seed: u64) -> Result<MixedDataset> {
    let d = new.cols();
    let replay_rows = match replay {
        Some(r) if r.samples.cols() != d => {
            return Err(Error::Shape(format!(
                "replay width {} vs new data width {d}",
                r.samples.cols()
            )))
        }
        Some(r) => r.samples.rows(),
        None => 0,
    };
    let total = replay_rows + new.rows();
    let mut rng = SeedStreams::new(seed).stream("mix");
    let mut data = Vec::with_capacity(total * d);
    let mut flags = Vec::with_capacity(total);
    let (mut ri, mut ni) = (0, 0);
    while ri + ni < total {
        let take_replay = if ri == replay_rows {
            false
        } else if ni == new.rows() {
            true
        } else {
            rng.random_bool(0.5)
        };
        if take_replay {
            data.extend_from_slice(replay.expect("rows remain").samples.row(ri));
            flags.push(SampleSource::Replay);
            ri += 1;
        } else {
            data.extend_from_slice(new.row(ni));
            flags.push(SampleSource::New);
            ni += 1;
        }
    }
    Ok(MixedDataset {
        samples: Tensor::matrix(total, d, data)?,
        source_flags: flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrConfig {
    pub train: TrainConfig,
    /// Replay size = round(ratio · number of real examples seen before).
    pub replay_ratio: f64,
    pub binarize_replay: bool,
    /// Continue from the previous task's parameters; otherwise re-initialise
    /// the model before each task (the replay still comes from the old one).
    pub warm_start: bool,
}

impl Default for GrConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            replay_ratio: 1.0,
            binarize_replay: true,
            warm_start: true,
        }
    }
}

/// Seed spaces used for task `t` (1-based) of a replay run.
pub fn task_streams(seed: u64, task_id: usize) -> SeedStreams {
    SeedStreams::new(seed).child(&format!("task/{task_id}"))
}

pub fn replay_size(prior_examples: usize, ratio: f64) -> usize {
    (ratio * prior_examples as f64).round() as usize
}

/// Hooks for diagnostics during a replay run.
pub trait GrObserver {
    fn on_mixture(&mut self, _task_id: usize, _mixed: &MixedDataset) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _task_id: usize, _model: &VaeModel, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl GrObserver for () {}

pub struct TaskOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub mixed: MixedDataset,
}

/// Trains `model` on task `task_id`, replaying `prior_examples` worth of
/// pseudo data when that is non-zero.
pub fn train_task_gr(
    model: &mut VaeModel,
    task_id: usize,
    prior_examples: usize,
    new_data: &Dataset,
    cfg: &GrConfig,
    seed: u64,
    observer: &mut dyn GrObserver,
) -> Result<TaskOutcome> {
    let streams = task_streams(seed, task_id);
    let n_replay = replay_size(prior_examples, cfg.replay_ratio);
    let pseudo = if n_replay > 0 {
        Some(generate_pseudo(
            model,
            n_replay,
            streams.child("pseudo").seed(),
            task_id - 1,
            cfg.binarize_replay,
        )?)
    } else {
        None
    };
    let mixed = mix_datasets(pseudo.as_ref(), new_data.images(), streams.child("mix").seed())?;
    observer.on_mixture(task_id, &mixed)?;
    if !cfg.warm_start && task_id > 1 {
        *model = VaeModel::new(model.arch, streams.child("reinit").seed())?;
    }
    let epochs = train(model, &mixed.samples, &cfg.train, &streams.child("train"), |m, e| {
        observer.on_epoch(task_id, m, e)
    })?;
    Ok(TaskOutcome { epochs, mixed })
}

/// One held-out evaluation: model state after `after_task`, data of `eval_task`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub after_task: usize,
    pub eval_task: usize,
    pub node: Option<usize>,
    pub nll: f64,
    pub nll_se: f64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub k_prime: usize,
}

pub struct GrRun {
    pub model: VaeModel,
    pub evals: Vec<EvalRecord>,
    pub epochs: Vec<(usize, EpochMetrics)>,
}

/// Held-out NLL and ELBO of `model` on `data`, from the `eval` seed space.
pub fn evaluate_model<M: crate::vae::LatentModel + ?Sized>(
    model: &M,
    data: &Tensor,
    k_prime: usize,
    streams: &SeedStreams,
) -> Result<(crate::vae::NllEstimate, crate::vae::ElboEstimate)> {
    let nll = nll_estimate(model, data, k_prime, &mut streams.stream("nll"))?;
    let e = elbo(model, data, 1, &mut streams.stream("elbo"))?;
    Ok((nll, e))
}

/// Runs replay training over every task in order and evaluates on all seen
/// test sets after each task (t·(t+1)/2 records after t tasks).
pub fn run_gr_sequence(
    stream: &TaskStream,
    arch: VaeArch,
    cfg: &GrConfig,
    eval_k_prime: usize,
    seed: u64,
    observer: &mut dyn GrObserver,
) -> Result<GrRun> {
    if arch.data_dim != stream.dim() {
        return Err(Error::Shape(format!(
            "model dimension {} vs stream dimension {}",
            arch.data_dim,
            stream.dim()
        )));
    }
    let root = SeedStreams::new(seed);
    let mut model = VaeModel::new(arch, root.child("model").seed())?;
    let mut evals = Vec::new();
    let mut epochs = Vec::new();
    let mut seen = 0;
    for task in stream.tasks() {
        let outcome = train_task_gr(&mut model, task.task_id, seen, &task.train, cfg, seed, observer)?;
        seen += task.train.len();
        epochs.extend(outcome.epochs.into_iter().map(|e| (task.task_id, e)));
        for prev in &stream.tasks()[..task.task_id] {
            let s = root.child(&format!("eval/{}/{}", task.task_id, prev.task_id));
            let (nll, e) = evaluate_model(&model, prev.test.images(), eval_k_prime, &s)?;
            evals.push(EvalRecord {
                after_task: task.task_id,
                eval_task: prev.task_id,
                node: None,
                nll: nll.nll,
                nll_se: nll.std_err,
                elbo: e.total,
                recon: e.recon_term,
                kl: e.kl_term,
                k_prime: eval_k_prime,
            });
        }
    }
    Ok(GrRun { model, evals, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;

    fn tiny_arch() -> VaeArch {
        VaeArch {
            data_dim: 9,
            encoder_hidden: 6,
            latent_dim: 2,
            decoder_hidden: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_decoder_emits_half() {
        let mut m = VaeModel::new(tiny_arch(), 1).unwrap();
        for mlp in [&mut m.decoder_trunk, &mut m.decoder_out] {
            zero(mlp);
        }
        let p = generate_pseudo(&m, 10, 3, 1, false).unwrap();
        assert!(p.samples.data().iter().all(|&v| v == 0.5));
        let b = generate_pseudo(&m, 10, 3, 1, true).unwrap();
        assert!(b.samples.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(b, generate_pseudo(&m, 10, 3, 1, true).unwrap());
        assert!(generate_pseudo(&m, 0, 3, 1, true).is_err());
    }

    fn zero(mlp: &mut Mlp) {
        for p in mlp.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn ones(rows: usize, value: f64) -> Tensor {
        Tensor::matrix(rows, 3, vec![value; rows * 3]).unwrap()
    }

    #[test]
    fn mixing_balances_and_keeps_everything() {
        let replay = PseudoDataset {
            samples: ones(1000, 1.0),
            source_task_count: 1,
            generation_seed: 0,
        };
        let mixed = mix_datasets(Some(&replay), &ones(1000, 0.0), 42).unwrap();
        assert_eq!(mixed.len(), 2000);
        assert_eq!(mixed.count(SampleSource::Replay), 1000);
        // the first 1000 slots are fair coin flips: 500 ± 3·sqrt(250)
        let early = mixed.source_flags[..1000]
            .iter()
            .filter(|&&s| s == SampleSource::Replay)
            .count() as f64;
        assert!((early - 500.0).abs() <= 3.0 * 250f64.sqrt(), "{early}");
        for (i, f) in mixed.source_flags.iter().enumerate() {
            let expect = if *f == SampleSource::Replay { 1.0 } else { 0.0 };
            assert_eq!(mixed.samples.row(i)[0], expect);
        }
        assert_eq!(mixed, mix_datasets(Some(&replay), &ones(1000, 0.0), 42).unwrap());
    }

    #[test]
    fn empty_replay_is_identity() {
        let new = Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let mixed = mix_datasets(None, &new, 1).unwrap();
        assert!(mixed.source_flags.iter().all(|&s| s == SampleSource::New));
        assert_eq!(mixed.samples, new);
        let bad = PseudoDataset {
            samples: Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            source_task_count: 1,
            generation_seed: 0,
        };
        assert!(mix_datasets(Some(&bad), &new, 1).is_err());
    }

    #[test]
    fn replay_size_rounds() {
        assert_eq!(replay_size(2000, 1.0), 2000);
        assert_eq!(replay_size(3, 0.5), 2);
        assert_eq!(replay_size(0, 1.0), 0);
    }
}
