//! Run configuration: a JSON file, overridden field by field by flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use degm_core::autodiff::Activation;
use degm_core::data::{Binarize, DomainSpec, StreamSettings};
use degm_core::vae::{Likelihood, VaeArch};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ElboGr,
    IwelboGr,
    DegmElbo,
    DegmIwelbo,
    Degm2,
}

impl Method {
    pub fn is_graph(self) -> bool {
        matches!(self, Method::DegmElbo | Method::DegmIwelbo | Method::Degm2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ElboGr => "elbo_gr",
            Method::IwelboGr => "iwelbo_gr",
            Method::DegmElbo => "degm_elbo",
            Method::DegmIwelbo => "degm_iwelbo",
            Method::Degm2 => "degm2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "one")]
    pub snapshot_every: usize,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    /// Weighted samples for every NLL estimate in reports.
    #[serde(default = "default_eval_k")]
    pub eval_k_prime: usize,
    /// Rows per test or mixed set used by `diagnose`.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            snapshot_every: 1,
            pool_size: default_pool(),
            eval_k_prime: default_eval_k(),
            eval_size: default_eval_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default = "twelve")]
    pub width: usize,
    #[serde(default = "twelve")]
    pub height: usize,
    #[serde(default = "default_binarize")]
    pub binarize: Option<Binarize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: default_train(),
            n_test: default_test(),
            width: 12,
            height: 12,
            binarize: default_binarize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default)]
    pub normalize_recon: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: default_hidden(),
            latent_dim: default_latent(),
            decoder_hidden: default_hidden(),
            activation: default_activation(),
            likelihood: default_likelihood(),
            normalize_recon: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Task specs in order, e.g. `["bars", "blobs-inv"]`.
    pub stream: Vec<String>,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Weighted samples of the IWELBO objectives.
    #[serde(default = "default_k")]
    pub k_prime: usize,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "one_f")]
    pub replay_ratio: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    /// When false, every wall-clock field is written as 0.
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn twelve() -> usize {
    12
}
fn default_pool() -> usize {
    5
}
fn default_eval_k() -> usize {
    200
}
fn default_eval_size() -> usize {
    500
}
fn default_train() -> usize {
    2000
}
fn default_test() -> usize {
    500
}
fn default_binarize() -> Option<Binarize> {
    Some(Binarize::Threshold)
}
fn default_hidden() -> usize {
    128
}
fn default_latent() -> usize {
    16
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_likelihood() -> Likelihood {
    Likelihood::Bernoulli
}
fn default_k() -> usize {
    5
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_probe() -> usize {
    degm_core::degm::DEFAULT_PROBE
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub stream: Option<Vec<String>>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub k_prime: Option<usize>,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub replay_ratio: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub eval_k_prime: Option<usize>,
    pub diagnostics: Option<bool>,
    pub pool_size: Option<usize>,
    pub snapshot_every: Option<usize>,
}

impl Overrides {
    fn apply(&self, root: &mut Map<String, Value>) {
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                root.insert(k.to_string(), v);
            }
        };
        set("stream", self.stream.clone().map(Value::from));
        set("method", self.method.clone().map(Value::from));
        set("seed", self.seed.map(Value::from));
        set("k_prime", self.k_prime.map(Value::from));
        set("tau", self.tau.map(Value::from));
        set("epochs", self.epochs.map(Value::from));
        set("batch_size", self.batch_size.map(Value::from));
        set("learning_rate", self.learning_rate.map(Value::from));
        set("replay_ratio", self.replay_ratio.map(Value::from));
        set("output_dir", self.output_dir.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        set("run_id", self.run_id.clone().map(Value::from));
        let diag = [
            ("eval_k_prime", self.eval_k_prime.map(Value::from)),
            ("enabled", self.diagnostics.map(Value::from)),
            ("pool_size", self.pool_size.map(Value::from)),
            ("snapshot_every", self.snapshot_every.map(Value::from)),
        ];
        if diag.iter().any(|(_, v)| v.is_some()) {
            let entry = root
                .entry("diagnostics")
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(d) = entry {
                for (k, v) in diag {
                    if let Some(v) = v {
                        d.insert(k.to_string(), v);
                    }
                }
            }
        }
    }
}

/// Reads the optional file, applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Config(format!("{}: top level must be an object", p.display()))),
                Err(e) => return Err(CliError::Config(format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    overrides.apply(&mut root);
    let cfg: RunConfig = serde_json::from_value(Value::Object(root)).map_err(|e| {
        let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "flags".into());
        CliError::Config(format!("{origin}: {e}"))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("field `{field}`: {why}")));
        if self.stream.is_empty() {
            return bad("stream", "at least one task is required");
        }
        self.domain_specs()?;
        for (field, v) in [
            ("k_prime", self.k_prime),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("probe_size", self.probe_size),
            ("data.n_train", self.data.n_train),
            ("data.n_test", self.data.n_test),
            ("data.width", self.data.width),
            ("data.height", self.data.height),
            ("model.encoder_hidden", self.model.encoder_hidden),
            ("model.latent_dim", self.model.latent_dim),
            ("model.decoder_hidden", self.model.decoder_hidden),
            ("diagnostics.snapshot_every", self.diagnostics.snapshot_every),
            ("diagnostics.pool_size", self.diagnostics.pool_size),
            ("diagnostics.eval_k_prime", self.diagnostics.eval_k_prime),
            ("diagnostics.eval_size", self.diagnostics.eval_size),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        for (field, v) in [("learning_rate", self.learning_rate), ("replay_ratio", self.replay_ratio)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "must be a positive finite number");
            }
        }
        match (self.method, self.tau) {
            (Method::DegmElbo | Method::DegmIwelbo, None) => {
                return bad("tau", &format!("required for method {}", self.method));
            }
            (_, Some(t)) if !(t > 0.0) => return bad("tau", "must be positive"),
            _ => {}
        }
        if self.diagnostics.enabled && self.method.is_graph() {
            return bad("diagnostics.enabled", "snapshots are recorded for replay methods only");
        }
        Ok(())
    }

    pub fn domain_specs(&self) -> CliResult<Vec<DomainSpec>> {
        self.stream
            .iter()
            .map(|s| s.parse().map_err(|e| CliError::Config(format!("field `stream`: {e}"))))
            .collect()
    }

    pub fn stream_settings(&self) -> StreamSettings {
        StreamSettings {
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            width: self.data.width,
            height: self.data.height,
            binarize: self.data.binarize,
        }
    }

    pub fn arch(&self) -> VaeArch {
        VaeArch {
            data_dim: self.data.width * self.data.height,
            encoder_hidden: self.model.encoder_hidden,
            latent_dim: self.model.latent_dim,
            decoder_hidden: self.model.decoder_hidden,
            activation: self.model.activation,
            likelihood: self.model.likelihood,
            normalize_recon: self.model.normalize_recon,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}", self.method, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), r#"{"method": "elbo_gr", "stream": ["bars", "blobs"], "seed": 1}"#);
        let c = parse_config(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.k_prime, 5);
        assert_eq!(c.arch().data_dim, 144);
        assert_eq!(c.run_id(), "elbo_gr-s1");
    }

    #[test]
    fn tau_required_for_degm() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), r#"{"method": "degm_elbo", "stream": ["bars"]}"#);
        let e = parse_config(Some(&p), &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("tau"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let p = write(d.path(), r#"{"method": "degm2", "stream": ["bars"]}"#);
        assert!(parse_config(Some(&p), &Overrides::default()).is_ok());
    }

    #[test]
    fn flags_win() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), r#"{"method": "iwelbo_gr", "stream": ["bars"], "k_prime": 5}"#);
        let o = Overrides {
            k_prime: Some(50),
            pool_size: Some(3),
            ..Default::default()
        };
        let c = parse_config(Some(&p), &o).unwrap();
        assert_eq!(c.k_prime, 50);
        assert_eq!(c.diagnostics.pool_size, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let d = tempfile::tempdir().unwrap();
        let cases = [
            (r#"{"method": "elbo_gr", "stream": ["bars"], "epoch": 3}"#, "epoch"),
            (r#"{"stream": ["bars"]}"#, "method"),
            (r#"{"method": "elbo_gr", "stream": ["bars"], "epochs": "x"}"#, "invalid type"),
            (r#"{"method": "elbo_gr", "stream": ["bars"], "epochs": 0}"#, "epochs"),
            (r#"{"method": "elbo_gr", "stream": ["squares"]}"#, "stream"),
            (r#"{"method": "elbo_gr", "stream": ["bars"], "data": {"widht": 3}}"#, "widht"),
        ];
        for (body, needle) in cases {
            let p = write(d.path(), body);
            let e = parse_config(Some(&p), &Overrides::default()).unwrap_err().to_string();
            assert!(e.contains(needle), "{body}: {e}");
        }
    }
}
