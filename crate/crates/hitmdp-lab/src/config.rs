//! Experiment configuration: a versioned JSON document with one section
//! per subcommand, dotted-path overrides, and strict unknown-key
//! rejection. The resolved config is what a run actually used; loading it
//! back reproduces the run.

use crate::error::LabError;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_seed() -> u64 {
    1
}
fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vmoc: Option<VmocSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabular: Option<TabularSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homomorphism: Option<HomomorphismSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coldstart: Option<ColdstartSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplaySection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: default_seed(),
            out: None,
            threads: default_threads(),
            vmoc: None,
            tabular: None,
            homomorphism: None,
            coldstart: None,
            replay: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmocSection {
    /// "pendulum", "four_rooms" or "chain:N".
    pub env: String,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// One gradient step per this many environment steps.
    pub update_every: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub n_options: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub target_smoothing: f64,
    /// "auto" or "fixed".
    pub alpha_mode: String,
    pub alpha_a: f64,
    pub alpha_o: f64,
    /// Defaults to `-act_dim` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy_action: Option<f64>,
    /// Defaults to `0.5 ln K` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy_option: Option<f64>,
    /// "zero" or "mutual-info".
    pub regularizer: String,
    pub exploration_noise_std: f64,
    pub normalize_obs: bool,
}

impl Default for VmocSection {
    fn default() -> Self {
        VmocSection {
            env: "pendulum".into(),
            total_steps: 20_000,
            warmup_steps: 1_000,
            update_every: 1,
            eval_interval: 1_000,
            eval_episodes: 10,
            batch_size: 64,
            buffer_capacity: 1_000_000,
            n_options: 4,
            embed_dim: 40,
            hidden: vec![256, 256],
            gamma: 0.99,
            learning_rate: 3e-4,
            target_smoothing: 0.005,
            alpha_mode: "auto".into(),
            alpha_a: 0.2,
            alpha_o: 0.2,
            target_entropy_action: None,
            target_entropy_option: None,
            regularizer: "zero".into(),
            exploration_noise_std: 0.2,
            normalize_obs: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabularSection {
    pub env: String,
    pub n_options: usize,
    pub discount: f64,
    pub alpha_a: f64,
    pub alpha_o: f64,
    pub tol: f64,
}

impl Default for TabularSection {
    fn default() -> Self {
        TabularSection {
            env: "chain:5".into(),
            n_options: 2,
            discount: 0.9,
            alpha_a: 1.0,
            alpha_o: 1.0,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomomorphismSection {
    /// "mirror8to4" or "file:<path>".
    pub fixture: String,
    pub tol: f64,
    /// Also compute optimal / fixed-policy value gaps and the objective
    /// gap at `elbo_horizon`.
    pub check_values: bool,
    pub elbo_horizon: usize,
}

impl Default for HomomorphismSection {
    fn default() -> Self {
        HomomorphismSection {
            fixture: "mirror8to4".into(),
            tol: 1e-9,
            check_values: true,
            elbo_horizon: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdstartSection {
    /// "copy", "add2" or "add3".
    pub task: String,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub k: usize,
    pub l: usize,
    pub beta: f64,
    pub gumbel_temperature: f64,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// "exact" or "gumbel".
    pub mode: String,
    pub eval_interval: usize,
}

impl Default for ColdstartSection {
    fn default() -> Self {
        ColdstartSection {
            task: "add2".into(),
            train_samples: 200,
            holdout_samples: 50,
            k: 6,
            l: 3,
            beta: 0.1,
            gumbel_temperature: 0.5,
            token_dim: 16,
            embed_dim: 16,
            epochs: 200,
            learning_rate: 0.02,
            mode: "exact".into(),
            eval_interval: 20,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub metrics_path: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainVmoc,
    SolveTabular,
    CheckHomomorphism,
    Coldstart,
    ReplayMetrics,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainVmoc => "train-vmoc",
            Command::SolveTabular => "solve-tabular",
            Command::CheckHomomorphism => "check-homomorphism",
            Command::Coldstart => "coldstart",
            Command::ReplayMetrics => "replay-metrics",
        }
    }
}

/// Loads a config file, applies `--set` overrides (dotted paths), then
/// the `--seed`, `--out` and `--threads` flags, and validates everything
/// for the given command.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<String>,
    threads: Option<usize>,
    command: Command,
) -> Result<ExperimentConfig, LabError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| LabError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let mut config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| LabError::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out = Some(out);
    }
    if let Some(threads) = threads {
        config.threads = threads;
    }
    validate(&mut config, command)?;
    Ok(config)
}

fn apply_override(value: &mut serde_json::Value, item: &str) -> Result<(), LabError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override {item:?} is not key=value")))?;
    if key.is_empty() {
        return Err(LabError::Config(format!("override {item:?} has an empty key")));
    }
    // Parse the value as JSON when possible, else treat it as a string.
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(LabError::Config(format!(
                "override key {key:?}: {part:?} is not an object"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let leaf = parts.last().expect("non-empty key");
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| LabError::Config(format!("override key {key:?} does not reach an object")))?;
    obj.insert(leaf.to_string(), parsed);
    Ok(())
}

fn validate(config: &mut ExperimentConfig, command: Command) -> Result<(), LabError> {
    if config.version != CONFIG_VERSION {
        return Err(LabError::Config(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            config.version
        )));
    }
    if config.threads == 0 {
        return Err(LabError::Config("threads must be at least 1".into()));
    }
    let range = |name: &str, ok: bool| -> Result<(), LabError> {
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("{name} out of range")))
        }
    };
    match command {
        Command::TrainVmoc => {
            let v = config.vmoc.get_or_insert_with(Default::default);
            parse_env_id(&v.env)?;
            range("vmoc.total_steps", v.total_steps >= 1)?;
            range("vmoc.update_every", v.update_every >= 1)?;
            range("vmoc.eval_interval", v.eval_interval >= 1)?;
            range("vmoc.eval_episodes", v.eval_episodes >= 1)?;
            range("vmoc.batch_size", v.batch_size >= 1)?;
            range("vmoc.buffer_capacity", v.buffer_capacity >= v.batch_size)?;
            range("vmoc.n_options", v.n_options >= 1)?;
            range("vmoc.hidden", !v.hidden.is_empty() && v.hidden.len() <= 3)?;
            range("vmoc.gamma", (0.0..1.0).contains(&v.gamma))?;
            range("vmoc.learning_rate", v.learning_rate > 0.0)?;
            range("vmoc.target_smoothing", (0.0..=1.0).contains(&v.target_smoothing))?;
            range("vmoc.alpha_a", v.alpha_a > 0.0)?;
            range("vmoc.alpha_o", v.alpha_o > 0.0)?;
            range(
                "vmoc.alpha_mode",
                v.alpha_mode == "auto" || v.alpha_mode == "fixed",
            )?;
            range(
                "vmoc.regularizer",
                v.regularizer == "zero" || v.regularizer == "mutual-info",
            )?;
            range("vmoc.exploration_noise_std", v.exploration_noise_std >= 0.0)?;
        }
        Command::SolveTabular => {
            let t = config.tabular.get_or_insert_with(Default::default);
            parse_env_id(&t.env)?;
            range("tabular.n_options", t.n_options >= 1)?;
            range("tabular.discount", (0.0..1.0).contains(&t.discount))?;
            range("tabular.alpha_a", t.alpha_a > 0.0)?;
            range("tabular.alpha_o", t.alpha_o > 0.0)?;
            range("tabular.tol", t.tol > 0.0)?;
        }
        Command::CheckHomomorphism => {
            let h = config.homomorphism.get_or_insert_with(Default::default);
            range("homomorphism.tol", h.tol > 0.0)?;
            range("homomorphism.elbo_horizon", h.elbo_horizon >= 1)?;
            if h.fixture != "mirror8to4" && !h.fixture.starts_with("file:") {
                return Err(LabError::Config(format!(
                    "homomorphism.fixture must be \"mirror8to4\" or \"file:<path>\", got {:?}",
                    h.fixture
                )));
            }
        }
        Command::Coldstart => {
            let c = config.coldstart.get_or_insert_with(Default::default);
            if hitmdp_core::coldstart::Task::parse(&c.task).is_none() {
                return Err(LabError::Config(format!("unknown coldstart task {:?}", c.task)));
            }
            if hitmdp_core::coldstart::TrainMode::parse(&c.mode).is_none() {
                return Err(LabError::Config(format!("unknown coldstart mode {:?}", c.mode)));
            }
            range("coldstart.train_samples", c.train_samples >= 1)?;
            range("coldstart.k", c.k >= 1)?;
            range("coldstart.l", c.l >= 1)?;
            range("coldstart.beta", c.beta >= 0.0)?;
            range("coldstart.gumbel_temperature", c.gumbel_temperature > 0.0)?;
            range("coldstart.epochs", c.epochs >= 1)?;
            range("coldstart.learning_rate", c.learning_rate > 0.0)?;
            range("coldstart.eval_interval", c.eval_interval >= 1)?;
        }
        Command::ReplayMetrics => {
            let r = config.replay.get_or_insert_with(Default::default);
            if r.metrics_path.is_empty() {
                return Err(LabError::Config("replay.metrics_path must be set".into()));
            }
        }
    }
    Ok(())
}

/// Parsed environment selector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnvId {
    Chain(usize),
    FourRooms,
    Pendulum,
}

pub fn parse_env_id(id: &str) -> Result<EnvId, LabError> {
    if id == "four_rooms" {
        return Ok(EnvId::FourRooms);
    }
    if id == "pendulum" {
        return Ok(EnvId::Pendulum);
    }
    if let Some(n) = id.strip_prefix("chain:") {
        let n: usize = n
            .parse()
            .map_err(|_| LabError::Config(format!("bad chain length in env id {id:?}")))?;
        if !(2..=50).contains(&n) {
            return Err(LabError::Config(format!("chain length {n} outside [2, 50]")));
        }
        return Ok(EnvId::Chain(n));
    }
    Err(LabError::Config(format!(
        "unknown env id {id:?} (expected \"chain:N\", \"four_rooms\" or \"pendulum\")"
    )))
}
