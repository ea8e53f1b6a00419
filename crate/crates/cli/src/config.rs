//! Run configuration: defaults, presets, `key = value` config files and
//! command-line overrides.
//!
//! Precedence, lowest to highest: built-in defaults, preset, config file
//! keys (in file order), `--set key=value` overrides, dedicated flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use tkgr_core::eval::TieRule;
use tkgr_core::learning::TrainConfig;
use tkgr_core::model::{
    Activation, Aggregator, MergeOp, ModelConfig, TimeSharing,
};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Every tunable of a run, in one flat bag.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// History window length m.
    pub m: usize,
    /// Embedding dimension d.
    pub d: usize,
    pub omega: usize,
    pub merge_op: MergeOp,
    pub aggregator: Aggregator,
    pub layer_norm: bool,
    pub shortcut: bool,
    pub boundary: bool,
    pub activation: Activation,
    pub time_sharing: TimeSharing,
    pub time_encoder: bool,
    pub tied_layers: bool,
    pub bypass_edge_transform: bool,
    pub n_negatives: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables gradient clipping.
    pub clip_norm: f64,
    pub tie_rule: TieRule,
    pub top_k: usize,
    pub beam_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: tkgr_core::learning::default_threads(),
            m: 8,
            d: 64,
            omega: 4,
            merge_op: MergeOp::Mult,
            aggregator: Aggregator::Pna,
            layer_norm: true,
            shortcut: true,
            boundary: true,
            activation: Activation::Relu,
            time_sharing: TimeSharing::Shared,
            time_encoder: true,
            tied_layers: false,
            bypass_edge_transform: false,
            n_negatives: 64,
            alpha: 1.0,
            lr: 5e-4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 0.0,
            tie_rule: TieRule::Mean,
            top_k: 2,
            beam_width: 10,
        }
    }
}

pub const VALID_KEYS: &[&str] = &[
    "preset",
    "seed",
    "threads",
    "m",
    "d",
    "omega",
    "merge_op",
    "aggregator",
    "layer_norm",
    "shortcut",
    "boundary",
    "activation",
    "time_sharing",
    "time_encoder",
    "tied_layers",
    "bypass_edge_transform",
    "n_negatives",
    "alpha",
    "lr",
    "epochs",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "tie_rule",
    "top_k",
    "beam_width",
];

/// Benchmark-style presets: `(m, omega, lr)` per dataset family.
pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<(), ConfigError> {
    let (m, omega, lr) = match name {
        "icews18" => (25, 6, 5e-4),
        "gdelt" => (15, 6, 5e-4),
        "wiki" => (10, 4, 5e-4),
        "yago" => (8, 4, 1e-4),
        "synthetic" => (8, 4, 5e-4),
        other => {
            return Err(ConfigError(format!(
                "unknown preset {other:?}; valid presets: icews18, gdelt, wiki, yago, synthetic"
            )))
        }
    };
    cfg.m = m;
    cfg.omega = omega;
    cfg.lr = lr;
    Ok(())
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(ConfigError(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {v:?}")))
}

/// Applies one `key = value` assignment.
pub fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "preset" => apply_preset(cfg, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "threads" => cfg.threads = parse_num(key, value)?,
        "m" => cfg.m = parse_num(key, value)?,
        "d" => cfg.d = parse_num(key, value)?,
        "omega" => cfg.omega = parse_num(key, value)?,
        "merge_op" => {
            cfg.merge_op = match value {
                "mult" => MergeOp::Mult,
                "add" => MergeOp::Add,
                "rotate" => MergeOp::Rotate,
                _ => return Err(ConfigError(format!("merge_op: unknown {value:?}"))),
            }
        }
        "aggregator" => {
            cfg.aggregator = match value {
                "pna" => Aggregator::Pna,
                "sum" => Aggregator::Sum,
                "mean" => Aggregator::Mean,
                "max" => Aggregator::Max,
                _ => return Err(ConfigError(format!("aggregator: unknown {value:?}"))),
            }
        }
        "layer_norm" => cfg.layer_norm = parse_bool(key, value)?,
        "shortcut" => cfg.shortcut = parse_bool(key, value)?,
        "boundary" => cfg.boundary = parse_bool(key, value)?,
        "activation" => {
            cfg.activation = match value {
                "relu" => Activation::Relu,
                "none" => Activation::None,
                _ => return Err(ConfigError(format!("activation: unknown {value:?}"))),
            }
        }
        "time_sharing" => {
            cfg.time_sharing = match value {
                "shared" => TimeSharing::Shared,
                "per_relation" => TimeSharing::PerRelation,
                _ => return Err(ConfigError(format!("time_sharing: unknown {value:?}"))),
            }
        }
        "time_encoder" => cfg.time_encoder = parse_bool(key, value)?,
        "tied_layers" => cfg.tied_layers = parse_bool(key, value)?,
        "bypass_edge_transform" => cfg.bypass_edge_transform = parse_bool(key, value)?,
        "n_negatives" => cfg.n_negatives = parse_num(key, value)?,
        "alpha" => cfg.alpha = parse_num(key, value)?,
        "lr" => cfg.lr = parse_num(key, value)?,
        "epochs" => cfg.epochs = parse_num(key, value)?,
        "beta1" => cfg.beta1 = parse_num(key, value)?,
        "beta2" => cfg.beta2 = parse_num(key, value)?,
        "adam_eps" => cfg.adam_eps = parse_num(key, value)?,
        "clip_norm" => cfg.clip_norm = parse_num(key, value)?,
        "tie_rule" => {
            cfg.tie_rule = match value {
                "mean" => TieRule::Mean,
                "optimistic" => TieRule::Optimistic,
                "pessimistic" => TieRule::Pessimistic,
                _ => return Err(ConfigError(format!("tie_rule: unknown {value:?}"))),
            }
        }
        "top_k" => cfg.top_k = parse_num(key, value)?,
        "beam_width" => cfg.beam_width = parse_num(key, value)?,
        other => {
            return Err(ConfigError(format!(
                "unknown key {other:?}; valid keys: {}",
                VALID_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Parses a line-oriented `key = value` file (# starts a comment).
pub fn apply_file(cfg: &mut RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!(
                "{}:{}: expected `key = value`, got {raw_line:?}",
                path.display(),
                idx + 1
            )));
        };
        apply_key(cfg, key.trim(), value.trim())
            .map_err(|e| ConfigError(format!("{}:{}: {e}", path.display(), idx + 1)))?;
    }
    Ok(())
}

impl RunConfig {
    pub fn model_config(&self, num_relations: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(num_relations, self.d);
        mc.prop.omega = self.omega;
        mc.prop.merge = self.merge_op;
        mc.prop.aggregator = self.aggregator;
        mc.prop.use_layer_norm = self.layer_norm;
        mc.prop.use_shortcut = self.shortcut;
        mc.prop.include_boundary = self.boundary;
        mc.prop.activation = self.activation;
        mc.time_sharing = self.time_sharing;
        mc.use_time_encoder = self.time_encoder;
        mc.tied_layers = self.tied_layers;
        mc.bypass_edge_transform = self.bypass_edge_transform;
        mc
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_negatives: self.n_negatives,
            alpha: self.alpha,
            learning_rate: self.lr,
            max_epochs: self.epochs,
            history_len: self.m,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            clip_norm: if self.clip_norm > 0.0 {
                Some(self.clip_norm)
            } else {
                None
            },
            threads: self.threads,
        }
    }

    /// Every config value as `key = value` lines, for run logs and
    /// manifests.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("m", self.m.to_string());
        kv("d", self.d.to_string());
        kv("omega", self.omega.to_string());
        kv(
            "merge_op",
            match self.merge_op {
                MergeOp::Mult => "mult",
                MergeOp::Add => "add",
                MergeOp::Rotate => "rotate",
            }
            .into(),
        );
        kv(
            "aggregator",
            match self.aggregator {
                Aggregator::Pna => "pna",
                Aggregator::Sum => "sum",
                Aggregator::Mean => "mean",
                Aggregator::Max => "max",
            }
            .into(),
        );
        kv("layer_norm", self.layer_norm.to_string());
        kv("shortcut", self.shortcut.to_string());
        kv("boundary", self.boundary.to_string());
        kv(
            "activation",
            match self.activation {
                Activation::Relu => "relu",
                Activation::None => "none",
            }
            .into(),
        );
        kv(
            "time_sharing",
            match self.time_sharing {
                TimeSharing::Shared => "shared",
                TimeSharing::PerRelation => "per_relation",
            }
            .into(),
        );
        kv("time_encoder", self.time_encoder.to_string());
        kv("tied_layers", self.tied_layers.to_string());
        kv("bypass_edge_transform", self.bypass_edge_transform.to_string());
        kv("n_negatives", self.n_negatives.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs", self.epochs.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv(
            "tie_rule",
            match self.tie_rule {
                TieRule::Mean => "mean",
                TieRule::Optimistic => "optimistic",
                TieRule::Pessimistic => "pessimistic",
            }
            .into(),
        );
        kv("top_k", self.top_k.to_string());
        kv("beam_width", self.beam_width.to_string());
        out
    }

    /// Echo as a JSON object for the manifest.
    pub fn echo_map(&self) -> BTreeMap<String, String> {
        self.echo()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

/// Resolves a full configuration from optional file, `--set` pairs and the
/// documented precedence.
pub fn resolve(
    config_file: Option<&Path>,
    preset: Option<&str>,
    sets: &[String],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = preset {
        apply_preset(&mut cfg, p)?;
    }
    if let Some(path) = config_file {
        apply_file(&mut cfg, path)?;
    }
    for pair in sets {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(ConfigError(format!(
                "--set expects key=value, got {pair:?}"
            )));
        };
        apply_key(&mut cfg, k.trim(), v.trim())?;
    }
    Ok(cfg)
}
