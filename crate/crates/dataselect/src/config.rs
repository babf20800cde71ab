//! Run configuration: a `key = value` text file plus overrides.
//!
//! Every key has a default (see [`KEYS`]). Unknown keys are rejected. The
//! fingerprint is a SHA-256 over the sorted effective values of all keys that
//! can change results; `output_dir` and `workers` are excluded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dataselect_core::bandit::{BanditConfig, RewardMode, ThresholdMode};
use dataselect_core::clustering::KMeansParams;
use dataselect_core::influence::ScoreMethod;
use dataselect_core::model::{ModelConfig, QkvMode, TapKind};
use dataselect_core::trainer::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("embeddings", "", "embedding file (binary or .csv)"),
    ("embeddings_format", "auto", "auto | binary | csv"),
    ("tokens", "", "candidate token file: id<TAB>tokens per line"),
    ("reference", "", "reference token file, same layout"),
    ("params", "", "model checkpoint; empty = initialize from model.seed"),
    ("output_dir", "out", "directory for all outputs"),
    ("workers", "0", "worker threads; 0 = all cores"),
    ("cluster.k", "64", "number of clusters"),
    ("cluster.seed", "0", "k-means++ seed"),
    ("cluster.max_iters", "100", "Lloyd iteration cap"),
    ("cluster.tol", "0", "stop when max centroid shift is below this"),
    ("cluster.normalize", "false", "L2-normalize rows first"),
    ("bandit.alpha", "0.002", "exploration weight"),
    ("bandit.tau", "0.0025", "selection threshold"),
    ("bandit.gamma", "0.05", "per-iteration selection fraction"),
    ("bandit.top_k", "4", "clusters pulled per iteration"),
    ("bandit.batch_size", "32", "instances scored per pull"),
    ("bandit.budget", "1000", "instances to select"),
    ("bandit.tau_mode", "cluster-mean", "cluster-mean | per-instance"),
    ("bandit.reward_mode", "sum", "sum | mean"),
    ("bandit.seed", "0", "sampling seed"),
    ("bandit.max_iterations", "100000", "iteration cap; hitting it truncates the run"),
    ("influence.damping", "0.001", "damping added in the factor eigenbasis"),
    ("influence.method", "factored", "exact | factored | factored+sketch"),
    ("influence.sketch_dim", "256", "projection dimension for factored+sketch"),
    ("influence.sketch_seed", "0", "projection seed"),
    ("influence.qkv", "joint", "joint | independent"),
    ("influence.layers", "all", "all, or comma list of query,key,value,attn-out,mlp-1,mlp-gate,mlp-2"),
    ("influence.param_cap", "3000", "largest tracked parameter count for exact scoring"),
    ("score.ids", "", "id list for the score command; empty = every candidate"),
    ("model.vocab_size", "256", ""),
    ("model.hidden_dim", "64", ""),
    ("model.n_layers", "2", ""),
    ("model.n_heads", "4", ""),
    ("model.max_context", "64", ""),
    ("model.mlp_ratio", "2.6666666666666665", ""),
    ("model.rope_base", "10000", ""),
    ("model.gated_mlp", "false", ""),
    ("model.seed", "0", "initialization seed when no checkpoint is given"),
    ("train.lr", "0.001", ""),
    ("train.batch_size", "16", ""),
    ("train.steps", "500", ""),
    ("train.beta1", "0.9", ""),
    ("train.beta2", "0.95", ""),
    ("train.eps", "1e-8", ""),
    ("train.seed", "0", ""),
    ("simulate.arms", "20", "arms in the bandit simulation"),
    ("simulate.steps", "1000", ""),
    ("simulate.trials", "100", ""),
    ("simulate.sigma", "1", "reward noise"),
    ("simulate.alpha", "1", "exploration weight of the simulated UCB policy"),
    ("simulate.seed", "0", ""),
    ("oracle.kron_trials", "40", "random factor pairs per damping value"),
    ("oracle.fd_coords", "2000", "parameters checked by finite differences (all if fewer)"),
    ("oracle.candidates", "200", "candidates in the synthetic method comparison"),
    ("oracle.seed", "0", ""),
    ("report.random_seed", "0", "seed of the random baseline in the loss table"),
];

const UNFINGERPRINTED: &[&str] = &["output_dir", "workers"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Auto,
    Binary,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSettings {
    pub damping: f64,
    pub method: ScoreMethod,
    pub sketch_dim: usize,
    pub sketch_seed: u64,
    pub qkv: QkvMode,
    /// `None` tracks every attention and MLP weight.
    pub kinds: Option<Vec<TapKind>>,
    pub param_cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSettings {
    pub arms: usize,
    pub steps: usize,
    pub trials: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub kron_trials: usize,
    pub fd_coords: usize,
    pub candidates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub embeddings: Option<PathBuf>,
    pub embeddings_format: EmbeddingFormat,
    pub tokens: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub cluster: KMeansParams,
    pub bandit: BanditConfig,
    pub budget: usize,
    pub influence: InfluenceSettings,
    pub score_ids: Option<PathBuf>,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub simulate: SimulateSettings,
    pub oracle: OracleSettings,
    pub report_random_seed: u64,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::from_pairs(Vec::new()).expect("defaults are valid")
    }

    /// Reads `path` (if any), then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        for (k, v) in pairs {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(usage(format!("unknown config key `{k}`"))),
            }
        }
        Self::typed(values)
    }

    fn typed(values: BTreeMap<String, String>) -> CliResult<Self> {
        let get = |k: &str| values[k].as_str();
        fn num<T: std::str::FromStr>(values: &BTreeMap<String, String>, k: &str) -> CliResult<T> {
            values[k]
                .parse()
                .map_err(|_| usage(format!("config key `{k}`: cannot parse `{}`", values[k])))
        }
        let path = |k: &str| (!get(k).is_empty()).then(|| PathBuf::from(get(k)));
        let boolean = |k: &str| match get(k) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(usage(format!("config key `{k}`: expected true/false, got `{v}`"))),
        };

        let embeddings_format = match get("embeddings_format") {
            "auto" => EmbeddingFormat::Auto,
            "binary" => EmbeddingFormat::Binary,
            "csv" => EmbeddingFormat::Csv,
            v => return Err(usage(format!("embeddings_format: unknown `{v}`"))),
        };
        let cluster = KMeansParams {
            k: num(&values, "cluster.k")?,
            seed: num(&values, "cluster.seed")?,
            max_iters: num(&values, "cluster.max_iters")?,
            tol: num(&values, "cluster.tol")?,
            normalize: boolean("cluster.normalize")?,
        };
        if cluster.k == 0 {
            return Err(usage("cluster.k must be positive"));
        }
        let bandit = BanditConfig {
            alpha: num(&values, "bandit.alpha")?,
            tau: num(&values, "bandit.tau")?,
            gamma: num(&values, "bandit.gamma")?,
            top_k: num(&values, "bandit.top_k")?,
            batch_size: num(&values, "bandit.batch_size")?,
            threshold_mode: match get("bandit.tau_mode") {
                "cluster-mean" => ThresholdMode::ClusterMean,
                "per-instance" => ThresholdMode::PerInstance,
                v => return Err(usage(format!("bandit.tau_mode: unknown `{v}`"))),
            },
            reward_mode: match get("bandit.reward_mode") {
                "sum" => RewardMode::Sum,
                "mean" => RewardMode::Mean,
                v => return Err(usage(format!("bandit.reward_mode: unknown `{v}`"))),
            },
            seed: num(&values, "bandit.seed")?,
            max_iterations: num(&values, "bandit.max_iterations")?,
        };
        bandit.validate().map_err(|e| usage(e.to_string()))?;

        let kinds = match get("influence.layers") {
            "all" => None,
            list => Some(
                list.split(',')
                    .map(|s| {
                        TapKind::from_name(s.trim())
                            .ok_or_else(|| usage(format!("influence.layers: unknown kind `{s}`")))
                    })
                    .collect::<CliResult<Vec<_>>>()?,
            ),
        };
        let influence = InfluenceSettings {
            damping: num(&values, "influence.damping")?,
            method: ScoreMethod::from_name(get("influence.method"))
                .ok_or_else(|| usage(format!("influence.method: unknown `{}`", get("influence.method"))))?,
            sketch_dim: num(&values, "influence.sketch_dim")?,
            sketch_seed: num(&values, "influence.sketch_seed")?,
            qkv: match get("influence.qkv") {
                "joint" => QkvMode::Joint,
                "independent" => QkvMode::Independent,
                v => return Err(usage(format!("influence.qkv: unknown `{v}`"))),
            },
            kinds,
            param_cap: num(&values, "influence.param_cap")?,
        };
        if !(influence.damping >= 0.0) {
            return Err(usage("influence.damping must be ≥ 0"));
        }
        if influence.method == ScoreMethod::FactoredSketch && influence.sketch_dim == 0 {
            return Err(usage("influence.sketch_dim must be positive for factored+sketch"));
        }

        let model = ModelConfig {
            vocab_size: num(&values, "model.vocab_size")?,
            hidden_dim: num(&values, "model.hidden_dim")?,
            n_layers: num(&values, "model.n_layers")?,
            n_heads: num(&values, "model.n_heads")?,
            max_context: num(&values, "model.max_context")?,
            mlp_ratio: num(&values, "model.mlp_ratio")?,
            rope_base: num(&values, "model.rope_base")?,
            gated_mlp: boolean("model.gated_mlp")?,
        };
        model.validate().map_err(|e| usage(format!("model config: {e}")))?;
        let train = TrainConfig {
            lr: num(&values, "train.lr")?,
            batch_size: num(&values, "train.batch_size")?,
            steps: num(&values, "train.steps")?,
            beta1: num(&values, "train.beta1")?,
            beta2: num(&values, "train.beta2")?,
            eps: num(&values, "train.eps")?,
            seed: num(&values, "train.seed")?,
            ..TrainConfig::default()
        };
        train.validate().map_err(|e| usage(format!("train config: {e}")))?;

        let simulate = SimulateSettings {
            arms: num(&values, "simulate.arms")?,
            steps: num(&values, "simulate.steps")?,
            trials: num(&values, "simulate.trials")?,
            sigma: num(&values, "simulate.sigma")?,
            alpha: num(&values, "simulate.alpha")?,
            seed: num(&values, "simulate.seed")?,
        };
        if simulate.arms < 2 || simulate.steps == 0 || simulate.trials == 0 {
            return Err(usage("simulate needs ≥ 2 arms, ≥ 1 step and ≥ 1 trial"));
        }
        let oracle = OracleSettings {
            kron_trials: num(&values, "oracle.kron_trials")?,
            fd_coords: num(&values, "oracle.fd_coords")?,
            candidates: num(&values, "oracle.candidates")?,
            seed: num(&values, "oracle.seed")?,
        };

        Ok(Self {
            embeddings: path("embeddings"),
            embeddings_format,
            tokens: path("tokens"),
            reference: path("reference"),
            params: path("params"),
            output_dir: PathBuf::from(get("output_dir")),
            workers: num(&values, "workers")?,
            cluster,
            bandit,
            budget: num(&values, "bandit.budget")?,
            influence,
            score_ids: path("score.ids"),
            model,
            model_seed: num(&values, "model.seed")?,
            train,
            simulate,
            oracle,
            report_random_seed: num(&values, "report.random_seed")?,
            values,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Effective values, one `key = value` line each, sorted by key.
    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn digest<'a>(&'a self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if keep(k) && !UNFINGERPRINTED.contains(&k.as_str()) {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hex SHA-256 of every result-affecting key.
    pub fn fingerprint(&self) -> String {
        self.digest(|_| true)
    }

    /// Fingerprint of the inputs a cluster artifact depends on.
    pub fn cluster_fingerprint(&self) -> String {
        self.digest(|k| k.starts_with("cluster.") || k.starts_with("embeddings"))
    }
}
