//! Planted-structure fine-tuning comparison: selection by the cluster bandit
//! versus uniform random selection and greedy top-scoring clusters.

use dataselect_core::bandit::{self, BanditConfig};
use dataselect_core::clustering::{self, KMeansParams};
use std::path::Path;

use dataselect_core::corpus::{CandidateInstance, InstanceId, SyntheticSpec, Token};
use dataselect_core::curvature::{estimate_factors, FactorInverseSet};
use dataselect_core::influence;
use dataselect_core::model::{self, ModelConfig, ParamSet, QkvMode};
use dataselect_core::trainer::{self, TrainConfig};
use dataselect_core::Result;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::formats;

#[derive(Debug, Clone)]
pub struct EndToEndConfig {
    pub corpus: SyntheticSpec,
    pub clusters: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub pretrain_size: usize,
    pub finetune: TrainConfig,
    pub damping: f64,
    pub budget: usize,
    pub bandit: BanditConfig,
}

impl EndToEndConfig {
    pub fn standard(seed: u64) -> Self {
        let vocab = 32;
        let chains = 8;
        Self {
            corpus: SyntheticSpec {
                count: 10_000,
                dim: 16,
                vocab_size: vocab,
                seq_len: 16,
                chain_fidelity: vec![0.9; chains],
                component_chain: (0..64).map(|c| c % chains).collect(),
                center_scale: 1.0,
                noise: 0.15,
                reference_chains: vec![0, 1, 2, 3],
                reference_count: 128,
                seed,
            },
            clusters: 64,
            model: ModelConfig {
                vocab_size: vocab,
                hidden_dim: 16,
                n_layers: 1,
                n_heads: 2,
                max_context: 16,
                mlp_ratio: 2.0,
                rope_base: 10_000.0,
                gated_mlp: false,
            },
            pretrain: TrainConfig { lr: 3e-3, steps: 60, batch_size: 16, seed, ..Default::default() },
            pretrain_size: 512,
            finetune: TrainConfig { lr: 3e-3, steps: 150, batch_size: 16, seed, ..Default::default() },
            damping: 1e-3,
            budget: 600,
            bandit: BanditConfig {
                top_k: 4,
                seed,
                ..BanditConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndToEndResult {
    pub base_loss: f64,
    pub quad_loss: f64,
    pub random_loss: f64,
    pub topk_loss: f64,
    pub quad_clusters: usize,
    pub topk_clusters: usize,
    pub scored: usize,
}

pub fn run_end_to_end(cfg: &EndToEndConfig) -> Result<EndToEndResult> {
    let seed = cfg.corpus.seed;
    let data = cfg.corpus.generate()?;
    let tokens: Vec<Vec<Token>> = data.instances.iter().map(|i| i.tokens.clone()).collect();
    let refs = data.reference.sequences();
    let (ref_fit, ref_eval): (Vec<_>, Vec<_>) = refs
        .iter()
        .enumerate()
        .partition(|(j, _)| j / cfg.corpus.reference_chains.len() % 2 == 0);
    let ref_fit: Vec<Vec<Token>> = ref_fit.into_iter().map(|(_, s)| s.clone()).collect();
    let ref_eval: Vec<Vec<Token>> = ref_eval.into_iter().map(|(_, s)| s.clone()).collect();

    let pick = |ids: &[InstanceId]| -> Vec<Vec<Token>> {
        ids.iter().map(|&i| tokens[i as usize].clone()).collect()
    };

    let init = ParamSet::init(&cfg.model, seed)?;
    let pre_ids = bandit::random_selection(tokens.len(), cfg.pretrain_size, seed ^ 0x3a)?;
    let base = trainer::train(&init, &pick(&pre_ids), &cfg.pretrain)?.params;
    let base_loss = trainer::eval_loss(&base, &ref_eval)?;

    let layers = model::tracked_layers(&cfg.model, QkvMode::Joint);
    let factors = estimate_factors(&base, &ref_fit, &layers)?;
    let inv = FactorInverseSet::new(&factors, cfg.damping)?;
    let g = model::grad_of_set(&base, &ref_fit, &layers)?;
    let ihvp = influence::reference_ihvp(&g, &inv, 0)?;

    let model_c = clustering::kmeans(
        &data.corpus,
        &KMeansParams { k: cfg.clusters, seed, ..Default::default() },
    )?;

    let score_ids = |ids: &[InstanceId]| -> Result<Vec<f64>> {
        ids.par_iter()
            .map(|&i| influence::score_tokens(&tokens[i as usize], &ihvp, &base))
            .collect()
    };
    let mut scored = 0usize;
    let mut counting = |ids: &[InstanceId]| {
        scored += ids.len();
        score_ids(ids)
    };
    let sel = bandit::run(&cfg.bandit, &model_c, &mut counting, cfg.budget)?;
    let quad_ids = sel.ledger.selected.clone();
    let topk_ids = bandit::top_k_clusters_selection(
        &model_c,
        &mut |ids: &[InstanceId]| score_ids(ids),
        cfg.bandit.batch_size,
        cfg.budget,
        seed,
    )?;
    let rand_ids = bandit::random_selection(tokens.len(), cfg.budget, seed ^ 0x77)?;

    let finetune = |ids: &[InstanceId]| -> Result<f64> {
        let out = trainer::train(&base, &pick(ids), &cfg.finetune)?;
        trainer::eval_loss(&out.params, &ref_eval)
    };
    let distinct = |ids: &[InstanceId]| {
        let mut c: Vec<usize> = ids.iter().map(|&i| model_c.cluster_of(i)).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    Ok(EndToEndResult {
        base_loss,
        quad_loss: finetune(&quad_ids)?,
        random_loss: finetune(&rand_ids)?,
        topk_loss: finetune(&topk_ids)?,
        quad_clusters: distinct(&quad_ids),
        topk_clusters: distinct(&topk_ids),
        scored,
    })
}

/// Config keys that match [`EndToEndConfig::standard`]'s model and corpus.
pub fn standard_config_text(cfg: &EndToEndConfig, dir: &Path) -> String {
    let m = &cfg.model;
    let t = &cfg.finetune;
    let p = |name: &str| dir.join(name).display().to_string();
    format!(
        "# Synthetic planted-structure corpus\n\
         embeddings = {}\n\
         tokens = {}\n\
         reference = {}\n\
         output_dir = {}\n\
         cluster.k = {}\n\
         bandit.top_k = {}\n\
         bandit.budget = {}\n\
         model.vocab_size = {}\n\
         model.hidden_dim = {}\n\
         model.n_layers = {}\n\
         model.n_heads = {}\n\
         model.max_context = {}\n\
         model.mlp_ratio = {}\n\
         train.lr = {}\n\
         train.steps = {}\n\
         train.batch_size = {}\n",
        p("embeddings.bin"),
        p("tokens.tsv"),
        p("reference.tsv"),
        p("out"),
        cfg.clusters,
        cfg.bandit.top_k,
        cfg.budget,
        m.vocab_size,
        m.hidden_dim,
        m.n_layers,
        m.n_heads,
        m.max_context,
        m.mlp_ratio,
        t.lr,
        t.steps,
        t.batch_size,
    )
}

/// Writes `embeddings.bin`, `tokens.tsv`, `reference.tsv` and `run.cfg` under `dir`.
pub fn write_synthetic(dir: &Path, count: usize, seed: u64) -> CliResult<String> {
    let mut cfg = EndToEndConfig::standard(seed);
    if count < cfg.clusters {
        return Err(CliError::Usage(format!("--count must be at least {}", cfg.clusters)));
    }
    cfg.corpus.count = count;
    cfg.budget = cfg.budget.min(count / 4);
    let data = cfg.corpus.generate()?;
    formats::write_bytes(&dir.join("embeddings.bin"), &formats::encode_embeddings_binary(&data.corpus))?;
    formats::write_bytes(&dir.join("tokens.tsv"), formats::encode_tokens(&data.instances).as_bytes())?;
    let refs: Vec<CandidateInstance> = data
        .reference
        .sequences()
        .iter()
        .enumerate()
        .map(|(i, s)| CandidateInstance { id: i as InstanceId, tokens: s.clone(), embedding_row: i })
        .collect();
    formats::write_bytes(&dir.join("reference.tsv"), formats::encode_tokens(&refs).as_bytes())?;
    formats::write_bytes(&dir.join("run.cfg"), standard_config_text(&cfg, dir).as_bytes())?;
    Ok(format!(
        "wrote {count} candidates and {} reference sequences to {}",
        refs.len(),
        dir.display()
    ))
}
