//! Subcommand implementations. Each command reads inputs named by the
//! config, writes its outputs under `output_dir`, and returns a short summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dataselect_core::bandit::{self, Policy};
use dataselect_core::clustering::{self, ClusterModel};
use dataselect_core::corpus::{self, CandidateInstance, InstanceId, ReferenceSet, Token};
use dataselect_core::curvature::{
    tap_for, DampedFactorInverse, FactorInverseSet, KroneckerFactor,
};
use dataselect_core::influence::{
    self, IhvpVector, InfluenceRow, InfluenceTable, ScoreMethod, SketchProjector, SketchedVector,
};
use dataselect_core::linalg::{lu_solve, Mat};
use dataselect_core::model::{self, LayerTap, LayerVectors, ParamSet, QkvMode, TapKind, TrackedLayer};
use dataselect_core::oracle::{self, QkvScenario};
use dataselect_core::trainer::{self, TrainConfig, TrainOutcome};
use dataselect_core::{math, rng, Result as CoreResult};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{self, fmt_f64};

pub const CLUSTERS_FILE: &str = "clusters.bin";
pub const SELECTION_FILE: &str = "selection.txt";
pub const LEDGER_FILE: &str = "ledger.jsonl";

pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("config key `{key}` is required by this command")))
}

/// Runs `f` on a pool capped at `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

// ------------------------------------------------------------------ loaders

pub fn load_params(cfg: &RunConfig) -> CliResult<ParamSet> {
    match &cfg.params {
        Some(p) => {
            let params = formats::decode_params(&formats::read_bytes(p)?, p)?;
            if params.config != cfg.model {
                return Err(CliError::data(
                    p,
                    format!("checkpoint model {:?} differs from configured model {:?}", params.config, cfg.model),
                ));
            }
            Ok(params)
        }
        None => Ok(ParamSet::init(&cfg.model, cfg.model_seed)?),
    }
}

fn check_sequence(cfg: &RunConfig, path: &Path, tokens: &[Token]) -> CliResult<()> {
    corpus::check_tokens(tokens, cfg.model.vocab_size).map_err(|e| CliError::data(path, e.to_string()))?;
    if tokens.len() < 2 || tokens.len() > cfg.model.max_context {
        return Err(CliError::data(
            path,
            format!("sequence of length {} outside 2..={}", tokens.len(), cfg.model.max_context),
        ));
    }
    Ok(())
}

/// Candidates indexed by instance id; ids must be exactly `0..count`.
pub fn load_candidates(cfg: &RunConfig) -> CliResult<Vec<CandidateInstance>> {
    let path = require(&cfg.tokens, "tokens")?;
    let mut inst = formats::read_tokens(path)?;
    for i in &inst {
        check_sequence(cfg, path, &i.tokens)?;
    }
    inst.sort_by_key(|i| i.id);
    if let Some((pos, i)) = inst.iter().enumerate().find(|(p, i)| i.id != *p as InstanceId) {
        return Err(CliError::data(
            path,
            format!("instance ids must be 0..{}; found id {} at rank {pos}", inst.len(), i.id),
        ));
    }
    Ok(inst)
}

pub fn load_reference(cfg: &RunConfig) -> CliResult<ReferenceSet> {
    let path = require(&cfg.reference, "reference")?;
    let seqs: Vec<Vec<Token>> = formats::read_tokens(path)?.into_iter().map(|i| i.tokens).collect();
    for s in &seqs {
        check_sequence(cfg, path, s)?;
    }
    ReferenceSet::new(seqs, cfg.model.vocab_size).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn load_clusters(cfg: &RunConfig) -> CliResult<ClusterModel> {
    let path = out_path(cfg, CLUSTERS_FILE);
    if !path.exists() {
        return Err(CliError::MissingArtifact { path, producer: "cluster" });
    }
    let (model, fp) = formats::decode_cluster_model(&formats::read_bytes(&path)?, &path)?;
    if fp != cfg.cluster_fingerprint() {
        return Err(CliError::data(
            &path,
            "written under a different clustering configuration; re-run `dataselect cluster`",
        ));
    }
    Ok(model)
}

/// Tracked registry after applying `influence.layers`.
pub fn tracked(cfg: &RunConfig) -> Vec<TrackedLayer> {
    let all = model::tracked_layers(&cfg.model, cfg.influence.qkv);
    match &cfg.influence.kinds {
        None => all,
        Some(kinds) => all
            .into_iter()
            .filter(|t| {
                kinds.contains(&t.kind)
                    || (t.kind == TapKind::QkvJoint
                        && kinds.iter().any(|k| matches!(k, TapKind::Query | TapKind::Key | TapKind::Value)))
            })
            .collect(),
    }
}

// ------------------------------------------------------- parallel primitives

/// Per-sequence backward taps, in input order.
pub fn par_taps(params: &ParamSet, seqs: &[Vec<Token>]) -> CoreResult<Vec<Vec<LayerTap>>> {
    seqs.par_iter()
        .map(|s| model::loss_and_grad(params, s).map(|(_, b)| b.taps))
        .collect()
}

/// Factors accumulated in sequence order, so results match a sequential pass.
pub fn par_factors(
    params: &ParamSet,
    seqs: &[Vec<Token>],
    layers: &[TrackedLayer],
) -> CoreResult<Vec<KroneckerFactor>> {
    let taps = par_taps(params, seqs)?;
    let mut fs: Vec<KroneckerFactor> = layers
        .iter()
        .map(|&l| KroneckerFactor::for_layer(&params.config, l))
        .collect();
    for t in &taps {
        for f in &mut fs {
            f.accumulate(&tap_for(t, f.tracked())?)?;
        }
    }
    Ok(fs)
}

pub fn par_grad_of_set(
    params: &ParamSet,
    seqs: &[Vec<Token>],
    layers: &[TrackedLayer],
) -> CoreResult<LayerVectors> {
    let grads: Vec<LayerVectors> = seqs
        .par_iter()
        .map(|s| model::tracked_grad(params, s, layers))
        .collect::<CoreResult<_>>()?;
    let mut acc = LayerVectors::zeros(&params.config, layers);
    for g in &grads {
        acc.axpy(1.0, g);
    }
    acc.scale(1.0 / seqs.len().max(1) as f64);
    Ok(acc)
}

/// Batch gradient with per-sequence work in parallel and an ordered sum.
pub fn par_batch_grad(params: &ParamSet, batch: &[&[Token]]) -> CoreResult<(f64, ParamSet)> {
    let parts: Vec<(f64, ParamSet)> = batch
        .par_iter()
        .map(|s| model::loss_and_grad(params, s).map(|(l, b)| (l, b.grads)))
        .collect::<CoreResult<_>>()?;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.axpy(1.0, g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

pub fn par_train(init: &ParamSet, data: &[Vec<Token>], cfg: &TrainConfig) -> CoreResult<TrainOutcome> {
    trainer::train_with(init, data, cfg, par_batch_grad)
}

pub fn par_eval_loss(params: &ParamSet, set: &[Vec<Token>]) -> CoreResult<f64> {
    if set.is_empty() {
        return trainer::eval_loss(params, set);
    }
    let losses: Vec<f64> = set
        .par_iter()
        .map(|s| model::loss(params, s))
        .collect::<CoreResult<_>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}

// ----------------------------------------------------------------- scoring

/// Everything needed to score candidates against the reference set.
pub struct ScoringContext {
    pub params: ParamSet,
    pub layers: Vec<TrackedLayer>,
    pub method: ScoreMethod,
    pub factors: Vec<KroneckerFactor>,
    pub ihvp: IhvpVector,
    sketch: Option<(SketchProjector, SketchedVector)>,
    exact_dir: Option<Vec<f64>>,
}

impl ScoringContext {
    /// Estimates factors over the reference set and prepares the reference iHVP.
    pub fn build(cfg: &RunConfig, params: ParamSet, reference: &ReferenceSet) -> CliResult<Self> {
        let layers = tracked(cfg);
        if layers.is_empty() {
            return Err(CliError::Usage("influence.layers selects no tracked layers".into()));
        }
        let seqs = reference.sequences();
        let factors = par_factors(&params, seqs, &layers)?;
        let inv = FactorInverseSet::new(&factors, cfg.influence.damping)?;
        let ref_grad = par_grad_of_set(&params, seqs, &layers)?;
        let ihvp = influence::reference_ihvp(&ref_grad, &inv, params.fingerprint())?;
        let method = cfg.influence.method;
        let sketch = (method == ScoreMethod::FactoredSketch).then(|| {
            let p = SketchProjector::rademacher(cfg.influence.sketch_dim, cfg.influence.sketch_seed);
            let s = p.sketch(&ihvp.vectors);
            (p, s)
        });
        let exact_dir = if method == ScoreMethod::Exact {
            let taps = par_taps(&params, seqs)?;
            let dense = oracle::empirical_curvature(&taps, &layers, cfg.influence.param_cap)?;
            Some(oracle::dense_ihvp(&dense.h, &ref_grad.flatten(), cfg.influence.damping)?)
        } else {
            None
        };
        Ok(Self { params, layers, method, factors, ihvp, sketch, exact_dir })
    }

    pub fn score(&self, tokens: &[Token]) -> CoreResult<f64> {
        match (&self.exact_dir, &self.sketch) {
            (Some(dir), _) => {
                let g = model::tracked_grad(&self.params, tokens, &self.layers)?;
                Ok(math::dot(&g.flatten(), dir))
            }
            (None, Some((p, s))) => {
                let g = model::tracked_grad(&self.params, tokens, &self.layers)?;
                p.sketch(&g).dot(s)
            }
            (None, None) => influence::score_tokens(tokens, &self.ihvp, &self.params),
        }
    }

    pub fn score_ids(&self, cands: &[CandidateInstance], ids: &[InstanceId]) -> CoreResult<Vec<f64>> {
        ids.par_iter()
            .map(|&id| self.score(&cands[id as usize].tokens))
            .collect()
    }
}

fn write_factors(cfg: &RunConfig, ctx: &ScoringContext) -> CliResult<()> {
    formats::write_bytes(
        &out_path(cfg, "factors.bin"),
        &formats::encode_factors(&ctx.factors, &cfg.fingerprint()),
    )
}

// ---------------------------------------------------------------- commands

pub fn cmd_cluster(cfg: &RunConfig) -> CliResult<String> {
    let path = require(&cfg.embeddings, "embeddings")?;
    let corpus = formats::read_embeddings(path, cfg.embeddings_format)?;
    if corpus.count() < cfg.cluster.k {
        return Err(CliError::data(
            path,
            format!("{} embeddings cannot form {} clusters", corpus.count(), cfg.cluster.k),
        ));
    }
    let run = clustering::kmeans_traced(&corpus, &cfg.cluster)?;
    let fp = cfg.fingerprint();
    formats::write_bytes(
        &out_path(cfg, CLUSTERS_FILE),
        &formats::encode_cluster_model(&run.model, &cfg.cluster_fingerprint()),
    )?;
    formats::write_csv(
        &out_path(cfg, "cluster_sizes.csv"),
        &fp,
        "cluster,size",
        run.model.sizes().iter().enumerate().map(|(c, s)| format!("{c},{s}")),
    )?;
    formats::write_csv(
        &out_path(cfg, "kmeans_objective.csv"),
        &fp,
        "iteration,objective",
        run.objectives.iter().enumerate().map(|(i, o)| format!("{},{}", i + 1, fmt_f64(*o))),
    )?;
    Ok(format!(
        "clustered {} instances into {} clusters in {} iterations (objective {:.6e})",
        corpus.count(),
        run.model.k(),
        run.iterations,
        run.objectives.last().copied().unwrap_or(0.0)
    ))
}

pub fn cmd_score(cfg: &RunConfig) -> CliResult<String> {
    let cands = load_candidates(cfg)?;
    let reference = load_reference(cfg)?;
    let ids: Vec<InstanceId> = match &cfg.score_ids {
        Some(p) => {
            let ids = formats::decode_ids(&formats::read_text(p)?, p)?;
            if let Some(bad) = ids.iter().find(|&&i| i as usize >= cands.len()) {
                return Err(CliError::data(p, format!("unknown instance id {bad}")));
            }
            ids
        }
        None => (0..cands.len() as InstanceId).collect(),
    };
    let ctx = ScoringContext::build(cfg, load_params(cfg)?, &reference)?;
    let scores = ctx.score_ids(&cands, &ids)?;
    let table = InfluenceTable {
        rows: ids
            .iter()
            .zip(&scores)
            .map(|(&id, &score)| InfluenceRow { id, score, method: ctx.method })
            .collect(),
    };
    let fp = cfg.fingerprint();
    write_factors(cfg, &ctx)?;
    formats::write_csv(
        &out_path(cfg, "influence.csv"),
        &fp,
        formats::INFLUENCE_HEADER,
        formats::influence_rows(&table),
    )?;
    Ok(format!("scored {} instances ({})", table.len(), ctx.method.name()))
}

pub fn cmd_select(cfg: &RunConfig) -> CliResult<String> {
    let clusters = load_clusters(cfg)?;
    let cands = load_candidates(cfg)?;
    if cands.len() != clusters.count() {
        return Err(CliError::data(
            require(&cfg.tokens, "tokens")?,
            format!("{} token records but the cluster model covers {}", cands.len(), clusters.count()),
        ));
    }
    if cfg.budget > cands.len() {
        return Err(CliError::Usage(format!(
            "bandit.budget={} exceeds the {} candidates",
            cfg.budget,
            cands.len()
        )));
    }
    let fp = cfg.fingerprint();
    let mut scored: BTreeMap<InstanceId, f64> = BTreeMap::new();
    let sel = if cfg.budget == 0 {
        None
    } else {
        let reference = load_reference(cfg)?;
        let ctx = ScoringContext::build(cfg, load_params(cfg)?, &reference)?;
        write_factors(cfg, &ctx)?;
        let mut scorer = |ids: &[InstanceId]| -> CoreResult<Vec<f64>> {
            let s = ctx.score_ids(&cands, ids)?;
            scored.extend(ids.iter().copied().zip(s.iter().copied()));
            Ok(s)
        };
        Some((bandit::run(&cfg.bandit, &clusters, &mut scorer, cfg.budget)?, ctx.method))
    };
    let (ledger, method) = match &sel {
        Some((s, m)) => (s.ledger.clone(), *m),
        None => (
            bandit::run(&cfg.bandit, &clusters, &mut |_: &[InstanceId]| Ok(Vec::new()), 0)?.ledger,
            cfg.influence.method,
        ),
    };
    formats::write_bytes(
        &out_path(cfg, SELECTION_FILE),
        formats::with_fingerprint(&fp, &formats::encode_ids(&ledger.selected)).as_bytes(),
    )?;
    formats::write_bytes(&out_path(cfg, LEDGER_FILE), formats::encode_ledger(&ledger, &fp).as_bytes())?;
    let table = InfluenceTable {
        rows: scored
            .iter()
            .map(|(&id, &score)| InfluenceRow { id, score, method })
            .collect(),
    };
    formats::write_csv(
        &out_path(cfg, "scored.csv"),
        &fp,
        formats::INFLUENCE_HEADER,
        formats::influence_rows(&table),
    )?;
    let mut msg = format!(
        "selected {} of {} instances in {} iterations, scoring {}",
        ledger.selected.len(),
        cands.len(),
        ledger.iterations(),
        scored.len()
    );
    if ledger.truncated {
        msg.push_str(&format!(" (truncated: {:?})", ledger.stop));
    }
    Ok(msg)
}

fn random_spd(n: usize, r: &mut rng::DetRng) -> Mat {
    let a = Mat::from_fn(n, n, |_, _| rng::normal(r));
    let mut s = a.matmul(&a.transpose());
    s.scale(1.0 / n as f64);
    for i in 0..n {
        s[(i, i)] += 0.5;
    }
    s
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub const KRON_TOL: f64 = 1e-10;
pub const FD_TOL: f64 = 1e-6;
pub const TAP_TOL: f64 = 1e-12;
pub const JOINT_EQ_TOL: f64 = 1e-6;

/// Kronecker iHVP against a dense solve: `(trial, d_out, d_in, λ, rel_err)`.
pub fn kron_identity_suite(trials: usize, seed: u64) -> CliResult<Vec<(usize, usize, usize, f64, f64)>> {
    let mut r = rng::seeded(seed, 0x4b52);
    let mut rows = Vec::new();
    for trial in 0..trials {
        let d_out = 1 + trial % 8;
        let d_in = 1 + (trial * 5 + 3) % 8;
        let delta = random_spd(d_out, &mut r);
        let x = random_spd(d_in, &mut r);
        let v: Vec<f64> = (0..d_out * d_in).map(|_| rng::normal(&mut r)).collect();
        let inv = DampedFactorInverse::from_matrices(0, TapKind::MlpUp, &delta, &x, 0.0)?;
        for lambda in [0.0, 1e-3, 1e-1] {
            let mut dense = delta.kron(&x);
            for i in 0..dense.rows() {
                dense[(i, i)] += lambda;
            }
            let want = lu_solve(&dense, &v)?;
            let got = inv.with_damping(lambda)?.kron_ihvp(&v)?;
            rows.push((trial, d_out, d_in, lambda, rel_err(&got, &want)));
        }
    }
    Ok(rows)
}

/// Central differences on a deterministic subset of coordinates, plus the
/// tap-reconstruction error: `(fd_rel_err, coords, tap_rel_err)`.
pub fn gradient_check(params: &ParamSet, tokens: &[Token], coords: usize, seed: u64) -> CliResult<(f64, usize, f64)> {
    let (_, bw) = model::loss_and_grad(params, tokens)?;
    let analytic = bw.grads.flatten();
    let n = analytic.len();
    let idx: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        let mut v = rand::seq::index::sample(&mut rng::seeded(seed, 0xfd), n, coords).into_vec();
        v.sort_unstable();
        v
    };
    let h = 1e-5;
    let numeric: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mut p = params.clone();
            let x0 = *p.flat_mut(i);
            *p.flat_mut(i) = x0 + h;
            let up = model::loss(&p, tokens)?;
            *p.flat_mut(i) = x0 - h;
            let down = model::loss(&p, tokens)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<CoreResult<_>>()?;
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let fd = rel_err(&picked, &numeric);

    let mut tap_err: f64 = 0.0;
    for tap in &bw.taps {
        let layers = [TrackedLayer { layer: tap.layer, kind: tap.kind }];
        let g = bw.grads.layer_vectors(&layers);
        tap_err = tap_err.max(rel_err(&tap.weight_gradient(), &g.data[0]));
    }
    Ok((fd, idx.len(), tap_err))
}

pub fn cmd_oracle_check(cfg: &RunConfig) -> CliResult<String> {
    let fp = cfg.fingerprint();
    let o = &cfg.oracle;
    let mut summary: Vec<(String, f64, String, bool)> = Vec::new();

    let kron = kron_identity_suite(o.kron_trials, o.seed)?;
    let worst = kron.iter().map(|r| r.4).fold(0.0, f64::max);
    formats::write_csv(
        &out_path(cfg, "kron_identity.csv"),
        &fp,
        "trial,d_out,d_in,lambda,rel_err",
        kron.iter().map(|(t, a, b, l, e)| format!("{t},{a},{b},{},{}", fmt_f64(*l), fmt_f64(*e))),
    )?;
    summary.push(("kron-ihvp-max-rel-err".into(), worst, format!("<= {KRON_TOL:e}"), worst <= KRON_TOL));

    let params = load_params(cfg)?;
    let reference = match &cfg.reference {
        Some(_) => Some(load_reference(cfg)?),
        None => None,
    };
    let probe: Vec<Token> = match &reference {
        Some(r) => r.sequences()[0].clone(),
        None => {
            let mut r = rng::seeded(o.seed, 0x70);
            let len = cfg.model.max_context.min(16);
            (0..len)
                .map(|_| rand::Rng::random_range(&mut r, 0..cfg.model.vocab_size as Token))
                .collect()
        }
    };
    let (fd, coords, tap) = gradient_check(&params, &probe, o.fd_coords, o.seed)?;
    formats::write_csv(
        &out_path(cfg, "gradient_check.csv"),
        &fp,
        "check,count,rel_err",
        [
            format!("finite-difference,{coords},{}", fmt_f64(fd)),
            format!("tap-reconstruction,{},{}", model::tracked_layers(&cfg.model, QkvMode::Independent).len(), fmt_f64(tap)),
        ],
    )?;
    summary.push(("finite-difference-rel-err".into(), fd, format!("<= {FD_TOL:e}"), fd <= FD_TOL));
    summary.push(("tap-reconstruction-rel-err".into(), tap, format!("<= {TAP_TOL:e}"), tap <= TAP_TOL));

    let n = o.candidates.max(oracle::MIN_CANDIDATES);
    let scenario = |sc, seed: u64| -> CliResult<oracle::ComparisonReport> {
        let cand = oracle::qkv_scenario_taps(sc, 4, 4, n, seed);
        let refs = oracle::qkv_scenario_taps(sc, 4, 4, 20, seed + 1);
        let curv = oracle::qkv_scenario_taps(sc, 4, 8, 1000, seed + 2);
        Ok(oracle::compare_methods_on_taps(&cand, &refs, &curv, cfg.influence.damping, None, cfg.influence.param_cap)?)
    };
    let unc = scenario(QkvScenario::Uncorrelated, o.seed * 10 + 1)?;
    let j = unc.scores_of(oracle::METHOD_JOINT).unwrap_or(&[]);
    let i = unc.scores_of(oracle::METHOD_INDEPENDENT).unwrap_or(&[]);
    let eq = rel_err(j, i);
    summary.push(("uncorrelated-joint-vs-independent".into(), eq, format!("<= {JOINT_EQ_TOL:e}"), eq <= JOINT_EQ_TOL));
    formats::write_csv(
        &out_path(cfg, "methods_uncorrelated.csv"),
        &fp,
        formats::COMPARISON_HEADER,
        formats::comparison_rows(&unc.rows),
    )?;
    let cor = scenario(QkvScenario::Correlated { rho: 1.0, noise: 0.05 }, o.seed * 10 + 5)?;
    let p = |m| cor.get(m).map_or(f64::NAN, |r| r.pearson);
    let (pj, pi, pn) = (p(oracle::METHOD_JOINT), p(oracle::METHOD_INDEPENDENT), p(oracle::METHOD_NO_HESSIAN));
    summary.push(("correlated-joint-minus-independent".into(), pj - pi, "> 0".into(), pj > pi));
    summary.push(("correlated-independent-minus-no-hessian".into(), pi - pn, "> 0".into(), pi > pn));
    formats::write_csv(
        &out_path(cfg, "methods_correlated.csv"),
        &fp,
        formats::COMPARISON_HEADER,
        formats::comparison_rows(&cor.rows),
    )?;

    // Model-level comparison when the tracked block is small enough to densify.
    let tracked_params: usize = model::tracked_layers(&cfg.model, QkvMode::Joint)
        .iter()
        .map(|l| {
            let (a, b) = cfg.model.kind_shape(l.kind);
            a * b
        })
        .sum();
    if let (Some(reference), Some(_)) = (&reference, &cfg.tokens) {
        if tracked_params <= cfg.influence.param_cap {
            let cands = load_candidates(cfg)?;
            let take: Vec<Vec<Token>> = cands.iter().take(n).map(|c| c.tokens.clone()).collect();
            if take.len() >= oracle::MIN_CANDIDATES {
                let rep = oracle::compare_methods(
                    &params,
                    &take,
                    reference.sequences(),
                    cfg.influence.damping,
                    oracle::CurvatureDefinition::EmpiricalGradient,
                    cfg.influence.param_cap,
                )?;
                formats::write_csv(
                    &out_path(cfg, "methods_model.csv"),
                    &fp,
                    formats::COMPARISON_HEADER,
                    formats::comparison_rows(&rep.rows),
                )?;
            }
        }
    }

    formats::write_csv(
        &out_path(cfg, "oracle_summary.csv"),
        &fp,
        "check,value,tolerance,pass",
        summary.iter().map(|(c, v, t, p)| format!("{c},{},{t},{p}", fmt_f64(*v))),
    )?;
    let failed: Vec<&str> = summary.iter().filter(|s| !s.3).map(|s| s.0.as_str()).collect();
    if failed.is_empty() {
        Ok(format!("{} oracle checks passed", summary.len()))
    } else {
        Err(CliError::Numeric(format!("failed: {}", failed.join(", "))))
    }
}

/// Arm means for the simulation: evenly spaced, with a clear winner last.
pub fn simulation_means(arms: usize) -> Vec<f64> {
    (0..arms)
        .map(|i| if i + 1 == arms { 0.05 * (arms - 1) as f64 + 0.5 } else { 0.05 * i as f64 })
        .collect()
}

pub fn cmd_simulate_bandit(cfg: &RunConfig) -> CliResult<String> {
    let s = &cfg.simulate;
    let means = simulation_means(s.arms);
    let best = s.arms - 1;
    let policies = [Policy::Ucb { alpha: s.alpha }, Policy::Greedy, Policy::Random];
    let fp = cfg.fingerprint();
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for policy in policies {
        let traces: Vec<bandit::SimulationTrace> = (0..s.trials as u64)
            .into_par_iter()
            .map(|t| bandit::simulate(policy, &means, s.sigma, s.steps, rng::mix(s.seed, t)))
            .collect::<CoreResult<_>>()?;
        let mut mean_cum = vec![0.0; s.steps];
        let mut mean_step = vec![0.0; s.steps];
        for tr in &traces {
            for (k, c) in tr.cumulative_regret().iter().enumerate() {
                mean_cum[k] += c / s.trials as f64;
                mean_step[k] += tr.regret[k] / s.trials as f64;
            }
        }
        for k in 0..s.steps {
            curves.push(format!(
                "{},{},{},{}",
                policy.name(),
                k + 1,
                fmt_f64(mean_step[k]),
                fmt_f64(mean_cum[k])
            ));
        }
        let best_most = traces.iter().filter(|t| t.most_pulled() == best).count();
        let w = (s.steps / 10).max(1);
        let falling = traces
            .iter()
            .filter(|t| t.mean_regret(s.steps - w..s.steps) < t.mean_regret(0..w))
            .count();
        summary.push(format!(
            "{},{},{best_most},{falling},{}",
            policy.name(),
            s.trials,
            fmt_f64(mean_cum[s.steps - 1])
        ));
    }
    formats::write_csv(
        &out_path(cfg, "regret.csv"),
        &fp,
        "policy,step,mean_regret,mean_cumulative_regret",
        curves,
    )?;
    formats::write_csv(
        &out_path(cfg, "simulation_summary.csv"),
        &fp,
        "policy,trials,best_arm_most_pulled,regret_decreased,final_cumulative_regret",
        summary.clone(),
    )?;
    Ok(format!("simulated {} policies × {} trials", policies.len(), s.trials))
}

pub fn cmd_report(cfg: &RunConfig) -> CliResult<String> {
    let clusters = load_clusters(cfg)?;
    let ledger_path = out_path(cfg, LEDGER_FILE);
    if !ledger_path.exists() {
        return Err(CliError::MissingArtifact { path: ledger_path, producer: "select" });
    }
    let iters = formats::decode_ledger(&formats::read_text(&ledger_path)?, &ledger_path)?;
    let sel_path = out_path(cfg, SELECTION_FILE);
    if !sel_path.exists() {
        return Err(CliError::MissingArtifact { path: sel_path, producer: "select" });
    }
    let selected = formats::decode_ids(&formats::read_text(&sel_path)?, &sel_path)?;
    let fp = cfg.fingerprint();

    let k = clusters.k();
    let mut pulls = vec![0u64; k];
    let mut reward = vec![0.0; k];
    let mut chosen = vec![0usize; k];
    let mut trajectory = Vec::new();
    for it in &iters {
        for p in &it.pulls {
            pulls[p.cluster] += 1;
            reward[p.cluster] += p.reward;
            trajectory.push(format!(
                "{},{},{}",
                it.iteration,
                p.cluster,
                fmt_f64(reward[p.cluster] / pulls[p.cluster] as f64)
            ));
        }
        for s in &it.selections {
            chosen[s.cluster] += s.ids.len();
        }
    }
    if chosen.iter().sum::<usize>() != selected.len() {
        return Err(CliError::data(&ledger_path, "ledger selections disagree with the selection file"));
    }
    let sizes = clusters.sizes();
    formats::write_csv(
        &out_path(cfg, "composition.csv"),
        &fp,
        "cluster,size,pulls,mean_reward,selected",
        (0..k).map(|c| {
            let m = if pulls[c] > 0 { reward[c] / pulls[c] as f64 } else { 0.0 };
            format!("{c},{},{},{},{}", sizes[c], pulls[c], fmt_f64(m), chosen[c])
        }),
    )?;
    formats::write_csv(
        &out_path(cfg, "reward_trajectory.csv"),
        &fp,
        "iteration,cluster,mean_reward",
        trajectory,
    )?;

    let mut losses = Vec::new();
    if let (Some(_), Some(_)) = (&cfg.tokens, &cfg.reference) {
        let cands = load_candidates(cfg)?;
        let reference = load_reference(cfg)?;
        let base = load_params(cfg)?;
        losses.push(format!("base,{},0", fmt_f64(par_eval_loss(&base, reference.sequences())?)));
        if !selected.is_empty() {
            let pick = |ids: &[InstanceId]| -> Vec<Vec<Token>> {
                ids.iter().map(|&i| cands[i as usize].tokens.clone()).collect()
            };
            let rand_ids = bandit::random_selection(cands.len(), selected.len(), cfg.report_random_seed)?;
            for (name, ids) in [("quad", &selected), ("random", &rand_ids)] {
                let out = par_train(&base, &pick(ids), &cfg.train)?;
                formats::write_csv(
                    &out_path(cfg, &format!("training_curve_{name}.csv")),
                    &fp,
                    "step,loss",
                    out.curve.iter().map(|(s, l)| format!("{s},{}", fmt_f64(*l))),
                )?;
                let loss = par_eval_loss(&out.params, reference.sequences())?;
                losses.push(format!("{name},{},{}", fmt_f64(loss), ids.len()));
            }
        }
        formats::write_csv(&out_path(cfg, "loss_table.csv"), &fp, "method,reference_loss,selected", losses.clone())?;
    }
    Ok(format!(
        "report over {} iterations, {} selected across {} clusters{}",
        iters.len(),
        selected.len(),
        chosen.iter().filter(|&&c| c > 0).count(),
        if losses.is_empty() { "" } else { "; loss table written" }
    ))
}
