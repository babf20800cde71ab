//! Clusters as bandit arms: UCB cluster scores, batch pulls that turn sampled
//! influence into rewards, and thresholded proportional selection.
//!
//! One iteration pulls the `top_k` arms with the highest score
//! `Ī_i + α √(2 ln ΣT / T_i)`, scores a batch from each, adds the batch reward
//! to `R_i` and one to `T_i`, and then moves a `γ` fraction of the remaining
//! members of every cluster whose mean reward clears `τ` into the selection.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::clustering::ClusterModel;
use crate::corpus::InstanceId;
use crate::rng;
use crate::{math, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.002;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.0025;

/// What the selection threshold `τ` is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// A cluster qualifies when its running mean reward exceeds `τ`.
    ClusterMean,
    /// Instances drawn from this iteration's pulled clusters qualify individually.
    PerInstance,
}

/// How a pulled batch becomes a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// Sum of the batch's influence scores.
    Sum,
    /// Mean of the batch's influence scores.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditConfig {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub batch_size: usize,
    pub threshold_mode: ThresholdMode,
    pub reward_mode: RewardMode,
    pub seed: u64,
    /// Safety stop; a run that hits it is marked truncated.
    pub max_iterations: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            gamma: DEFAULT_GAMMA,
            top_k: 4,
            batch_size: 32,
            threshold_mode: ThresholdMode::ClusterMean,
            reward_mode: RewardMode::Sum,
            seed: 0,
            max_iterations: 100_000,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument("gamma must lie in (0, 1]".into()));
        }
        if !(self.alpha >= 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument("alpha must be ≥ 0 and tau finite".into()));
        }
        if self.top_k == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("top_k and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-arm cumulative reward `R`, pull count `T`, and retirement flag.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    pub config: BanditConfig,
    reward: Vec<f64>,
    pulls: Vec<u64>,
    retired: Vec<bool>,
}

impl BanditState {
    pub fn new(arms: usize, config: BanditConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            reward: vec![0.0; arms],
            pulls: vec![0; arms],
            retired: vec![false; arms],
        })
    }

    pub fn arms(&self) -> usize {
        self.reward.len()
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.reward[i]
    }

    pub fn pulls(&self, i: usize) -> u64 {
        self.pulls[i]
    }

    pub fn total_pulls(&self) -> u64 {
        self.pulls.iter().sum()
    }

    pub fn is_retired(&self, i: usize) -> bool {
        self.retired[i]
    }

    pub fn retire(&mut self, i: usize) {
        self.retired[i] = true;
    }

    /// `Ī_i = R_i / T_i`, undefined before the first pull.
    pub fn mean_reward(&self, i: usize) -> Option<f64> {
        (self.pulls[i] > 0).then(|| self.reward[i] / self.pulls[i] as f64)
    }

    /// Records one pull of arm `i`.
    pub fn update(&mut self, i: usize, reward: f64) {
        self.reward[i] += reward;
        self.pulls[i] += 1;
    }

    /// `Ī_i + α √(2 ln ΣT / T_i)`; `+∞` for unpulled arms, `−∞` for retired ones.
    pub fn cluster_score(&self, i: usize) -> f64 {
        if self.retired[i] {
            return f64::NEG_INFINITY;
        }
        let t_i = self.pulls[i];
        if t_i == 0 {
            return f64::INFINITY;
        }
        let total = self.total_pulls() as f64;
        let mean = self.reward[i] / t_i as f64;
        mean + self.config.alpha * math::sqrt(2.0 * math::ln(total) / t_i as f64)
    }

    /// Up to `n` active arms, highest score first, ties to the lower index.
    pub fn top_arms(&self, n: usize) -> Vec<usize> {
        let mut arms: Vec<(usize, f64)> = (0..self.arms())
            .filter(|&i| !self.retired[i])
            .map(|i| (i, self.cluster_score(i)))
            .collect();
        arms.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        arms.into_iter().take(n).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PullRecord {
    pub cluster: usize,
    pub sampled: Vec<InstanceId>,
    /// Sum of the batch's influence scores (before any mean-reward scaling).
    pub batch_sum: f64,
    /// Reward credited to the arm.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub cluster: usize,
    pub ids: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub pulls: Vec<PullRecord>,
    pub selections: Vec<SelectionRecord>,
    /// Arms retired at the start of this iteration (no unselected members).
    pub retired: Vec<usize>,
    /// Pull slots left empty because fewer than `top_k` arms were active.
    pub skipped_pulls: usize,
    pub selected_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BudgetReached,
    AllArmsRetired,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLedger {
    pub records: Vec<IterationRecord>,
    /// Selected ids in selection order.
    pub selected: Vec<InstanceId>,
    pub truncated: bool,
    pub stop: StopReason,
}

impl SelectionLedger {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            selected: Vec::new(),
            truncated: false,
            stop: StopReason::BudgetReached,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Selected count per cluster.
    pub fn composition(&self, k: usize) -> Vec<usize> {
        let mut out = vec![0; k];
        for r in &self.records {
            for s in &r.selections {
                out[s.cluster] += s.ids.len();
            }
        }
        out
    }
}

/// Influence callback: scores a batch of instance ids, one score per id, in order.
pub trait BatchScorer {
    fn score(&mut self, ids: &[InstanceId]) -> Result<Vec<f64>>;
}

impl<F> BatchScorer for F
where
    F: FnMut(&[InstanceId]) -> Result<Vec<f64>>,
{
    fn score(&mut self, ids: &[InstanceId]) -> Result<Vec<f64>> {
        self(ids)
    }
}

/// Mutable run state shared by the steps: arm statistics, selection mask,
/// and a memo so that every instance is scored at most once per run.
#[derive(Debug, Clone)]
pub struct Selection {
    pub state: BanditState,
    selected_mask: Vec<bool>,
    remaining: Vec<usize>,
    memo: BTreeMap<InstanceId, f64>,
    pub ledger: SelectionLedger,
}

impl Selection {
    pub fn new(model: &ClusterModel, config: BanditConfig) -> Result<Self> {
        Ok(Self {
            state: BanditState::new(model.k(), config)?,
            selected_mask: vec![false; model.count()],
            remaining: model.sizes(),
            memo: BTreeMap::new(),
            ledger: SelectionLedger::new(),
        })
    }

    pub fn selected_count(&self) -> usize {
        self.ledger.selected.len()
    }

    pub fn is_selected(&self, id: InstanceId) -> bool {
        self.selected_mask[id as usize]
    }

    fn unselected(&self, model: &ClusterModel, c: usize) -> Vec<InstanceId> {
        model
            .members(c)
            .iter()
            .copied()
            .filter(|&id| !self.selected_mask[id as usize])
            .collect()
    }

    fn scores_for(&mut self, ids: &[InstanceId], scorer: &mut dyn BatchScorer) -> Result<Vec<f64>> {
        let mut fresh: Vec<InstanceId> = ids
            .iter()
            .copied()
            .filter(|id| !self.memo.contains_key(id))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        if !fresh.is_empty() {
            let scores = scorer.score(&fresh)?;
            if scores.len() != fresh.len() {
                return Err(Error::DimensionMismatch {
                    context: "scorer output",
                    expected: fresh.len(),
                    actual: scores.len(),
                });
            }
            for (id, s) in fresh.into_iter().zip(scores) {
                if !s.is_finite() {
                    return Err(Error::NonFinite { row: id as usize });
                }
                self.memo.insert(id, s);
            }
        }
        Ok(ids.iter().map(|id| self.memo[id]).collect())
    }

    /// Score of an instance if it has been scored in this run.
    pub fn known_score(&self, id: InstanceId) -> Option<f64> {
        self.memo.get(&id).copied()
    }

    fn mark_selected(&mut self, model: &ClusterModel, ids: &[InstanceId]) {
        for &id in ids {
            debug_assert!(!self.selected_mask[id as usize]);
            self.selected_mask[id as usize] = true;
            self.remaining[model.cluster_of(id)] -= 1;
            self.ledger.selected.push(id);
        }
    }

    /// Pulls the `top_k` arms: samples a batch of up to `m` unselected members
    /// from each, scores them, and credits the rewards.
    pub fn pull_and_update(
        &mut self,
        model: &ClusterModel,
        scorer: &mut dyn BatchScorer,
        iteration: usize,
    ) -> Result<IterationRecord> {
        let cfg = self.state.config.clone();
        if cfg.top_k > model.k() {
            return Err(Error::InvalidArgument(alloc::format!(
                "top_k={} exceeds the number of clusters {}",
                cfg.top_k,
                model.k()
            )));
        }
        let mut retired = Vec::new();
        for c in 0..model.k() {
            if !self.state.is_retired(c) && self.remaining[c] == 0 {
                self.state.retire(c);
                retired.push(c);
            }
        }
        let arms = self.state.top_arms(cfg.top_k);
        let skipped_pulls = cfg.top_k - arms.len();

        let mut batches = Vec::with_capacity(arms.len());
        for &c in &arms {
            let pool = self.unselected(model, c);
            let n = cfg.batch_size.min(pool.len());
            let mut r = rng::seeded(cfg.seed, rng::mix(iteration as u64, c as u64));
            let sampled: Vec<InstanceId> = index::sample(&mut r, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            batches.push((c, sampled));
        }
        let all: Vec<InstanceId> = batches.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let scores = self.scores_for(&all, scorer)?;

        let mut pulls = Vec::with_capacity(batches.len());
        let mut offset = 0;
        for (c, sampled) in batches {
            let batch = &scores[offset..offset + sampled.len()];
            offset += sampled.len();
            let batch_sum: f64 = batch.iter().sum();
            let reward = match cfg.reward_mode {
                RewardMode::Sum => batch_sum,
                RewardMode::Mean => batch_sum / sampled.len() as f64,
            };
            self.state.update(c, reward);
            pulls.push(PullRecord {
                cluster: c,
                sampled,
                batch_sum,
                reward,
            });
        }
        Ok(IterationRecord {
            iteration,
            pulls,
            selections: Vec::new(),
            retired,
            skipped_pulls,
            selected_total: self.selected_count(),
        })
    }

    /// Moves a `γ` fraction (rounded down, at least one) of each qualifying
    /// cluster's unselected members into the selection, never exceeding `budget`.
    pub fn select_step(
        &mut self,
        model: &ClusterModel,
        scorer: &mut dyn BatchScorer,
        record: &mut IterationRecord,
        budget: usize,
    ) -> Result<()> {
        let cfg = self.state.config.clone();
        let it = record.iteration as u64;
        let mut proposals: Vec<(usize, Vec<InstanceId>)> = Vec::new();
        let candidates: Vec<usize> = match cfg.threshold_mode {
            ThresholdMode::ClusterMean => (0..model.k())
                .filter(|&c| self.state.mean_reward(c).is_some_and(|m| m > cfg.tau))
                .collect(),
            ThresholdMode::PerInstance => record.pulls.iter().map(|p| p.cluster).collect(),
        };
        for c in candidates {
            let pool = self.unselected(model, c);
            if pool.is_empty() {
                continue;
            }
            let n = ((cfg.gamma * pool.len() as f64) as usize).max(1);
            let mut r = rng::seeded(cfg.seed ^ 0x5e1e_c7ed, rng::mix(it, c as u64));
            let mut picked: Vec<InstanceId> = index::sample(&mut r, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            if cfg.threshold_mode == ThresholdMode::PerInstance {
                let scores = self.scores_for(&picked, scorer)?;
                picked = picked
                    .into_iter()
                    .zip(scores)
                    .filter(|&(_, s)| s > cfg.tau)
                    .map(|(id, _)| id)
                    .collect();
            }
            if !picked.is_empty() {
                proposals.push((c, picked));
            }
        }

        let room = budget.saturating_sub(self.selected_count());
        let total: usize = proposals.iter().map(|(_, p)| p.len()).sum();
        if total > room {
            // Keep a uniform subset of all proposals, preserving their order.
            let mut r = rng::seeded(cfg.seed ^ 0xb0d9_e7, it);
            let mut keep = vec![false; total];
            for i in index::sample(&mut r, total, room) {
                keep[i] = true;
            }
            let mut flat = 0;
            for (_, ids) in &mut proposals {
                ids.retain(|_| {
                    let k = keep[flat];
                    flat += 1;
                    k
                });
            }
            proposals.retain(|(_, ids)| !ids.is_empty());
        }
        for (c, ids) in proposals {
            self.mark_selected(model, &ids);
            record.selections.push(SelectionRecord { cluster: c, ids });
        }
        record.selected_total = self.selected_count();
        Ok(())
    }
}

/// Alternates pulls and selection steps until `budget` instances are
/// selected, every arm is retired, or the iteration limit is hit.
pub fn run(
    config: &BanditConfig,
    model: &ClusterModel,
    scorer: &mut dyn BatchScorer,
    budget: usize,
) -> Result<Selection> {
    if budget > model.count() {
        return Err(Error::InvalidArgument(alloc::format!(
            "budget {budget} exceeds corpus count {}",
            model.count()
        )));
    }
    let mut sel = Selection::new(model, config.clone())?;
    let mut iteration = 0;
    while sel.selected_count() < budget {
        if iteration >= config.max_iterations {
            sel.ledger.truncated = true;
            sel.ledger.stop = StopReason::IterationLimit;
            break;
        }
        let mut record = sel.pull_and_update(model, scorer, iteration)?;
        if record.pulls.is_empty() {
            sel.ledger.truncated = true;
            sel.ledger.stop = StopReason::AllArmsRetired;
            sel.ledger.records.push(record);
            break;
        }
        sel.select_step(model, scorer, &mut record, budget)?;
        sel.ledger.records.push(record);
        iteration += 1;
    }
    Ok(sel)
}

/// Baseline that ignores diversity: probe every cluster once with a batch of
/// `probe_size`, rank clusters by mean probe score, and fill the budget from
/// the best clusters in rank order.
pub fn top_k_clusters_selection(
    model: &ClusterModel,
    scorer: &mut dyn BatchScorer,
    probe_size: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<InstanceId>> {
    if budget > model.count() {
        return Err(Error::InvalidArgument("budget exceeds corpus count".into()));
    }
    let mut means = Vec::with_capacity(model.k());
    for c in 0..model.k() {
        let members = model.members(c);
        if members.is_empty() {
            means.push((c, f64::NEG_INFINITY));
            continue;
        }
        let mut r = rng::seeded(seed, c as u64);
        let n = probe_size.min(members.len());
        let ids: Vec<InstanceId> = index::sample(&mut r, members.len(), n)
            .into_iter()
            .map(|i| members[i])
            .collect();
        let s = scorer.score(&ids)?;
        means.push((c, s.iter().sum::<f64>() / n as f64));
    }
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(budget);
    for (c, _) in means {
        if out.len() >= budget {
            break;
        }
        let members = model.members(c);
        let take = (budget - out.len()).min(members.len());
        let mut r = rng::seeded(seed ^ 0x70_9c, c as u64);
        out.extend(
            index::sample(&mut r, members.len(), take)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    Ok(out)
}

/// Uniform random subset of `0..count`.
pub fn random_selection(count: usize, budget: usize, seed: u64) -> Result<Vec<InstanceId>> {
    if budget > count {
        return Err(Error::InvalidArgument("budget exceeds corpus count".into()));
    }
    let mut r = rng::seeded(seed, 0x7a4d);
    Ok(index::sample(&mut r, count, budget)
        .into_iter()
        .map(|i| i as InstanceId)
        .collect())
}

/// Arm-choice policy for the stochastic-bandit simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// The cluster score with exploration weight `alpha`.
    Ucb { alpha: f64 },
    /// Pull every arm once, then always the best empirical mean (`alpha = 0`).
    Greedy,
    Random,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Ucb { .. } => "ucb",
            Policy::Greedy => "top-k-clusters",
            Policy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub pulls: Vec<u64>,
    /// Per-step pseudo-regret `μ* − μ_{a_t}`.
    pub regret: Vec<f64>,
}

impl SimulationTrace {
    pub fn cumulative_regret(&self) -> Vec<f64> {
        self.regret
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }

    pub fn mean_regret(&self, range: core::ops::Range<usize>) -> f64 {
        let n = range.len() as f64;
        self.regret[range].iter().sum::<f64>() / n
    }

    pub fn most_pulled(&self) -> usize {
        (0..self.pulls.len())
            .max_by(|&a, &b| self.pulls[a].cmp(&self.pulls[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

/// Gaussian-reward bandit with one pull per step, driven through [`BanditState`].
pub fn simulate(
    policy: Policy,
    means: &[f64],
    sigma: f64,
    steps: usize,
    seed: u64,
) -> Result<SimulationTrace> {
    if means.is_empty() {
        return Err(Error::InvalidArgument("simulation needs at least one arm".into()));
    }
    let alpha = match policy {
        Policy::Ucb { alpha } => alpha,
        _ => 0.0,
    };
    let mut state = BanditState::new(
        means.len(),
        BanditConfig {
            alpha,
            top_k: 1,
            batch_size: 1,
            ..BanditConfig::default()
        },
    )?;
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut reward_rng = rng::seeded(seed, 1);
    let mut choice_rng = rng::seeded(seed, 2);
    let mut regret = Vec::with_capacity(steps);
    for _ in 0..steps {
        let arm = match policy {
            Policy::Random => choice_rng.random_range(0..means.len()),
            _ => state.top_arms(1)[0],
        };
        let r = means[arm] + sigma * rng::normal(&mut reward_rng);
        state.update(arm, r);
        regret.push(best - means[arm]);
    }
    Ok(SimulationTrace {
        pulls: (0..means.len()).map(|i| state.pulls(i)).collect(),
        regret,
    })
}
