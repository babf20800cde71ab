//! Adam fine-tuning over a token-sequence set, and reference-set evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::corpus::Token;
use crate::model::{self, ParamSet};
use crate::{math, rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Abort when a batch loss exceeds this multiple of the first batch loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            steps: 500,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::InvalidArgument("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

/// Per-coordinate Adam state over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update of `x` in place.
    pub fn step(&mut self, cfg: &TrainConfig, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - math::powf(cfg.beta1, self.t as f64);
        let b2t = 1.0 - math::powf(cfg.beta2, self.t as f64);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            x[i] -= cfg.lr * mh / (math::sqrt(vh) + cfg.eps);
        }
    }
}

/// Mean loss and mean gradient over a batch of sequences.
pub fn batch_loss_and_grad(params: &ParamSet, batch: &[&[Token]]) -> Result<(f64, ParamSet)> {
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for seq in batch {
        let (l, bw) = model::loss_and_grad(params, seq)?;
        loss += l;
        grad.axpy(1.0, &bw.grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// `(step, batch loss)` before each update.
    pub curve: Vec<(usize, f64)>,
}

/// Batch order: a fresh seeded permutation per epoch, consumed in order.
pub fn batch_schedule(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng::seeded(cfg.seed, epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        out.push(batch);
    }
    out
}

/// Trains with the sequential batch gradient.
pub fn train(init: &ParamSet, data: &[Vec<Token>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(init, data, cfg, batch_loss_and_grad)
}

/// Trains with a caller-supplied batch gradient (e.g. a parallel one).
pub fn train_with<G>(
    init: &ParamSet,
    data: &[Vec<Token>],
    cfg: &TrainConfig,
    mut grad_fn: G,
) -> Result<TrainOutcome>
where
    G: FnMut(&ParamSet, &[&[Token]]) -> Result<(f64, ParamSet)>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut params = init.clone();
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for (step, idx) in batch_schedule(data.len(), cfg).into_iter().enumerate() {
        let batch: Vec<&[Token]> = idx.iter().map(|&i| data[i].as_slice()).collect();
        let (loss, grad) = grad_fn(&params, &batch)?;
        let first = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * first {
            return Err(Error::Diverged {
                step,
                loss,
                initial: first,
            });
        }
        curve.push((step, loss));
        adam.step(cfg, &mut flat, &grad.flatten());
        params.set_flat(&flat);
    }
    Ok(TrainOutcome { params, curve })
}

/// Mean per-sequence loss over `set`.
pub fn eval_loss(params: &ParamSet, set: &[Vec<Token>]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for s in set {
        total += model::loss(params, s)?;
    }
    Ok(total / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 16,
            mlp_ratio: 2.0,
            rope_base: 10_000.0,
            gated_mlp: false,
        }
    }

    fn data() -> Vec<Vec<Token>> {
        (0..6)
            .map(|s| (0..10).map(|i| ((i + s) % 8) as Token).collect())
            .collect()
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let p = ParamSet::init(&cfg(), 1).unwrap();
        let tc = TrainConfig { lr: 0.0, steps: 5, batch_size: 2, ..Default::default() };
        let out = train(&p, &data(), &tc).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.curve.len(), 5);
    }

    #[test]
    fn overfits_small_set() {
        let p = ParamSet::init(&cfg(), 2).unwrap();
        let d = data();
        let before = eval_loss(&p, &d).unwrap();
        let tc = TrainConfig { lr: 1e-2, steps: 200, batch_size: 4, ..Default::default() };
        let out = train(&p, &d, &tc).unwrap();
        let after = eval_loss(&out.params, &d).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn deterministic() {
        let p = ParamSet::init(&cfg(), 3).unwrap();
        let tc = TrainConfig { lr: 1e-2, steps: 10, batch_size: 3, seed: 5, ..Default::default() };
        let a = train(&p, &data(), &tc).unwrap();
        let b = train(&p, &data(), &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_scalar_step() {
        let tc = TrainConfig { lr: 0.1, ..Default::default() };
        let mut adam = Adam::new(1);
        let mut x = [1.0];
        adam.step(&tc, &mut x, &[0.5]);
        // First bias-corrected step moves by lr·g/(|g| + eps).
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-12);
        adam.step(&tc, &mut x, &[-0.25]);
        let m = (0.9 * 0.05 + 0.1 * -0.25) / (1.0 - 0.81);
        let v = (0.95 * 0.05 * 0.25 + 0.05 * 0.0625) / (1.0 - 0.9025);
        let expected2 = expected - 0.1 * m / (libm::sqrt(v) + 1e-8);
        assert!((x[0] - expected2).abs() < 1e-12);
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let tc = TrainConfig { steps: 3, batch_size: 4, seed: 1, ..Default::default() };
        let s = batch_schedule(6, &tc);
        let mut first: Vec<usize> = s[0].iter().chain(&s[1][..2]).copied().collect();
        first.sort_unstable();
        assert_eq!(first, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn empty_set_rejected() {
        let p = ParamSet::init(&cfg(), 1).unwrap();
        assert!(train(&p, &[], &TrainConfig::default()).is_err());
        assert!(eval_loss(&p, &[]).is_err());
    }
}
