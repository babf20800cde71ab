//! Brute-force ground truth for small models: dense curvature over the tracked
//! parameters, exact damped solves, and rank/linear correlation of the
//! approximate scorers against the exact one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::Token;
use crate::curvature::{tap_for, FactorInverseSet, KroneckerFactor};
use crate::linalg::{lu_solve, Mat};
use crate::model::{self, LayerTap, LayerVectors, ParamSet, QkvMode, TapKind, TrackedLayer};
use rand::Rng;

use crate::{math, rng, stats, Error, Result};

pub const DEFAULT_PARAM_CAP: usize = 3000;

/// Fewest candidates for which a correlation is reported.
pub const MIN_CANDIDATES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureDefinition {
    /// Mean over token positions of `(δ_t⊗x_t)(δ_t⊗x_t)ᵀ`, the quantity K-FAC factorizes.
    EmpiricalGradient,
    /// Mean over positions of `Jᵀ (diag p − p pᵀ) J`, evaluated as `Σ_c p_c g_c g_cᵀ`.
    GaussNewton,
    /// Block-diagonal `Δ⊗X` assembled from factors.
    Factored,
}

impl CurvatureDefinition {
    pub fn name(self) -> &'static str {
        match self {
            CurvatureDefinition::EmpiricalGradient => "empirical-gradient-outer-product",
            CurvatureDefinition::GaussNewton => "gauss-newton",
            CurvatureDefinition::Factored => "factored",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseCurvature {
    pub layers: Vec<TrackedLayer>,
    pub h: Mat,
    pub definition: CurvatureDefinition,
}

impl DenseCurvature {
    pub fn dim(&self) -> usize {
        self.h.rows()
    }
}

/// Gradient of one sample restricted to `layers`: `vec(Σ_t δ_t x_tᵀ)` per layer.
pub fn sample_gradient(taps: &[LayerTap], layers: &[TrackedLayer]) -> Result<LayerVectors> {
    Ok(LayerVectors {
        layers: layers.to_vec(),
        data: layers
            .iter()
            .map(|&l| tap_for(taps, l).map(|t| t.weight_gradient()))
            .collect::<Result<_>>()?,
    })
}

/// Per-token `δ_t ⊗ x_t`, concatenated over `layers`.
pub fn token_gradients(taps: &[LayerTap], layers: &[TrackedLayer]) -> Result<Vec<Vec<f64>>> {
    let packed: Vec<LayerTap> = layers
        .iter()
        .map(|&l| tap_for(taps, l))
        .collect::<Result<_>>()?;
    let tokens = packed.first().map_or(0, LayerTap::tokens);
    Ok((0..tokens)
        .map(|t| {
            let mut g = Vec::new();
            for tap in &packed {
                for &d in tap.delta.row(t) {
                    g.extend(tap.x.row(t).iter().map(|x| d * x));
                }
            }
            g
        })
        .collect())
}

fn check_cap(p: usize, cap: usize) -> Result<()> {
    if p > cap {
        return Err(Error::ParameterCap { count: p, cap });
    }
    Ok(())
}

/// Exact empirical curvature over the tokens of tap samples.
pub fn empirical_curvature(
    samples: &[Vec<LayerTap>],
    layers: &[TrackedLayer],
    cap: usize,
) -> Result<DenseCurvature> {
    let mut h: Option<Mat> = None;
    let mut count = 0usize;
    for s in samples {
        for g in token_gradients(s, layers)? {
            check_cap(g.len(), cap)?;
            let m = h.get_or_insert_with(|| Mat::zeros(g.len(), g.len()));
            m.add_outer(1.0, &g, &g);
            count += 1;
        }
    }
    let mut h = h.ok_or_else(|| Error::InvalidArgument("no samples for curvature".into()))?;
    h.scale(1.0 / count as f64);
    Ok(DenseCurvature {
        layers: layers.to_vec(),
        h,
        definition: CurvatureDefinition::EmpiricalGradient,
    })
}

/// Dense curvature of `params` over `dataset`, restricted to `layers`.
pub fn dense_curvature(
    params: &ParamSet,
    dataset: &[Vec<Token>],
    layers: &[TrackedLayer],
    definition: CurvatureDefinition,
    cap: usize,
) -> Result<DenseCurvature> {
    let p: usize = layers
        .iter()
        .map(|l| {
            let (o, i) = params.config.kind_shape(l.kind);
            o * i
        })
        .sum();
    check_cap(p, cap)?;
    match definition {
        CurvatureDefinition::EmpiricalGradient => {
            let samples = dataset
                .iter()
                .map(|s| model::loss_and_grad(params, s).map(|(_, b)| b.taps))
                .collect::<Result<Vec<_>>>()?;
            empirical_curvature(&samples, layers, cap)
        }
        CurvatureDefinition::GaussNewton => {
            let mut h = Mat::zeros(p, p);
            let mut positions = 0usize;
            let vocab = params.config.vocab_size;
            for seq in dataset {
                let (_, cache) = model::forward(params, seq)?;
                let probs = cache.predictions().clone();
                for t in 0..probs.rows() {
                    positions += 1;
                    for c in 0..vocab {
                        let pc = probs[(t, c)];
                        if pc == 0.0 {
                            continue;
                        }
                        let mut dl = Mat::zeros(probs.rows(), vocab);
                        dl.row_mut(t).copy_from_slice(probs.row(t));
                        dl[(t, c)] -= 1.0;
                        let bw = model::backward_from_logit_grad(params, &cache, &dl)?;
                        let g = bw.grads.layer_vectors(layers).flatten();
                        h.add_outer(pc, &g, &g);
                    }
                }
            }
            if positions == 0 {
                return Err(Error::InvalidArgument("empty dataset".into()));
            }
            h.scale(1.0 / positions as f64);
            Ok(DenseCurvature {
                layers: layers.to_vec(),
                h,
                definition,
            })
        }
        CurvatureDefinition::Factored => Err(Error::InvalidArgument(
            "factored curvature is built with block_diagonal_from_factors".into(),
        )),
    }
}

/// Block-diagonal dense matrix with `Δ_l ⊗ X_l` on the diagonal.
pub fn block_diagonal_from_factors(factors: &[KroneckerFactor], cap: usize) -> Result<DenseCurvature> {
    let p: usize = factors.iter().map(|f| f.d_out() * f.d_in()).sum();
    check_cap(p, cap)?;
    let mut h = Mat::zeros(p, p);
    let mut off = 0;
    for f in factors {
        let block = f.dense();
        for i in 0..block.rows() {
            h.row_mut(off + i)[off..off + block.cols()].copy_from_slice(block.row(i));
        }
        off += block.rows();
    }
    Ok(DenseCurvature {
        layers: factors.iter().map(KroneckerFactor::tracked).collect(),
        h,
        definition: CurvatureDefinition::Factored,
    })
}

/// `(H + λI)⁻¹ v` by dense LU, validated by its residual.
pub fn dense_ihvp(h: &Mat, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    let mut a = h.clone();
    for i in 0..a.rows() {
        a[(i, i)] += damping;
    }
    let x = lu_solve(&a, v)?;
    let resid = a.matvec(&x);
    let err: f64 = math::sqrt(resid.iter().zip(v).map(|(r, b)| (r - b) * (r - b)).sum());
    let tol = 1e-9 * math::norm(v).max(f64::MIN_POSITIVE);
    if err > tol {
        return Err(Error::SingularMatrix { pivot: usize::MAX });
    }
    Ok(x)
}

/// Exact score `⟨∇L(z), (H + λI)⁻¹ ∇L(D_r)⟩`, same orientation as the influence module.
pub fn exact_influence(
    grad_z: &LayerVectors,
    ref_grad: &LayerVectors,
    curvature: &DenseCurvature,
    damping: f64,
) -> Result<f64> {
    let x = dense_ihvp(&curvature.h, &ref_grad.flatten(), damping)?;
    Ok(math::dot(&grad_z.flatten(), &x))
}

/// Tracked registry implied by a tap sample (Q/K/V grouped by `mode`).
pub fn registry_from_taps(taps: &[LayerTap], mode: QkvMode) -> Vec<TrackedLayer> {
    let mut layers: Vec<usize> = taps.iter().map(|t| t.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut out = Vec::new();
    for layer in layers {
        let has = |k| taps.iter().any(|t| t.layer == layer && t.kind == k);
        if has(TapKind::Query) && has(TapKind::Key) && has(TapKind::Value) {
            match mode {
                QkvMode::Joint => out.push(TrackedLayer { layer, kind: TapKind::QkvJoint }),
                QkvMode::Independent => {
                    for kind in [TapKind::Query, TapKind::Key, TapKind::Value] {
                        out.push(TrackedLayer { layer, kind });
                    }
                }
            }
        }
        for kind in [TapKind::AttnOut, TapKind::MlpUp, TapKind::MlpGate, TapKind::MlpDown] {
            if has(kind) {
                out.push(TrackedLayer { layer, kind });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodCorrelation {
    pub method: String,
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<MethodCorrelation>,
    /// Raw scores per method, candidate order; `exact` first.
    pub scores: Vec<(String, Vec<f64>)>,
}

impl ComparisonReport {
    pub fn get(&self, method: &str) -> Option<&MethodCorrelation> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn scores_of(&self, method: &str) -> Option<&[f64]> {
        self.scores
            .iter()
            .find(|(m, _)| m == method)
            .map(|(_, s)| s.as_slice())
    }
}

pub const METHOD_EXACT: &str = "exact";
pub const METHOD_NO_HESSIAN: &str = "no-hessian";
pub const METHOD_INDEPENDENT: &str = "independent-qkv";
pub const METHOD_JOINT: &str = "joint-qkv";

/// Scores every candidate with the exact dense oracle and the three
/// approximations, then correlates each approximation with the exact scores.
///
/// `curvature_data` feeds both the dense curvature (unless `exact` is given)
/// and the Kronecker factors.
pub fn compare_methods_on_taps(
    candidates: &[Vec<LayerTap>],
    reference: &[Vec<LayerTap>],
    curvature_data: &[Vec<LayerTap>],
    damping: f64,
    exact: Option<&DenseCurvature>,
    cap: usize,
) -> Result<ComparisonReport> {
    if candidates.len() < MIN_CANDIDATES {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least {MIN_CANDIDATES} candidates, got {}",
            candidates.len()
        )));
    }
    let first = reference
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty reference".into()))?;
    let joint_layers = registry_from_taps(first, QkvMode::Joint);
    let indep_layers = registry_from_taps(first, QkvMode::Independent);

    let mean_grad = |layers: &[TrackedLayer]| -> Result<LayerVectors> {
        let mut acc = sample_gradient(first, layers)?;
        for s in &reference[1..] {
            acc.axpy(1.0, &sample_gradient(s, layers)?);
        }
        acc.scale(1.0 / reference.len() as f64);
        Ok(acc)
    };
    let ref_joint = mean_grad(&joint_layers)?;
    let ref_indep = mean_grad(&indep_layers)?;

    let owned;
    let dense = match exact {
        Some(d) => d,
        None => {
            owned = empirical_curvature(curvature_data, &joint_layers, cap)?;
            &owned
        }
    };
    let exact_dir = dense_ihvp(&dense.h, &ref_joint.flatten(), damping)?;

    let factors = |layers: &[TrackedLayer]| -> Result<FactorInverseSet> {
        let mut fs: Vec<KroneckerFactor> = layers
            .iter()
            .map(|&l| {
                let t = tap_for(first, l)?;
                Ok(KroneckerFactor::new(l.layer, l.kind, t.delta.cols(), t.x.cols()))
            })
            .collect::<Result<_>>()?;
        for s in curvature_data {
            for f in &mut fs {
                f.accumulate(&tap_for(s, f.tracked())?)?;
            }
        }
        FactorInverseSet::new(&fs, damping)
    };
    let joint_dir = factors(&joint_layers)?.apply(&ref_joint)?;
    let indep_dir = factors(&indep_layers)?.apply(&ref_indep)?;

    let mut s_exact = Vec::with_capacity(candidates.len());
    let mut s_plain = Vec::with_capacity(candidates.len());
    let mut s_indep = Vec::with_capacity(candidates.len());
    let mut s_joint = Vec::with_capacity(candidates.len());
    for c in candidates {
        let gj = sample_gradient(c, &joint_layers)?;
        let gi = sample_gradient(c, &indep_layers)?;
        s_exact.push(math::dot(&gj.flatten(), &exact_dir));
        s_plain.push(gj.dot(&ref_joint));
        s_joint.push(gj.dot(&joint_dir));
        s_indep.push(gi.dot(&indep_dir));
    }

    let scores = vec![
        (String::from(METHOD_EXACT), s_exact),
        (String::from(METHOD_NO_HESSIAN), s_plain),
        (String::from(METHOD_INDEPENDENT), s_indep),
        (String::from(METHOD_JOINT), s_joint),
    ];
    let truth = &scores[0].1;
    let rows = scores
        .iter()
        .map(|(name, s)| {
            let degenerate = || Error::Degenerate(name.clone());
            Ok(MethodCorrelation {
                method: name.clone(),
                pearson: stats::pearson(s, truth).ok_or_else(degenerate)?,
                spearman: stats::spearman(s, truth).ok_or_else(degenerate)?,
                n: s.len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonReport { rows, scores })
}

/// [`compare_methods_on_taps`] on a model: taps come from backward passes,
/// curvature and factors are estimated over the reference sequences.
pub fn compare_methods(
    params: &ParamSet,
    candidates: &[Vec<Token>],
    reference: &[Vec<Token>],
    damping: f64,
    definition: CurvatureDefinition,
    cap: usize,
) -> Result<ComparisonReport> {
    let taps = |set: &[Vec<Token>]| -> Result<Vec<Vec<LayerTap>>> {
        set.iter()
            .map(|s| model::loss_and_grad(params, s).map(|(_, b)| b.taps))
            .collect()
    };
    let cand = taps(candidates)?;
    let refs = taps(reference)?;
    let exact = match definition {
        CurvatureDefinition::GaussNewton => Some(dense_curvature(
            params,
            reference,
            &model::tracked_layers(&params.config, QkvMode::Joint),
            definition,
            cap,
        )?),
        _ => None,
    };
    compare_methods_on_taps(&cand, &refs, &refs, damping, exact.as_ref(), cap)
}

/// Correlation structure of synthetic attention-projection taps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QkvScenario {
    /// Only one of `δ_q, δ_k, δ_v` is nonzero at each token.
    Uncorrelated,
    /// `δ_k ≈ ρ δ_q`, `δ_v ≈ −ρ δ_q` with small independent noise.
    Correlated { rho: f64, noise: f64 },
}

/// Synthetic Q/K/V taps at layer 0 with anisotropic inputs and gradients,
/// independent across tokens: `samples` samples of `tokens` tokens each.
pub fn qkv_scenario_taps(
    scenario: QkvScenario,
    dim: usize,
    tokens: usize,
    samples: usize,
    seed: u64,
) -> Vec<Vec<LayerTap>> {
    let mut r = rng::seeded(seed, 0x9c7);
    let x_scale: Vec<f64> = (0..dim).map(|i| math::powf(0.5, i as f64)).collect();
    let d_scale: Vec<f64> = (0..dim).map(|i| math::powf(0.6, i as f64)).collect();
    (0..samples)
        .map(|_| {
            let x = Mat::from_fn(tokens, dim, |_, j| x_scale[j] * rng::normal(&mut r));
            let mut dq = Mat::zeros(tokens, dim);
            let mut dk = Mat::zeros(tokens, dim);
            let mut dv = Mat::zeros(tokens, dim);
            for t in 0..tokens {
                match scenario {
                    QkvScenario::Uncorrelated => {
                        let which = r.random_range(0..3usize);
                        let m = [&mut dq, &mut dk, &mut dv];
                        for j in 0..dim {
                            m[which][(t, j)] = d_scale[j] * rng::normal(&mut r);
                        }
                    }
                    QkvScenario::Correlated { rho, noise } => {
                        for j in 0..dim {
                            let z = d_scale[j] * rng::normal(&mut r);
                            dq[(t, j)] = z;
                            dk[(t, j)] = rho * z + noise * rng::normal(&mut r);
                            dv[(t, j)] = -rho * z + noise * rng::normal(&mut r);
                        }
                    }
                }
            }
            [(TapKind::Query, dq), (TapKind::Key, dk), (TapKind::Value, dv)]
                .into_iter()
                .map(|(kind, delta)| LayerTap {
                    layer: 0,
                    kind,
                    x: x.clone(),
                    delta,
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_curvature_reduces_to_gradient_alignment() {
        let layers = vec![TrackedLayer { layer: 0, kind: TapKind::AttnOut }];
        let g = LayerVectors { layers: layers.clone(), data: vec![vec![1.0, 2.0, 3.0]] };
        let r = LayerVectors { layers: layers.clone(), data: vec![vec![0.5, -1.0, 2.0]] };
        let h = DenseCurvature {
            layers,
            h: Mat::zeros(3, 3),
            definition: CurvatureDefinition::EmpiricalGradient,
        };
        assert!((exact_influence(&g, &r, &h, 1.0).unwrap() - 4.5).abs() < 1e-15);
        let zero = LayerVectors { layers: g.layers.clone(), data: vec![vec![0.0; 3]] };
        assert_eq!(exact_influence(&zero, &r, &h, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn singular_undamped_solve_fails() {
        assert!(dense_ihvp(&Mat::zeros(2, 2), &[1.0, 0.0], 0.0).is_err());
    }
}
