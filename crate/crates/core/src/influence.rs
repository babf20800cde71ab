//! Influence scoring in two stages: the reference gradient is pushed through
//! the damped Kronecker inverse once, then every candidate's gradient is
//! dotted against it, optionally after a random-projection sketch.
//!
//! Scores use the alignment orientation `⟨∇L(z), (H + λI)⁻¹ ∇L(D_r)⟩`: a
//! positive score means up-weighting `z` is expected to lower reference loss,
//! which is what a positive selection threshold compares against. The classic
//! signed influence of `z` on reference loss is the negation of this value.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::corpus::{CandidateInstance, InstanceId, Token};
use crate::curvature::FactorInverseSet;
use crate::model::{self, LayerVectors, ParamSet, TrackedLayer};
use crate::rng;
use crate::{math, Error, Result};

/// Reference gradient after the inverse-curvature product.
#[derive(Debug, Clone, PartialEq)]
pub struct IhvpVector {
    pub vectors: LayerVectors,
    pub damping: f64,
    /// Identifies the factor set the product was computed with.
    pub factor_id: u64,
}

impl IhvpVector {
    pub fn layers(&self) -> &[TrackedLayer] {
        &self.vectors.layers
    }
}

/// Per-layer inverse products; each tracked block is handled independently and
/// the attention projections enter as one joint block when the registry says so.
pub fn reference_ihvp(
    ref_grad: &LayerVectors,
    inverses: &FactorInverseSet,
    factor_id: u64,
) -> Result<IhvpVector> {
    let damping = inverses.inverses.first().map_or(0.0, |i| i.damping);
    Ok(IhvpVector {
        vectors: inverses.apply(ref_grad)?,
        damping,
        factor_id,
    })
}

/// Per-layer contributions `⟨∇_layer L(z), ihvp_layer⟩`.
pub fn score_per_layer(
    tokens: &[Token],
    ihvp: &IhvpVector,
    params: &ParamSet,
) -> Result<Vec<f64>> {
    let grad = model::tracked_grad(params, tokens, ihvp.layers())?;
    Ok(grad.per_layer_dot(&ihvp.vectors))
}

pub fn score_instance(
    instance: &CandidateInstance,
    ihvp: &IhvpVector,
    params: &ParamSet,
) -> Result<f64> {
    score_tokens(&instance.tokens, ihvp, params)
}

pub fn score_tokens(tokens: &[Token], ihvp: &IhvpVector, params: &ParamSet) -> Result<f64> {
    Ok(score_per_layer(tokens, ihvp, params)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Entries `±1/√target_dim`, regenerated from the seed per layer.
    Rademacher,
    /// Pass-through: the "sketch" is the vector itself. Test hook.
    Identity,
}

/// Random linear map applied layer by layer; never stored, only regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchProjector {
    pub target_dim: usize,
    pub seed: u64,
    pub kind: ProjectionKind,
}

/// A sketched [`LayerVectors`]; one `target_dim` block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedVector {
    pub target_dim: usize,
    pub seed: u64,
    pub kind: ProjectionKind,
    pub layers: Vec<TrackedLayer>,
    pub data: Vec<Vec<f64>>,
}

impl SketchedVector {
    pub fn dot(&self, other: &SketchedVector) -> Result<f64> {
        if (self.target_dim, self.seed, self.kind) != (other.target_dim, other.seed, other.kind) {
            return Err(Error::SketchMismatch(String::from("projector seed/dim/kind differ")));
        }
        if self.layers != other.layers {
            return Err(Error::SketchMismatch(String::from("layer registries differ")));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::dot(a, b))
            .sum())
    }
}

pub const DEFAULT_SKETCH_DIM: usize = 256;

impl SketchProjector {
    pub fn rademacher(target_dim: usize, seed: u64) -> Self {
        Self {
            target_dim,
            seed,
            kind: ProjectionKind::Rademacher,
        }
    }

    pub fn identity() -> Self {
        Self {
            target_dim: 0,
            seed: 0,
            kind: ProjectionKind::Identity,
        }
    }

    fn layer_stream(layer: TrackedLayer) -> u64 {
        ((layer.layer as u64) << 8) | layer.kind as u64
    }

    /// Projects one flat vector; `stream` picks the layer's projection.
    pub fn project(&self, stream: u64, v: &[f64]) -> Vec<f64> {
        match self.kind {
            ProjectionKind::Identity => v.to_vec(),
            ProjectionKind::Rademacher => {
                let k = self.target_dim;
                let scale = 1.0 / math::sqrt(k as f64);
                let mut out = vec![0.0; k];
                let mut r = rng::seeded(self.seed, stream);
                // Column j of the projection is drawn whole before column j + 1.
                for &x in v {
                    let mut row = 0;
                    while row < k {
                        let bits = r.next_u64();
                        let take = (k - row).min(64);
                        let signed = [-x, x];
                        for (b, o) in out[row..row + take].iter_mut().enumerate() {
                            *o += signed[((bits >> b) & 1) as usize];
                        }
                        row += take;
                    }
                }
                out.iter_mut().for_each(|o| *o *= scale);
                out
            }
        }
    }

    pub fn sketch(&self, v: &LayerVectors) -> SketchedVector {
        SketchedVector {
            target_dim: self.target_dim,
            seed: self.seed,
            kind: self.kind,
            layers: v.layers.clone(),
            data: v
                .layers
                .iter()
                .zip(&v.data)
                .map(|(&l, d)| self.project(Self::layer_stream(l), d))
                .collect(),
        }
    }

    fn matches(&self, s: &SketchedVector) -> bool {
        (self.target_dim, self.seed, self.kind) == (s.target_dim, s.seed, s.kind)
    }
}

/// Score in sketch space; an unbiased estimate of [`score_instance`].
pub fn score_instance_sketched(
    instance: &CandidateInstance,
    sketched_ihvp: &SketchedVector,
    projector: &SketchProjector,
    params: &ParamSet,
) -> Result<f64> {
    if !projector.matches(sketched_ihvp) {
        return Err(Error::SketchMismatch(alloc::format!(
            "projector (dim {}, seed {}) differs from the one used for the iHVP (dim {}, seed {})",
            projector.target_dim,
            projector.seed,
            sketched_ihvp.target_dim,
            sketched_ihvp.seed
        )));
    }
    let grad = model::tracked_grad(params, &instance.tokens, &sketched_ihvp.layers)?;
    projector.sketch(&grad).dot(sketched_ihvp)
}

/// Dasgupta–Gupta JL distortion `ε` at `target_dim` for `n_points` vectors:
/// the smallest `ε ∈ (0, 1)` with `target_dim ≥ 4 ln n / (ε²/2 − ε³/3)`.
pub fn jl_epsilon(target_dim: usize, n_points: usize) -> f64 {
    let need = 4.0 * math::ln(n_points.max(2) as f64) / target_dim as f64;
    let f = |e: f64| e * e / 2.0 - e * e * e / 3.0;
    if f(1.0) < need {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= need {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    Exact,
    Factored,
    FactoredSketch,
}

impl ScoreMethod {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Exact => "exact",
            ScoreMethod::Factored => "factored",
            ScoreMethod::FactoredSketch => "factored+sketch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Exact, Self::Factored, Self::FactoredSketch]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRow {
    pub id: InstanceId,
    pub score: f64,
    pub method: ScoreMethod,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InfluenceTable {
    pub rows: Vec<InfluenceRow>,
}

impl InfluenceTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }
}

/// The state a scorer needs: the iHVP and, when sketching, the projector
/// plus the sketched iHVP.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    pub params: &'a ParamSet,
    pub ihvp: &'a IhvpVector,
    pub sketch: Option<(&'a SketchProjector, &'a SketchedVector)>,
}

impl Scorer<'_> {
    pub fn method(&self) -> ScoreMethod {
        if self.sketch.is_some() {
            ScoreMethod::FactoredSketch
        } else {
            ScoreMethod::Factored
        }
    }

    pub fn score(&self, instance: &CandidateInstance) -> Result<f64> {
        match self.sketch {
            Some((proj, sk)) => score_instance_sketched(instance, sk, proj, self.params),
            None => score_instance(instance, self.ihvp, self.params),
        }
    }

    pub fn row(&self, instance: &CandidateInstance) -> Result<InfluenceRow> {
        Ok(InfluenceRow {
            id: instance.id,
            score: self.score(instance)?,
            method: self.method(),
        })
    }
}

/// Rows in input order.
pub fn score_batch(instances: &[CandidateInstance], scorer: &Scorer<'_>) -> Result<InfluenceTable> {
    Ok(InfluenceTable {
        rows: instances
            .iter()
            .map(|i| scorer.row(i))
            .collect::<Result<_>>()?,
    })
}
