//! Kronecker-factored curvature per tracked layer and damped inverse products.
//!
//! A layer's gradient second moment `E[(δ⊗x)(δ⊗x)ᵀ]` is approximated by
//! `Δ ⊗ X = E[δδᵀ] ⊗ E[xxᵀ]`, with every token position contributing one
//! `(x_t, δ_t)` pair. For attention, the query/key/value projections share
//! their input, so stacking `[δ_q; δ_k; δ_v]` gives one joint block whose `Δ`
//! keeps the Q/K/V cross-covariances.

use alloc::vec::Vec;

use crate::linalg::{sym_eigen, Mat, SymEigen};
use crate::model::{self, LayerTap, LayerVectors, ModelConfig, ParamSet, TapKind, TrackedLayer};
use crate::corpus::Token;
use crate::{Error, Result};

/// Relative eigenvalue floor applied before damping.
pub const EIGEN_FLOOR: f64 = 1e-12;

pub const DEFAULT_DAMPING: f64 = 1e-3;

/// Running sums of `δδᵀ` and `xxᵀ`; [`KroneckerFactor::delta`] and
/// [`KroneckerFactor::x`] return the means.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactor {
    pub layer: usize,
    pub kind: TapKind,
    delta_sum: Mat,
    x_sum: Mat,
    sample_count: u64,
}

impl KroneckerFactor {
    pub fn new(layer: usize, kind: TapKind, d_out: usize, d_in: usize) -> Self {
        Self {
            layer,
            kind,
            delta_sum: Mat::zeros(d_out, d_out),
            x_sum: Mat::zeros(d_in, d_in),
            sample_count: 0,
        }
    }

    pub fn for_layer(config: &ModelConfig, t: TrackedLayer) -> Self {
        let (o, i) = config.kind_shape(t.kind);
        Self::new(t.layer, t.kind, o, i)
    }

    /// Rebuilds a factor from stored means (e.g. a checkpoint).
    pub fn from_means(
        layer: usize,
        kind: TapKind,
        delta: Mat,
        x: Mat,
        sample_count: u64,
    ) -> Result<Self> {
        if delta.rows() != delta.cols() || x.rows() != x.cols() {
            return Err(Error::InvalidArgument("factors must be square".into()));
        }
        let mut f = Self {
            layer,
            kind,
            delta_sum: delta,
            x_sum: x,
            sample_count,
        };
        f.delta_sum.scale(sample_count as f64);
        f.x_sum.scale(sample_count as f64);
        Ok(f)
    }

    pub fn tracked(&self) -> TrackedLayer {
        TrackedLayer {
            layer: self.layer,
            kind: self.kind,
        }
    }

    pub fn d_out(&self) -> usize {
        self.delta_sum.rows()
    }

    pub fn d_in(&self) -> usize {
        self.x_sum.rows()
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    fn mean(sum: &Mat, n: u64) -> Mat {
        let mut m = sum.clone();
        if n > 0 {
            m.scale(1.0 / n as f64);
        }
        m
    }

    /// `E[δδᵀ]`
    pub fn delta(&self) -> Mat {
        Self::mean(&self.delta_sum, self.sample_count)
    }

    /// `E[xxᵀ]`
    pub fn x(&self) -> Mat {
        Self::mean(&self.x_sum, self.sample_count)
    }

    /// Adds every token of `tap` as one sample.
    pub fn accumulate(&mut self, tap: &LayerTap) -> Result<()> {
        if tap.kind != self.kind {
            return Err(Error::InvalidArgument(alloc::format!(
                "tap kind {} does not match factor kind {}",
                tap.kind.name(),
                self.kind.name()
            )));
        }
        if tap.delta.cols() != self.d_out() {
            return Err(Error::DimensionMismatch {
                context: "factor delta dim",
                expected: self.d_out(),
                actual: tap.delta.cols(),
            });
        }
        if tap.x.cols() != self.d_in() {
            return Err(Error::DimensionMismatch {
                context: "factor x dim",
                expected: self.d_in(),
                actual: tap.x.cols(),
            });
        }
        if tap.x.rows() != tap.delta.rows() {
            return Err(Error::DimensionMismatch {
                context: "tap token count",
                expected: tap.x.rows(),
                actual: tap.delta.rows(),
            });
        }
        self.delta_sum.add_scaled(1.0, &tap.delta.t_matmul(&tap.delta));
        self.x_sum.add_scaled(1.0, &tap.x.t_matmul(&tap.x));
        self.sample_count += tap.tokens() as u64;
        Ok(())
    }

    /// Folds another partial accumulation of the same layer into this one.
    pub fn merge(&mut self, other: &KroneckerFactor) -> Result<()> {
        if other.tracked() != self.tracked()
            || other.d_out() != self.d_out()
            || other.d_in() != self.d_in()
        {
            return Err(Error::InvalidArgument("merging factors of different layers".into()));
        }
        self.delta_sum.add_scaled(1.0, &other.delta_sum);
        self.x_sum.add_scaled(1.0, &other.x_sum);
        self.sample_count += other.sample_count;
        Ok(())
    }

    /// Dense `Δ ⊗ X`, for oracles only.
    pub fn dense(&self) -> Mat {
        self.delta().kron(&self.x())
    }
}

/// Stacks per-token `[δ_q | δ_k | δ_v]` over the shared input.
pub fn joint_qkv_pack(q: &LayerTap, k: &LayerTap, v: &LayerTap) -> Result<LayerTap> {
    if (q.kind, k.kind, v.kind) != (TapKind::Query, TapKind::Key, TapKind::Value) {
        return Err(Error::InvalidArgument("joint_qkv_pack expects query, key, value taps".into()));
    }
    if q.layer != k.layer || q.layer != v.layer {
        return Err(Error::InvalidArgument("joint_qkv_pack: taps from different layers".into()));
    }
    if q.x != k.x || q.x != v.x {
        return Err(Error::InvalidArgument("joint_qkv_pack: query/key/value inputs differ".into()));
    }
    let t = q.tokens();
    let (dq, dk, dv) = (q.delta.cols(), k.delta.cols(), v.delta.cols());
    let delta = Mat::from_fn(t, dq + dk + dv, |row, c| {
        if c < dq {
            q.delta[(row, c)]
        } else if c < dq + dk {
            k.delta[(row, c - dq)]
        } else {
            v.delta[(row, c - dq - dk)]
        }
    });
    Ok(LayerTap {
        layer: q.layer,
        kind: TapKind::QkvJoint,
        x: q.x.clone(),
        delta,
    })
}

/// The tap matching `t` from a backward pass, packing Q/K/V when joint.
pub fn tap_for(taps: &[LayerTap], t: TrackedLayer) -> Result<LayerTap> {
    let find = |kind| {
        taps.iter()
            .find(|tap| tap.layer == t.layer && tap.kind == kind)
            .ok_or(Error::MissingFactor {
                layer: t.layer,
                kind: kind.name(),
            })
    };
    match t.kind {
        TapKind::QkvJoint => joint_qkv_pack(
            find(TapKind::Query)?,
            find(TapKind::Key)?,
            find(TapKind::Value)?,
        ),
        kind => find(kind).cloned(),
    }
}

/// Factors for every tracked layer, estimated over `sequences` in order.
pub fn estimate_factors(
    params: &ParamSet,
    sequences: &[Vec<Token>],
    layers: &[TrackedLayer],
) -> Result<Vec<KroneckerFactor>> {
    let mut factors: Vec<KroneckerFactor> = layers
        .iter()
        .map(|&l| KroneckerFactor::for_layer(&params.config, l))
        .collect();
    for seq in sequences {
        let (_, bw) = model::loss_and_grad(params, seq)?;
        for f in &mut factors {
            f.accumulate(&tap_for(&bw.taps, f.tracked())?)?;
        }
    }
    Ok(factors)
}

/// Eigendecompositions of `Δ` and `X` plus the damping used in
/// `(Δ⊗X + λI)⁻¹ = (Q_Δ⊗Q_X) diag(1/(s_Δ s_X + λ)) (Q_Δ⊗Q_X)ᵀ`.
#[derive(Debug, Clone)]
pub struct DampedFactorInverse {
    pub layer: usize,
    pub kind: TapKind,
    pub delta_eig: SymEigen,
    pub x_eig: SymEigen,
    pub damping: f64,
}

fn floored(mut e: SymEigen) -> SymEigen {
    let max = e.values.iter().copied().fold(0.0f64, f64::max);
    let floor = EIGEN_FLOOR * max;
    e.values.iter_mut().for_each(|v| *v = v.max(floor));
    e
}

impl DampedFactorInverse {
    pub fn new(factor: &KroneckerFactor, damping: f64) -> Result<Self> {
        Self::from_matrices(factor.layer, factor.kind, &factor.delta(), &factor.x(), damping)
    }

    pub fn from_matrices(
        layer: usize,
        kind: TapKind,
        delta: &Mat,
        x: &Mat,
        damping: f64,
    ) -> Result<Self> {
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(Error::InvalidArgument("damping must be finite and ≥ 0".into()));
        }
        let inv = Self {
            layer,
            kind,
            delta_eig: floored(sym_eigen(delta)),
            x_eig: floored(sym_eigen(x)),
            damping,
        };
        inv.check_invertible()?;
        Ok(inv)
    }

    fn check_invertible(&self) -> Result<()> {
        for (i, sd) in self.delta_eig.values.iter().enumerate() {
            for (j, sx) in self.x_eig.values.iter().enumerate() {
                let value = sd * sx + self.damping;
                if !(value > 0.0) {
                    return Err(Error::SingularFactor { row: i, col: j, value });
                }
            }
        }
        Ok(())
    }

    pub fn tracked(&self) -> TrackedLayer {
        TrackedLayer {
            layer: self.layer,
            kind: self.kind,
        }
    }

    pub fn d_out(&self) -> usize {
        self.delta_eig.values.len()
    }

    pub fn d_in(&self) -> usize {
        self.x_eig.values.len()
    }

    /// Same eigenbases with a different damping.
    pub fn with_damping(&self, damping: f64) -> Result<Self> {
        let inv = Self {
            damping,
            ..self.clone()
        };
        inv.check_invertible()?;
        Ok(inv)
    }

    /// `(Δ⊗X + λI)⁻¹ v` via the reshaped identity, never materializing the Kronecker product.
    pub fn kron_ihvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (d_out, d_in) = (self.d_out(), self.d_in());
        if v.len() != d_out * d_in {
            return Err(Error::DimensionMismatch {
                context: "kron_ihvp vector",
                expected: d_out * d_in,
                actual: v.len(),
            });
        }
        let qd = &self.delta_eig.vectors;
        let qx = &self.x_eig.vectors;
        let vm = Mat::from_vec(d_out, d_in, v.to_vec());
        let mut w = qd.t_matmul(&vm).matmul(qx);
        for i in 0..d_out {
            let sd = self.delta_eig.values[i];
            for j in 0..d_in {
                w[(i, j)] /= sd * self.x_eig.values[j] + self.damping;
            }
        }
        Ok(qd.matmul(&w).matmul(&qx.transpose()).into_vec())
    }
}

/// One inverse per tracked layer.
#[derive(Debug, Clone)]
pub struct FactorInverseSet {
    pub inverses: Vec<DampedFactorInverse>,
}

impl FactorInverseSet {
    pub fn new(factors: &[KroneckerFactor], damping: f64) -> Result<Self> {
        Ok(Self {
            inverses: factors
                .iter()
                .map(|f| DampedFactorInverse::new(f, damping))
                .collect::<Result<_>>()?,
        })
    }

    pub fn get(&self, t: TrackedLayer) -> Option<&DampedFactorInverse> {
        self.inverses.iter().find(|i| i.tracked() == t)
    }

    pub fn with_damping(&self, damping: f64) -> Result<Self> {
        Ok(Self {
            inverses: self
                .inverses
                .iter()
                .map(|i| i.with_damping(damping))
                .collect::<Result<_>>()?,
        })
    }

    /// Applies each layer's inverse to the matching block of `v`.
    pub fn apply(&self, v: &LayerVectors) -> Result<LayerVectors> {
        let data = v
            .layers
            .iter()
            .zip(&v.data)
            .map(|(&t, block)| {
                self.get(t)
                    .ok_or(Error::MissingFactor {
                        layer: t.layer,
                        kind: t.kind.name(),
                    })?
                    .kron_ihvp(block)
            })
            .collect::<Result<_>>()?;
        Ok(LayerVectors {
            layers: v.layers.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::rng;
    use alloc::vec;
    use rand::Rng;

    fn random_mat(rows: usize, cols: usize, r: &mut impl Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    fn spd(n: usize, r: &mut impl Rng) -> Mat {
        let b = random_mat(n, n, r);
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            a[(i, i)] += 0.05;
        }
        a
    }

    fn tap(kind: TapKind, x: Mat, delta: Mat) -> LayerTap {
        LayerTap { layer: 0, kind, x, delta }
    }

    #[test]
    fn single_pair_from_zero_state() {
        let x = [1.0, 2.0];
        let d = [3.0, -1.0, 0.5];
        let mut f = KroneckerFactor::new(0, TapKind::AttnOut, 3, 2);
        f.accumulate(&tap(
            TapKind::AttnOut,
            Mat::from_vec(1, 2, x.to_vec()),
            Mat::from_vec(1, 3, d.to_vec()),
        ))
        .unwrap();
        let mut dd = Mat::zeros(3, 3);
        dd.add_outer(1.0, &d, &d);
        let mut xx = Mat::zeros(2, 2);
        xx.add_outer(1.0, &x, &x);
        assert_eq!(f.delta(), dd);
        assert_eq!(f.x(), xx);
        assert_eq!(f.sample_count(), 1);
    }

    #[test]
    fn same_tap_twice_is_idempotent_on_means() {
        let mut r = rng::seeded(1, 0);
        let t = tap(TapKind::MlpUp, random_mat(5, 3, &mut r), random_mat(5, 4, &mut r));
        let mut once = KroneckerFactor::new(0, TapKind::MlpUp, 4, 3);
        once.accumulate(&t).unwrap();
        let mut twice = once.clone();
        twice.accumulate(&t).unwrap();
        assert_eq!(once.delta(), twice.delta());
        assert_eq!(once.x(), twice.x());
        assert_eq!(twice.sample_count(), 10);
    }

    #[test]
    fn accumulate_rejects_mismatch() {
        let mut f = KroneckerFactor::new(0, TapKind::MlpUp, 4, 3);
        let bad = tap(TapKind::MlpUp, Mat::zeros(2, 3), Mat::zeros(2, 5));
        assert!(f.accumulate(&bad).is_err());
        let wrong_kind = tap(TapKind::MlpDown, Mat::zeros(2, 3), Mat::zeros(2, 4));
        assert!(f.accumulate(&wrong_kind).is_err());
    }

    #[test]
    fn identity_factors_pass_through() {
        let inv = DampedFactorInverse::from_matrices(
            0,
            TapKind::AttnOut,
            &Mat::identity(3),
            &Mat::identity(4),
            0.0,
        )
        .unwrap();
        let v: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        assert!(math::rel_err(&inv.kron_ihvp(&v).unwrap(), &v) < 1e-15);
        assert!(inv.kron_ihvp(&v[..5]).is_err());
    }

    #[test]
    fn scaling_delta_scales_output_inversely() {
        let mut r = rng::seeded(2, 0);
        let d = spd(3, &mut r);
        let x = spd(4, &mut r);
        let v: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = DampedFactorInverse::from_matrices(0, TapKind::AttnOut, &d, &x, 0.0)
            .unwrap()
            .kron_ihvp(&v)
            .unwrap();
        let mut d3 = d.clone();
        d3.scale(3.0);
        let scaled = DampedFactorInverse::from_matrices(0, TapKind::AttnOut, &d3, &x, 0.0)
            .unwrap()
            .kron_ihvp(&v)
            .unwrap();
        let expect: Vec<f64> = base.iter().map(|b| b / 3.0).collect();
        assert!(math::rel_err(&scaled, &expect) < 1e-12);
    }

    #[test]
    fn zero_factor_without_damping_is_singular() {
        let err = DampedFactorInverse::from_matrices(
            0,
            TapKind::AttnOut,
            &Mat::zeros(2, 2),
            &Mat::identity(2),
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularFactor { .. }));
        assert!(DampedFactorInverse::from_matrices(
            0,
            TapKind::AttnOut,
            &Mat::zeros(2, 2),
            &Mat::identity(2),
            0.1
        )
        .is_ok());
    }

    #[test]
    fn identical_blocks_give_ones_kron_structure() {
        let mut r = rng::seeded(3, 0);
        let x = random_mat(6, 2, &mut r);
        let u = random_mat(6, 2, &mut r);
        let joint = joint_qkv_pack(
            &tap(TapKind::Query, x.clone(), u.clone()),
            &tap(TapKind::Key, x.clone(), u.clone()),
            &tap(TapKind::Value, x.clone(), u.clone()),
        )
        .unwrap();
        let mut f = KroneckerFactor::new(0, TapKind::QkvJoint, 6, 2);
        f.accumulate(&joint).unwrap();
        let mut single = KroneckerFactor::new(0, TapKind::Query, 2, 2);
        single
            .accumulate(&tap(TapKind::Query, x.clone(), u.clone()))
            .unwrap();
        let expect = Mat::from_vec(3, 3, vec![1.0; 9]).kron(&single.delta());
        assert!(math::rel_err(f.delta().as_slice(), expect.as_slice()) < 1e-15);
    }

    #[test]
    fn zero_key_value_deltas_leave_only_query_block() {
        let mut r = rng::seeded(4, 0);
        let x = random_mat(5, 3, &mut r);
        let joint = joint_qkv_pack(
            &tap(TapKind::Query, x.clone(), random_mat(5, 3, &mut r)),
            &tap(TapKind::Key, x.clone(), Mat::zeros(5, 3)),
            &tap(TapKind::Value, x.clone(), Mat::zeros(5, 3)),
        )
        .unwrap();
        let mut f = KroneckerFactor::new(0, TapKind::QkvJoint, 9, 3);
        f.accumulate(&joint).unwrap();
        let dm = f.delta();
        for i in 0..9 {
            for j in 0..9 {
                if i >= 3 || j >= 3 {
                    assert_eq!(dm[(i, j)], 0.0);
                }
            }
        }
        assert!(dm[(0, 0)] > 0.0);
    }

    #[test]
    fn pack_rejects_mismatched_inputs() {
        let x = Mat::identity(2);
        let mut y = x.clone();
        y[(0, 1)] = 0.5;
        let res = joint_qkv_pack(
            &tap(TapKind::Query, x.clone(), x.clone()),
            &tap(TapKind::Key, y, x.clone()),
            &tap(TapKind::Value, x.clone(), x.clone()),
        );
        assert!(res.is_err());
    }

    #[test]
    fn merge_equals_sequential_accumulation() {
        let mut r = rng::seeded(5, 0);
        let taps: Vec<LayerTap> = (0..6)
            .map(|_| tap(TapKind::MlpDown, random_mat(3, 4, &mut r), random_mat(3, 2, &mut r)))
            .collect();
        let mut seq = KroneckerFactor::new(0, TapKind::MlpDown, 2, 4);
        taps.iter().for_each(|t| seq.accumulate(t).unwrap());
        let mut a = KroneckerFactor::new(0, TapKind::MlpDown, 2, 4);
        let mut b = a.clone();
        taps[..3].iter().for_each(|t| a.accumulate(t).unwrap());
        taps[3..].iter().for_each(|t| b.accumulate(t).unwrap());
        a.merge(&b).unwrap();
        assert_eq!(a.sample_count(), seq.sample_count());
        assert!(math::rel_err(a.delta().as_slice(), seq.delta().as_slice()) < 1e-14);
        assert!(math::rel_err(a.x().as_slice(), seq.x().as_slice()) < 1e-14);
    }
}
