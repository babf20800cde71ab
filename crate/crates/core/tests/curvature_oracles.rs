use std::time::Instant;

use dataselect_core::curvature::{DampedFactorInverse, FactorInverseSet, KroneckerFactor};
use dataselect_core::influence::{self, jl_epsilon, SketchProjector};
use dataselect_core::linalg::Mat;
use dataselect_core::model::{self, ModelConfig, ParamSet, QkvMode, TapKind};
use dataselect_core::oracle::{self, QkvScenario, METHOD_INDEPENDENT, METHOD_JOINT, METHOD_NO_HESSIAN};
use dataselect_core::rng;
use dataselect_core::stats;

fn random_spd(n: usize, r: &mut rng::DetRng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng::normal(r)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s: f64 = (0..n).map(|k| a[i][k] * a[j][k]).sum();
                    s / n as f64 + if i == j { 0.5 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// Gauss-Jordan with partial pivoting, written independently of the library solver.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn to_mat(v: &[Vec<f64>]) -> Mat {
    Mat::from_fn(v.len(), v.len(), |i, j| v[i][j])
}

#[test]
fn kron_ihvp_matches_dense_solve() {
    let start = Instant::now();
    let mut r = rng::seeded(2024, 0);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for trial in 0..40 {
        let d_out = 1 + trial % 8;
        let d_in = 1 + (trial * 3) % 8;
        let delta = random_spd(d_out, &mut r);
        let x = random_spd(d_in, &mut r);
        let v: Vec<f64> = (0..d_out * d_in).map(|_| rng::normal(&mut r)).collect();
        for &lambda in &[0.0, 1e-3, 1e-1] {
            let n = d_out * d_in;
            let dense: Vec<Vec<f64>> = (0..n)
                .map(|row| {
                    (0..n)
                        .map(|col| {
                            let k = delta[row / d_in][col / d_in] * x[row % d_in][col % d_in];
                            k + if row == col { lambda } else { 0.0 }
                        })
                        .collect()
                })
                .collect();
            let want = gauss_solve(dense, v.clone());
            let inv = DampedFactorInverse::from_matrices(
                0,
                TapKind::MlpUp,
                &to_mat(&delta),
                &to_mat(&x),
                lambda,
            )
            .unwrap();
            let got = inv.kron_ihvp(&v).unwrap();
            worst = worst.max(rel(&got, &want));
            pairs += 1;
        }
    }
    assert!(pairs >= 100);
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn damping_shrinks_the_product() {
    let mut r = rng::seeded(5, 0);
    let inv = DampedFactorInverse::from_matrices(
        0,
        TapKind::MlpUp,
        &to_mat(&random_spd(4, &mut r)),
        &to_mat(&random_spd(3, &mut r)),
        0.0,
    )
    .unwrap();
    let v: Vec<f64> = (0..12).map(|_| rng::normal(&mut r)).collect();
    let norms: Vec<f64> = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]
        .iter()
        .map(|&l| {
            let w = inv.with_damping(l).unwrap().kron_ihvp(&v).unwrap();
            w.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

fn small_model() -> ParamSet {
    let cfg = ModelConfig {
        vocab_size: 13,
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        max_context: 16,
        mlp_ratio: 2.0,
        rope_base: 10_000.0,
        gated_mlp: false,
    };
    ParamSet::init(&cfg, 77).unwrap()
}

fn seqs(n: usize, len: usize, seed: u64, vocab: u32) -> Vec<Vec<u32>> {
    let mut r = rng::seeded(seed, 3);
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| (rng::normal(&mut r).abs() * 4.0) as u32 % vocab)
                .collect()
        })
        .collect()
}

#[test]
fn reference_ihvp_matches_dense_block_solve() {
    let p = small_model();
    let layers = model::tracked_layers(&p.config, QkvMode::Joint);
    let data = seqs(12, 10, 1, 13);
    let factors =
        dataselect_core::curvature::estimate_factors(&p, &data, &layers).unwrap();
    let inv = FactorInverseSet::new(&factors, 1e-3).unwrap();
    let g = model::grad_of_set(&p, &data[..4], &layers).unwrap();
    let ihvp = influence::reference_ihvp(&g, &inv, 0).unwrap();
    for (f, (l, v)) in factors.iter().zip(g.layers.iter().zip(&g.data)) {
        assert_eq!(f.tracked(), *l);
        let dense = f.dense();
        let n = dense.rows();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| dense[(i, j)] + if i == j { 1e-3 } else { 0.0 }).collect())
            .collect();
        let want = gauss_solve(a, v.clone());
        let got = ihvp.vectors.get(*l).unwrap();
        assert!(rel(got, &want) <= 1e-8, "{l:?}: {:e}", rel(got, &want));
    }
}

#[test]
fn scores_are_additive_over_layers() {
    let p = small_model();
    let layers = model::tracked_layers(&p.config, QkvMode::Joint);
    let data = seqs(6, 8, 2, 13);
    let factors = dataselect_core::curvature::estimate_factors(&p, &data, &layers).unwrap();
    let inv = FactorInverseSet::new(&factors, 1e-3).unwrap();
    let g = model::grad_of_set(&p, &data, &layers).unwrap();
    let ihvp = influence::reference_ihvp(&g, &inv, 0).unwrap();
    let per = influence::score_per_layer(&data[0], &ihvp, &p).unwrap();
    let total = influence::score_tokens(&data[0], &ihvp, &p).unwrap();
    assert_eq!(per.len(), layers.len());
    assert!((per.iter().sum::<f64>() - total).abs() <= 1e-12 * total.abs().max(1.0));
    // The reference set scores positively against itself.
    let self_score: f64 = data.iter().map(|s| influence::score_tokens(s, &ihvp, &p).unwrap()).sum();
    assert!(self_score > 0.0);
}

#[test]
fn sketched_scores_are_deterministic_and_checked() {
    let p = small_model();
    let layers = model::tracked_layers(&p.config, QkvMode::Joint);
    let data = seqs(4, 8, 3, 13);
    let g = model::grad_of_set(&p, &data, &layers).unwrap();
    let proj = SketchProjector::rademacher(64, 9);
    let a = proj.sketch(&g);
    assert_eq!(a, proj.sketch(&g));
    let other = SketchProjector::rademacher(64, 10).sketch(&g);
    assert!(a.dot(&other).is_err());
}

#[test]
fn jl_pairs_and_unbiasedness() {
    let dim = 600;
    let k = 256;
    let mut r = rng::seeded(31, 0);
    let mut vec_of = |_| (0..dim).map(|_| rng::normal(&mut r)).collect::<Vec<f64>>();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..200).map(|i| (vec_of(i), vec_of(i))).collect();
    let eps = jl_epsilon(k, 400);
    let proj = SketchProjector::rademacher(k, 1234);
    let ok = pairs
        .iter()
        .filter(|(u, v)| {
            let exact: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let su = proj.project(0, u);
            let sv = proj.project(0, v);
            let approx: f64 = su.iter().zip(&sv).map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            (approx - exact).abs() <= eps * nu * nv
        })
        .count();
    assert!(ok >= 190, "{ok}/200 within eps={eps}");

    // Correlated pair, so the exact dot is far from zero.
    let u = &pairs[0].0;
    let v: Vec<f64> = u.iter().zip(&pairs[0].1).map(|(a, b)| a + 0.5 * b).collect();
    let exact: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let est: Vec<f64> = (0..1000)
        .map(|seed| {
            let p = SketchProjector::rademacher(k, seed);
            let su = p.project(0, u);
            let sv = p.project(0, &v);
            su.iter().zip(&sv).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mean = stats::mean(&est);
    let se = stats::std_dev(&est) / (est.len() as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "mean {mean} exact {exact} se {se}");
}

#[test]
fn joint_equals_independent_without_cross_correlation() {
    let cand = oracle::qkv_scenario_taps(QkvScenario::Uncorrelated, 4, 4, 60, 1);
    let refs = oracle::qkv_scenario_taps(QkvScenario::Uncorrelated, 4, 4, 10, 2);
    let curv = oracle::qkv_scenario_taps(QkvScenario::Uncorrelated, 4, 8, 400, 3);
    let rep = oracle::compare_methods_on_taps(&cand, &refs, &curv, 1e-3, None, 3000).unwrap();
    let j = rep.scores_of(METHOD_JOINT).unwrap();
    let i = rep.scores_of(METHOD_INDEPENDENT).unwrap();
    assert!(rel(j, i) <= 1e-6, "{:e}", rel(j, i));
}

#[test]
fn joint_beats_independent_under_correlation() {
    let sc = QkvScenario::Correlated { rho: 1.0, noise: 0.05 };
    let cand = oracle::qkv_scenario_taps(sc, 4, 4, 200, 11);
    let refs = oracle::qkv_scenario_taps(sc, 4, 4, 20, 12);
    let curv = oracle::qkv_scenario_taps(sc, 4, 8, 1000, 13);
    let rep = oracle::compare_methods_on_taps(&cand, &refs, &curv, 1e-3, None, 3000).unwrap();
    let pj = rep.get(METHOD_JOINT).unwrap().pearson;
    let pi = rep.get(METHOD_INDEPENDENT).unwrap().pearson;
    let pn = rep.get(METHOD_NO_HESSIAN).unwrap().pearson;
    assert!(pj > pi && pi > pn, "joint {pj} indep {pi} none {pn}");
}

#[test]
fn zero_sample_factor_is_singular_without_damping() {
    let f = KroneckerFactor::new(0, TapKind::MlpUp, 2, 2);
    assert!(FactorInverseSet::new(&[f.clone()], 0.0).is_err());
    assert!(FactorInverseSet::new(&[f], 1e-3).is_ok());
}
