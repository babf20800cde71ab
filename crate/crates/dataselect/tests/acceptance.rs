//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dataselect::experiment::{run_end_to_end, write_synthetic, EndToEndConfig};
use dataselect::pipeline::{self, gradient_check};
use dataselect_core::bandit::{self, BanditConfig, BanditState, Policy};
use dataselect_core::clustering::{self, KMeansParams};
use dataselect_core::corpus::EmbeddingCorpus;
use dataselect_core::curvature::DampedFactorInverse;
use dataselect_core::influence::{jl_epsilon, SketchProjector};
use dataselect_core::linalg::Mat;
use dataselect_core::model::{ModelConfig, ParamSet, TapKind};
use dataselect_core::oracle::{self, QkvScenario, METHOD_INDEPENDENT, METHOD_JOINT, METHOD_NO_HESSIAN};
use dataselect_core::{rng, stats};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn random_spd(n: usize, r: &mut rng::DetRng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng::normal(r)).collect()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() / n as f64 + if i == j { 0.5 } else { 0.0 })
                .collect()
        })
        .collect()
}

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

fn c1() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(101, 0);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for trial in 0..100 {
        let d_out = 1 + trial % 8;
        let d_in = 1 + (trial / 8 + trial) % 8;
        let delta = random_spd(d_out, &mut r);
        let x = random_spd(d_in, &mut r);
        let v: Vec<f64> = (0..d_out * d_in).map(|_| rng::normal(&mut r)).collect();
        let dm = Mat::from_fn(d_out, d_out, |i, j| delta[i][j]);
        let xm = Mat::from_fn(d_in, d_in, |i, j| x[i][j]);
        for lambda in [0.0, 1e-3, 1e-1] {
            let n = d_out * d_in;
            let dense: Vec<Vec<f64>> = (0..n)
                .map(|a| {
                    (0..n)
                        .map(|b| delta[a / d_in][b / d_in] * x[a % d_in][b % d_in] + if a == b { lambda } else { 0.0 })
                        .collect()
                })
                .collect();
            let want = gauss_solve(dense, v.clone());
            let got = DampedFactorInverse::from_matrices(0, TapKind::MlpUp, &dm, &xm, lambda)
                .and_then(|inv| inv.kron_ihvp(&v));
            match got {
                Ok(g) => worst = worst.max(rel(&g, &want)),
                Err(e) => return outcome(false, format!("error {e}")),
            }
            pairs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pairs >= 100 && worst <= 1e-10 && secs < 10.0,
        format!("{pairs} pairs, max rel err {worst:.3e} (tol 1e-10), {secs:.2}s (limit 10s)"),
    )
}

fn c2() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 32,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_context: 16,
        mlp_ratio: 2.0,
        rope_base: 10_000.0,
        gated_mlp: false,
    };
    let params = ParamSet::init(&cfg, 7).unwrap();
    let n_params = params.flatten().len();
    let mut r = rng::seeded(8, 0);
    let tokens: Vec<u32> = (0..12).map(|_| (rng::normal(&mut r).abs() * 9.0) as u32 % 32).collect();
    let (fd, coords, tap) = match gradient_check(&params, &tokens, usize::MAX, 0) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("error {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    outcome(
        n_params <= 10_000 && coords == n_params && fd <= 1e-6 && tap <= 1e-12 && secs < 60.0,
        format!(
            "{n_params} params, {coords} coords, fd rel err {fd:.3e} (tol 1e-6), tap rel err {tap:.3e} (tol 1e-12), {secs:.2}s (limit 60s)"
        ),
    )
}

fn c3() -> Outcome {
    let start = Instant::now();
    let compare = |sc: QkvScenario, base: u64| {
        let cand = oracle::qkv_scenario_taps(sc, 4, 4, 200, base);
        let refs = oracle::qkv_scenario_taps(sc, 4, 4, 20, base + 1);
        let curv = oracle::qkv_scenario_taps(sc, 4, 8, 1000, base + 2);
        oracle::compare_methods_on_taps(&cand, &refs, &curv, 1e-3, None, 3000)
    };
    let (un, co) = match (compare(QkvScenario::Uncorrelated, 300), compare(QkvScenario::Correlated { rho: 1.0, noise: 0.05 }, 400)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("error {e}")),
    };
    let diff = rel(un.scores_of(METHOD_JOINT).unwrap(), un.scores_of(METHOD_INDEPENDENT).unwrap());
    let pj = co.get(METHOD_JOINT).unwrap().pearson;
    let pi = co.get(METHOD_INDEPENDENT).unwrap().pearson;
    let pn = co.get(METHOD_NO_HESSIAN).unwrap().pearson;
    let n = co.scores_of(METHOD_JOINT).unwrap().len();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        diff <= 1e-6 && pj > pi && pi > pn && n >= 200 && secs < 300.0,
        format!(
            "uncorrelated joint vs independent rel diff {diff:.3e} (tol 1e-6); correlated pearson joint {pj:.4} > independent {pi:.4} > no-hessian {pn:.4} over {n} candidates, {secs:.2}s (limit 300s)"
        ),
    )
}

fn c4() -> Outcome {
    let start = Instant::now();
    let means = pipeline::simulation_means(20);
    let mut best = 0;
    let mut falling = 0;
    for trial in 0..100u64 {
        let tr = match bandit::simulate(Policy::Ucb { alpha: 1.0 }, &means, 1.0, 1000, rng::mix(0, trial)) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("error {e}")),
        };
        best += usize::from(tr.most_pulled() == 19);
        falling += usize::from(tr.mean_regret(900..1000) < tr.mean_regret(0..100));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        best >= 95 && falling == 100 && secs < 30.0,
        format!("best arm most pulled {best}/100 (need 95), late regret below early {falling}/100 (need 100), {secs:.2}s (limit 30s)"),
    )
}

fn c5() -> Outcome {
    let mut s = BanditState::new(2, BanditConfig { alpha: 0.002, ..BanditConfig::default() }).unwrap();
    for _ in 0..4 {
        s.update(0, 0.003);
    }
    for _ in 0..96 {
        s.update(1, 0.0);
    }
    let got = s.cluster_score(0);
    let formula = 0.003 + 0.002 * (2.0 * 100f64.ln() / 4.0).sqrt();
    let err = (got - formula).abs();
    outcome(
        err <= 1e-12 && (got - 0.006_035_0).abs() < 1e-6,
        format!("score {got:.10} vs formula {formula:.10}, abs err {err:.3e} (tol 1e-12), rounded reference 0.0060350 within 1e-6"),
    )
}

fn c6() -> Outcome {
    let mut monotone = 0;
    for seed in 0..100u64 {
        let mut r = rng::seeded(seed, 6);
        let n = 30 + (seed as usize * 13) % 120;
        let dim = 1 + seed as usize % 6;
        let v: Vec<f64> = (0..n * dim).map(|_| rng::normal(&mut r)).collect();
        let corpus = EmbeddingCorpus::from_rows(dim, v).unwrap();
        let k = 2 + seed as usize % 9;
        let ok = clustering::kmeans_traced(&corpus, &KMeansParams { k, seed, ..Default::default() })
            .map(|run| run.objectives.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)))
            .unwrap_or(false);
        monotone += usize::from(ok);
    }
    let centers = [[0.0, 0.0, 0.0], [6.0, 0.0, 1.0], [0.0, 7.0, -2.0]];
    let mut r = rng::seeded(66, 0);
    let mut v = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        labels.push(i % 3);
        v.extend(centers[i % 3].iter().map(|m| m + 0.05 * rng::normal(&mut r)));
    }
    let corpus = EmbeddingCorpus::from_rows(3, v).unwrap();
    let m = clustering::kmeans(&corpus, &KMeansParams { k: 3, seed: 66, ..Default::default() }).unwrap();
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut agree = 0;
    for (i, &l) in labels.iter().enumerate() {
        let c = m.cluster_of(i as u64);
        if *map.entry(l).or_insert(c) == c {
            agree += 1;
        }
    }
    let distinct = map.values().collect::<std::collections::BTreeSet<_>>().len();
    let recovery = if distinct == 3 { agree as f64 / 300.0 } else { 0.0 };
    outcome(
        monotone == 100 && recovery == 1.0,
        format!("objective non-increasing on {monotone}/100 instances, 3-blob recovery {:.1}%", 100.0 * recovery),
    )
}

fn c7() -> Outcome {
    let dim = 600;
    let k = 256;
    let mut r = rng::seeded(77, 0);
    let mut draw = || (0..dim).map(|_| rng::normal(&mut r)).collect::<Vec<f64>>();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..200).map(|_| (draw(), draw())).collect();
    let eps = jl_epsilon(k, 400);
    let proj = SketchProjector::rademacher(k, 4321);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let within = pairs
        .iter()
        .filter(|(u, v)| {
            let approx = dot(&proj.project(0, u), &proj.project(0, v));
            (approx - dot(u, v)).abs() <= eps * dot(u, u).sqrt() * dot(v, v).sqrt()
        })
        .count();
    let u = &pairs[1].0;
    let v: Vec<f64> = u.iter().zip(&pairs[1].1).map(|(a, b)| a + 0.5 * b).collect();
    let exact = dot(u, &v);
    let est: Vec<f64> = (0..1000u64)
        .map(|s| {
            let p = SketchProjector::rademacher(k, s);
            dot(&p.project(0, u), &p.project(0, &v))
        })
        .collect();
    let mean = stats::mean(&est);
    let se = stats::std_dev(&est) / (est.len() as f64).sqrt();
    let z = (mean - exact).abs() / se;
    outcome(
        within >= 190 && z <= 3.0,
        format!("{within}/200 pairs within eps {eps:.4} (need 190), mean over 1000 seeds off by {z:.2} SE (limit 3)"),
    )
}

fn c8() -> Outcome {
    let start = Instant::now();
    let mut beats_random = 0;
    let mut beats_topk = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        match run_end_to_end(&EndToEndConfig::standard(seed)) {
            Ok(r) => {
                beats_random += usize::from(r.quad_loss < r.random_loss);
                beats_topk += usize::from(r.quad_loss < r.topk_loss);
                rows.push(format!("s{seed} {:.3}/{:.3}/{:.3}", r.quad_loss, r.random_loss, r.topk_loss));
            }
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        beats_random >= 4 && beats_topk >= 3 && secs < 900.0,
        format!(
            "beats random {beats_random}/5 (need 4), beats top-k-clusters {beats_topk}/5 (need 3); quad/random/topk loss {}; {secs:.1}s (limit 900s)",
            rows.join(", ")
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn c9() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = match write_synthetic(dir.path(), 2000, 9) {
        Ok(_) => dir.path().join("run.cfg"),
        Err(e) => return outcome(false, format!("corpus: {e}")),
    };
    let cfg = cfg_path.to_str().unwrap();
    let overrides = ["cluster.k=16", "bandit.budget=200", "train.steps=40", "simulate.trials=20"];
    let commands = ["cluster", "score", "select", "oracle-check", "simulate-bandit", "report"];
    let out = dir.path().join("out");
    let run = |cmd: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dataselect"));
        c.args([cmd, "-c", cfg]);
        for o in overrides {
            c.args(["--set", o]);
        }
        c.output().map(|o| o.status.code() == Some(0)).unwrap_or(false)
    };
    let mut failures = Vec::new();
    let mut last = BTreeMap::new();
    for cmd in commands {
        if !run(cmd) {
            return outcome(false, format!("{cmd} failed"));
        }
        let first = snapshot(&out);
        if !run(cmd) {
            return outcome(false, format!("{cmd} rerun failed"));
        }
        let second = snapshot(&out);
        if first != second {
            failures.push(cmd);
        }
        last = second;
    }
    let files = last.len();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} commands re-run, {files} output files byte-identical, {secs:.1}s", commands.len())
        } else {
            format!("outputs differ after re-running: {}", failures.join(", "))
        },
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, c1),
        (2, c2),
        (3, c3),
        (4, c4),
        (5, c5),
        (6, c6),
        (7, c7),
        (8, c8),
        (9, c9),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let o = f();
        failed += usize::from(!o.pass);
        println!("criterion {n}: {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
