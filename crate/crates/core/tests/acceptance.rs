//! Acceptance criteria, one test per criterion. Each prints a
//! `criterion N: PASS|FAIL` line straight to stdout, so the verdicts show
//! even when the harness captures test output.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use moe_compress::basis::{Activation, FactorProblem};
use moe_compress::io::{load_compressed, load_model, save_compressed, save_model};
use moe_compress::linalg::Matrix;
use moe_compress::model::{generate_synthetic, MoEModel, SyntheticSpec};
use moe_compress::pipeline::{
    compress_model, evaluate, generate_tokens, run_calibration, AllocationMode, CompressedModel,
    PipelineConfig, TokenPreset,
};
use moe_compress::residual::build_projection;
use moe_compress::routing::{build_group_plan, TraceFile};
use moe_compress::spectral::{allocate_ranks, effective_rank, fuse_importance, rank_budget};

/// Heavy criteria take turns so that their timings are not inflated by
/// each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn verdict(n: u32, name: &str, ok: bool, elapsed: Duration, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n}: {status} {name} ({:.2}s) {detail}",
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn criterion_1_isometry() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_norm: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    let mut gram_ok = true;
    let mut dense_checked = 0;
    for i in 0..50u64 {
        let d = if i < 25 { rng.random_range(10..=10_000usize) } else { rng.random_range(10_000..=100_000usize) };
        let a = rng.random_range(1..=(d / 10).max(1));
        let p = build_projection(d, a, 1000 + i).unwrap();
        gram_ok &= p.gram_check() == 0.0;

        let mut eta: Vec<f64> = (0..a).map(|_| normal(&mut rng)).collect();
        let len = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        eta.iter_mut().for_each(|v| *v /= len);
        let y = p.apply(&eta).unwrap();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((ny - 1.0).abs());

        if d <= 10_000 {
            // Dense oracle: build every row of P from the index map alone.
            let pi = p.index_map();
            let mut hits = vec![0usize; a];
            pi.iter().for_each(|&q| hits[q as usize] += 1);
            let mut row = vec![0.0; a];
            for t in 0..d {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[pi[t] as usize] = 1.0 / (hits[pi[t] as usize] as f64).sqrt();
                let want: f64 = row.iter().zip(&eta).map(|(r, e)| r * e).sum();
                worst_dense = worst_dense.max((want - y[t]).abs());
            }
            dense_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = gram_ok
        && worst_norm <= 1e-12
        && worst_dense <= 1e-13
        && dense_checked > 0
        && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "isometry",
        ok,
        elapsed,
        &format!("gram_exact={gram_ok} norm_err={worst_norm:.2e} dense_err={worst_dense:.2e} dense_pairs={dense_checked}"),
    );
}

#[test]
fn criterion_2_effective_rank() {
    let start = Instant::now();
    let mut worst_equal: f64 = 0.0;
    for r in 1..=64 {
        worst_equal = worst_equal.max((effective_rank(&vec![0.7; r]).unwrap() - r as f64).abs());
    }
    let rank_one = (effective_rank(&[3.0, 0.0, 0.0, 0.0]).unwrap() - 1.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_scale: f64 = 0.0;
    for _ in 0..100 {
        let s: Vec<f64> = (0..rng.random_range(1..30)).map(|_| rng.random_range(0.01..5.0)).collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        worst_scale = worst_scale.max((effective_rank(&s).unwrap() - effective_rank(&scaled).unwrap()).abs());
    }
    // exp(H) with p = (0.8, 0.2), evaluated to 40 digits with mpmath.
    let oracle = 1.649_384_888_466_117_8;
    let two_one = (effective_rank(&[2.0, 1.0]).unwrap() - oracle).abs();
    let elapsed = start.elapsed();
    let ok = worst_equal <= 1e-9
        && rank_one <= 1e-12
        && worst_scale <= 1e-10
        && two_one <= 1e-4
        && elapsed < Duration::from_secs(1);
    verdict(
        2,
        "effective rank",
        ok,
        elapsed,
        &format!("equal={worst_equal:.1e} rank1={rank_one:.1e} scale={worst_scale:.1e} [2,1]={two_one:.1e}"),
    );
}

#[test]
fn criterion_3_eckart_young() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let (p, d) = (rng.random_range(2..8usize), rng.random_range(3..12usize));
        let targets: Vec<Matrix> = (0..2)
            .map(|_| Matrix::from_fn(p, d, |_, _| normal(&mut rng)))
            .collect();
        let stacked = Matrix::vstack(&[&targets[0], &targets[1]]).unwrap();
        // Gaussian matrices have full rank, so any k below it leaves a
        // nonzero tail to compare against.
        let r = (2 * p).min(d);
        let k = 1 + (i as usize) % (r - 1);
        let plan = build_group_plan(&[0.5, 0.5], 2).unwrap();
        let prob = FactorProblem::new(targets, plan, Activation::Identity, None).unwrap();
        let init = prob.initialize(&[k], 0).unwrap();
        let loss = prob.loss(&init).unwrap();
        let gram = stacked.transpose().matmul(&stacked).unwrap();
        let eig = symmetric_eigenvalues(&gram);
        let tail: f64 = eig[k..].iter().map(|v| v.max(0.0)).sum();
        let (a, b) = (loss.sqrt(), tail.sqrt());
        worst = worst.max((a - b).abs() / b.max(1e-300));
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-8 && elapsed < Duration::from_secs(5);
    verdict(3, "eckart-young", ok, elapsed, &format!("worst_rel={worst:.2e}"));
}

#[test]
fn criterion_4_gradients() {
    let start = Instant::now();
    let (n, k, p, d) = (4, 2, 6, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let targets: Vec<Matrix> = (0..n).map(|_| Matrix::from_fn(p, d, |_, _| normal(&mut rng))).collect();
    let plan = build_group_plan(&[0.4, 0.3, 0.2, 0.1], k).unwrap();
    let proj = Arc::new(build_projection(k * p * d, 12, 9).unwrap());
    let prob = FactorProblem::new(targets, plan, Activation::Silu, Some(proj)).unwrap();
    let mut params = prob.initialize(&[4, 3], 12).unwrap();
    let flat: Vec<f64> = params.to_flat().iter().map(|v| v + 0.2 * normal(&mut rng)).collect();
    params.set_flat(&flat);
    let errs = prob.finite_difference_blocks(&params, 1e-5).unwrap();
    let elapsed = start.elapsed();
    let ok = errs.iter().all(|&e| e <= 1e-4) && elapsed < Duration::from_secs(30);
    verdict(
        4,
        "gradients",
        ok,
        elapsed,
        &format!("A={:.1e} B={:.1e} alpha={:.1e} eta={:.1e}", errs[0], errs[1], errs[2], errs[3]),
    );
}

#[test]
fn criterion_5_allocation() {
    let start = Instant::now();
    let repair = allocate_ranks(&[0.98, 0.01, 0.005, 0.005], 8, &[64; 4]).unwrap();
    let repair_ok = repair.raw == vec![7, 1, 1, 1] && repair.ranks == vec![5, 1, 1, 1];
    let budget_ok = rank_budget(8, 4, 8, 16, 0.5, 0.03).unwrap().k_total == 9;

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut invariants_ok = true;
    let mut worst_simplex: f64 = 0.0;
    for _ in 0..500 {
        let m = rng.random_range(1..16);
        let e: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let f: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let (se, sf) = (e.iter().sum::<f64>(), f.iter().sum::<f64>());
        let e: Vec<f64> = e.iter().map(|v| v / se).collect();
        let f: Vec<f64> = f.iter().map(|v| v / sf).collect();
        let c = fuse_importance(&e, &f, rng.random_range(0.0..=1.0)).unwrap();
        worst_simplex = worst_simplex.max((c.iter().sum::<f64>() - 1.0).abs());
        let k_total = m + rng.random_range(0..100);
        let caps: Vec<usize> = (0..m).map(|_| rng.random_range(1..40)).collect();
        let a = allocate_ranks(&c, k_total, &caps).unwrap();
        invariants_ok &= a.ranks.iter().zip(&caps).all(|(&r, &cap)| r >= 1 && r <= cap);
        invariants_ok &= a.total() <= k_total;
    }
    let elapsed = start.elapsed();
    let ok = repair_ok && budget_ok && invariants_ok && worst_simplex <= 1e-12;
    verdict(
        5,
        "allocation",
        ok,
        elapsed,
        &format!(
            "repair={:?}->{:?} invariants={invariants_ok} simplex_err={worst_simplex:.1e}",
            repair.raw, repair.ranks
        ),
    );
}

fn demo() -> (MoEModel, TraceFile, Vec<Vec<f64>>) {
    let model = generate_synthetic(&SyntheticSpec::demo()).unwrap();
    let trace = run_calibration(&model, &generate_tokens(model.d, 10_000, 1, TokenPreset::Gaussian)).unwrap();
    let heldout = generate_tokens(model.d, 1_000, 1_000_003, TokenPreset::Gaussian);
    (model, trace, heldout)
}

fn demo_config(allocation: AllocationMode, residual_fraction: f64) -> PipelineConfig {
    PipelineConfig {
        ratio: 0.4,
        xi: 0.7,
        k: 4,
        residual_fraction,
        allocation,
        ..PipelineConfig::default()
    }
}

fn single_threaded() {
    std::env::set_var("RFID_THREADS", "1");
}

#[test]
fn criterion_6_adaptive_beats_uniform() {
    let _turn = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    single_threaded();
    let start = Instant::now();
    let (model, trace, heldout) = demo();
    let adaptive = compress_model(&model, &trace, &demo_config(AllocationMode::Adaptive, 0.03)).unwrap();
    let uniform = compress_model(&model, &trace, &demo_config(AllocationMode::Uniform, 0.03)).unwrap();
    let ra = evaluate(&model, &adaptive, &heldout, false).unwrap();
    let ru = evaluate(&model, &uniform, &heldout, false).unwrap();
    let same_budget = adaptive
        .layers
        .iter()
        .zip(&uniform.layers)
        .flat_map(|(a, u)| a.kinds.iter().zip(&u.kinds))
        .all(|(a, u)| a.budget == u.budget);
    let elapsed = start.elapsed();
    let ok = same_budget
        && ra.weighted_error <= ru.weighted_error
        && ra.forward_error <= ru.forward_error
        && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "adaptive vs uniform",
        ok,
        elapsed,
        &format!(
            "weighted_error adaptive={:.6} uniform={:.6}; forward_error adaptive={:.6} uniform={:.6}; \
             params adaptive={} uniform={}",
            ra.weighted_error,
            ru.weighted_error,
            ra.forward_error,
            ru.forward_error,
            ra.parameters.compressed,
            ru.parameters.compressed
        ),
    );
}

#[test]
fn criterion_7_residual_reconstruction() {
    let _turn = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    single_threaded();
    let start = Instant::now();
    let (model, trace, _) = demo();
    let on = compress_model(&model, &trace, &demo_config(AllocationMode::Adaptive, 0.03)).unwrap();
    let off = compress_model(&model, &trace, &demo_config(AllocationMode::Adaptive, 0.0)).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (l, (a, b)) in on.layers.iter().zip(&off.layers).enumerate() {
        for (x, y) in a.kinds.iter().zip(&b.kinds) {
            // Both runs get the same float target; residuals take their
            // share out of the rank budget.
            assert_eq!(x.budget.target_params, y.budget.target_params);
            ok &= x.stats.trained_loss <= y.stats.trained_loss;
            detail.push(format!(
                "L{l}.{} on={:.4} off={:.4} (K_total {} vs {})",
                x.kind, x.stats.trained_loss, y.stats.trained_loss, x.budget.k_total, y.budget.k_total
            ));
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    verdict(7, "residual on vs off", ok, elapsed, &detail.join("; "));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_determinism_and_integrity() {
    let _turn = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (model, trace, _) = demo();
    let config = demo_config(AllocationMode::Adaptive, 0.03);
    let run = |dir: &Path| -> CompressedModel {
        let c = compress_model(&model, &trace, &config).unwrap();
        save_compressed(&c, dir).unwrap();
        c
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    run(b.path());
    let identical = dir_bytes(a.path()) == dir_bytes(b.path());

    let loaded = load_compressed(a.path()).unwrap();
    let c = tempfile::tempdir().unwrap();
    save_compressed(&loaded, c.path()).unwrap();
    let compressed_exact = loaded == first && dir_bytes(c.path()) == dir_bytes(a.path());

    let (m1, m2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_model(&model, m1.path()).unwrap();
    let back = load_model(m1.path()).unwrap();
    save_model(&back, m2.path()).unwrap();
    let model_exact = back == model && dir_bytes(m1.path()) == dir_bytes(m2.path());

    let blob = a.path().join("tensors/layer1.up.A.5.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 0x01;
    std::fs::write(&blob, bytes).unwrap();
    let corrupt = load_compressed(a.path()).map(|_| ()).unwrap_err();
    let detected = corrupt.code() == "integrity" && corrupt.to_string().contains("layer1.up.A.5");

    let elapsed = start.elapsed();
    let ok = identical && compressed_exact && model_exact && detected && elapsed < Duration::from_secs(120);
    verdict(
        8,
        "determinism and integrity",
        ok,
        elapsed,
        &format!(
            "identical_runs={identical} compressed_round_trip={compressed_exact} \
             model_round_trip={model_exact} corruption_detected={detected}"
        ),
    );
}

#[test]
fn criterion_9_routing_conservation() {
    let start = Instant::now();
    let model = generate_synthetic(&SyntheticSpec::demo()).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (seed, tokens) in [(1u64, 1_000usize), (2, 4_321), (3, 10_000)] {
        let trace = run_calibration(&model, &generate_tokens(model.d, tokens, seed, TokenPreset::Gaussian)).unwrap();
        for layer in &trace.layers {
            ok &= layer.total() == (tokens * model.top_k) as u64;
        }
        detail.push(format!(
            "seed {seed}: {:?} vs {}",
            trace.layers.iter().map(|l| l.total()).collect::<Vec<_>>(),
            tokens * model.top_k
        ));
    }
    verdict(9, "routing conservation", ok, start.elapsed(), &detail.join("; "));
}
