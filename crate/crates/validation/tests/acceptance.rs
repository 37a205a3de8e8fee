//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use zero_tta::calibration::{error_gap_report, expected_calibration_error, reliability_bins};
use zero_tta::ensemble::{
    binomial_error_pmf, condorcet_profile, label_group_marginal_error, majority_error, monte_carlo_majority_error,
    risk_bound_check, EnsembleParams, LabelGroup,
};
use zero_tta::io::{
    decode_zteb, encode_zteb, evaluate_dataset, read_embedding_file, write_embedding_file, Dataset, Method,
};
use zero_tta::kernel::{confidence_filter_logits, keep_count, vote_counts, zero_predict_logits};
use zero_tta::math::{argmax_set, softmax_rows, softmax_temperature, zero_temperature_limit};
use zero_tta::memlab::{
    delta_g, invariance_sweep, mem_filter_mask, mem_gradient_masked, mem_loss_masked, run_trial, ContextVectors,
    MemConfig, ToyDims, ToyInstance,
};
use zero_tta::{
    EceMode, Error, FilterConfig, LimitMode, Matrix64, RiskLoss, Temperature, TieBreakStrategy, ZeroConfig64,
};

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        ("voting-equivalence", voting_equivalence),
        ("zero-limit-convergence", zero_limit_convergence),
        ("binomial-oracle", binomial_oracle),
        ("condorcet", condorcet),
        ("risk-bound", risk_bound),
        ("gradient-check", gradient_check),
        ("identity-recovery", identity_recovery),
        ("invariance-limit", invariance_limit),
        ("ece-fixtures", ece_fixtures),
        ("error-gap-spearman", error_gap_spearman),
        ("filter-fixture", filter_fixture),
        ("label-group-dominance", label_group_dominance),
        ("determinism", determinism),
        ("format", format),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = check();
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn voting_equivalence() -> Verdict {
    let start = Instant::now();
    let mut r = common::rng(2024);
    let mut agree = 0;
    let total = 10_000;
    for i in 0..total {
        let n = r.random_range(1..=64);
        let c = r.random_range(2..=100);
        let logits = common::distinct_logits(&mut r, n, c);
        let cfg = ZeroConfig64 {
            gamma: r.random_range(0.05..=1.0),
            seed: i,
            ..ZeroConfig64::default()
        };
        let (_, mask) = confidence_filter_logits(&logits, &cfg.filter().unwrap()).unwrap();
        let mut summed = vec![0.0; c];
        for &v in &mask.order {
            for (s, p) in summed.iter_mut().zip(zero_temperature_limit(logits.row(v)).unwrap()) {
                *s += p;
            }
        }
        let counts: Vec<f64> = vote_counts(&logits, &mask)
            .unwrap()
            .counts
            .iter()
            .map(|&k| k as f64)
            .collect();
        let result = zero_predict_logits(&logits, &cfg, i).unwrap();
        if argmax_set(&summed) == argmax_set(&counts) && argmax_set(&result.marginal) == argmax_set(&counts) {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        agree == total && secs < 10.0,
        format!("{agree}/{total} instances agree (N≤64, C≤100) in {secs:.2}s (limit 10s)"),
    )
}

fn zero_limit_convergence() -> Verdict {
    let mut r = common::rng(7);
    let taus = [1e-2, 1e-3, 1e-4];
    let mut worst_final = 0.0f64;
    let mut monotone = true;
    let mut rows = 0;
    while rows < 1000 {
        let c = r.random_range(2..=100);
        let l: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut sorted = l.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // unique maximum with a margin the smallest τ can resolve
        if sorted[0] - sorted[1] < 5e-3 {
            continue;
        }
        rows += 1;
        let limit = zero_temperature_limit(&l).unwrap();
        let d: Vec<f64> = taus
            .iter()
            .map(|&t| {
                let p = softmax_temperature(&l, Temperature::new(t).unwrap()).unwrap();
                p.iter().zip(&limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        monotone &= d.windows(2).all(|w| w[1] <= w[0]);
        worst_final = worst_final.max(d[2]);
    }
    verdict(
        monotone && worst_final < 1e-9,
        format!("1000 rows (top-two margin ≥ 5e-3), monotone={monotone}, max distance at τ=1e-4 = {worst_final:.3e} (< 1e-9)"),
    )
}

fn enumerate(n: u32, eps: f64) -> f64 {
    (0u32..1 << n)
        .filter(|o| 2 * o.count_ones() > n)
        .map(|o| eps.powi(o.count_ones() as i32) * (1.0 - eps).powi((n - o.count_ones()) as i32))
        .sum()
}

fn binomial_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for n in 1..=12u32 {
        for eps in [0.1, 0.3, 0.45] {
            let got = majority_error(&EnsembleParams::new(n as u64, eps).unwrap());
            worst = worst.max((got - enumerate(n, eps)).abs());
        }
    }
    let mut worst_z = 0.0f64;
    for (i, &(n, eps)) in [(5u64, 0.1), (11, 0.3), (12, 0.45)].iter().enumerate() {
        let p = EnsembleParams::new(n, eps).unwrap();
        let exact = majority_error(&p);
        let mc = monte_carlo_majority_error(&p, 1_000_000, 100 + i as u64).unwrap();
        let se = (exact * (1.0 - exact) / mc.trials as f64).sqrt();
        worst_z = worst_z.max((mc.estimate - exact).abs() / se);
    }
    let pmf = binomial_error_pmf(&EnsembleParams::new(5, 0.4).unwrap(), 3).unwrap();
    let maj = majority_error(&EnsembleParams::new(3, 0.4).unwrap());
    let hand = (pmf - 0.2304).abs().max((maj - 0.352).abs());
    verdict(
        worst < 1e-12 && worst_z <= 4.0 && hand < 1e-12,
        format!(
            "enumeration max |Δ| = {worst:.1e} (< 1e-12); Monte Carlo 10^6 trials max |z| = {worst_z:.2} (≤ 4); \
             hand values max |Δ| = {hand:.1e} (< 1e-12)"
        ),
    )
}

fn condorcet() -> Verdict {
    let start = Instant::now();
    let odd: Vec<u64> = (1..=21).step_by(2).collect();
    let mut ok = true;
    for i in 1..=9 {
        let low = i as f64 * 0.05;
        ok &= condorcet_profile(low, &odd).unwrap().is_strictly_decreasing();
        ok &= condorcet_profile(0.5 + low, &odd).unwrap().is_strictly_increasing();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok && secs < 1.0,
        format!("odd N in [1, 21], ε ∈ {{0.05..0.45}} decreasing and {{0.55..0.95}} increasing: {ok} in {secs:.4}s (limit 1s)"),
    )
}

fn risk_bound() -> Verdict {
    let mut r = common::rng(31);
    let mut holds = [0usize; 2];
    for _ in 0..1000 {
        let n = r.random_range(1..=64);
        let c = r.random_range(2..=50);
        let logits = common::distinct_logits(&mut r, n, c);
        let tau = r.random_range(0.005..2.0);
        let probs = softmax_rows(&logits, Temperature::new(tau).unwrap()).unwrap();
        let label = r.random_range(0..c);
        for (k, loss) in [RiskLoss::L1, RiskLoss::L2].into_iter().enumerate() {
            holds[k] += usize::from(risk_bound_check(label, &probs, loss).unwrap().holds);
        }
    }
    verdict(
        holds == [1000, 1000],
        format!(
            "bound holds on {}/1000 (L1) and {}/1000 (L2) instances",
            holds[0], holds[1]
        ),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let dims = ToyDims {
        n_views: 5,
        n_classes: 3,
        embed_dim: 8,
        ctx_dim: 2,
        n_ctx: 2,
        token_dim: 4,
    };
    let cfg = MemConfig {
        lambda: 0.1,
        tau: 0.1,
        gamma: 0.6,
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let inst = ToyInstance::from_seed(1000 + seed, 0, &dims).unwrap();
        let mask = mem_filter_mask(&inst.image_embs, &inst.encoder, &inst.ctx, &cfg).unwrap();
        let g = mem_gradient_masked(&inst.image_embs, &inst.encoder, &inst.ctx, cfg.tau, &mask).unwrap();
        for j in 0..inst.ctx.values.len() {
            let at = |delta: f64| {
                let mut v = inst.ctx.values.clone();
                v[j] += delta;
                let c = ContextVectors::new(inst.ctx.n_ctx, inst.ctx.ctx_dim, v).unwrap();
                mem_loss_masked(&inst.image_embs, &inst.encoder, &c, cfg.tau, &mask).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let a = g.values[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-6 && secs < 30.0,
        format!(
            "100 instances (N=5, C=3, D=8), h=1e-5: max relative error {worst:.2e} (< 1e-6) in {secs:.2}s (limit 30s)"
        ),
    )
}

fn identity_recovery() -> Verdict {
    // γ = 1 keeps all N views, so the marginal is the plain mean over N
    let cfg = MemConfig {
        gamma: 1.0,
        ..MemConfig::default()
    };
    let dims = ToyDims::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let out = run_trial(ToyInstance::from_seed(seed, 0, &dims).unwrap(), &cfg, seed).unwrap();
        let inst = &out.instance;
        let n = inst.image_embs.rows() as f64;
        for c in 0..out.marginal_pre.len() {
            let sum: f64 = (0..inst.image_embs.rows())
                .map(|i| {
                    delta_g(
                        c,
                        inst.image_embs.row(i),
                        &inst.encoder,
                        &inst.ctx,
                        &out.ctx_post,
                        cfg.tau,
                    )
                    .unwrap()
                })
                .sum();
            let recovered = out.marginal_pre[c] - sum / n;
            worst = worst.max((recovered - out.marginal_post[c]).abs());
        }
    }
    verdict(
        worst < 1e-12,
        format!("100 instances, one step at λ=0.1: max |Δ| = {worst:.2e} (< 1e-12)"),
    )
}

fn invariance_limit() -> Verdict {
    let dims = ToyDims::default();
    let base = MemConfig::default();
    let at =
        |lambda: f64, trials: usize| invariance_sweep(trials, &dims, &MemConfig { lambda, ..base }, 10, 0).unwrap();
    let tiny = at(1e-6, 1000).invariance_ratio;
    let ratios: Vec<f64> = [0.1, 0.01, 0.001]
        .iter()
        .map(|&l| at(l, 1000).invariance_ratio)
        .collect();
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    let trend = at(0.1, 5000).trend_spearman;
    let trend_ok = trend.is_some_and(|s| s >= 0.0);
    verdict(
        tiny == 1.0 && monotone && trend_ok,
        format!(
            "λ=1e-6 ratio {tiny:.4} (= 1); λ=0.1/0.01/0.001 ratios {:.4}/{:.4}/{:.4} (non-decreasing: {monotone}); \
             5000-trial entropy-bin Spearman {} (≥ 0)",
            ratios[0],
            ratios[1],
            ratios[2],
            trend.map_or("undefined (constant ratios)".to_string(), |s| format!("{s:.3}"))
        ),
    )
}

fn ece_fixtures() -> Verdict {
    let single = reliability_bins(&[0.95; 4], &[true, true, true, false], 20).unwrap();
    let single_ece: f64 = expected_calibration_error(&single, EceMode::PaperUnweighted).unwrap();

    let (mut conf, mut correct) = (Vec::new(), Vec::new());
    for k in 0..10 {
        let c = (2 * k + 1) as f64 / 20.0;
        for s in 0..40 {
            conf.push(c);
            correct.push(s < (2 * k + 1) * 2);
        }
    }
    let calibrated = reliability_bins(&conf, &correct, 10).unwrap();
    let calibrated_ece: f64 = expected_calibration_error(&calibrated, EceMode::PaperUnweighted)
        .unwrap()
        .max(expected_calibration_error(&calibrated, EceMode::CountWeighted).unwrap());

    // bin 0: 10 samples at 0.3, 4 correct; bin 1: 30 samples at 0.9, 18 correct
    let (mut conf, mut correct) = (vec![0.3; 10], Vec::new());
    conf.extend([0.9; 30]);
    correct.extend((0..10).map(|i| i < 4));
    correct.extend((0..30).map(|i| i < 18));
    let two = reliability_bins(&conf, &correct, 2).unwrap();
    let w: f64 = expected_calibration_error(&two, EceMode::CountWeighted).unwrap();
    let u: f64 = expected_calibration_error(&two, EceMode::PaperUnweighted).unwrap();

    let pass = (single_ece - 0.2).abs() < 1e-12
        && calibrated_ece.abs() < 1e-12
        && (w - 0.25).abs() < 1e-12
        && (u - 0.2).abs() < 1e-12;
    verdict(
        pass,
        format!("single bin {single_ece:.12} (0.20); calibrated {calibrated_ece:.1e} (0); two-bin weighted {w:.12} (0.25) / unweighted {u:.12} (0.20)"),
    )
}

fn error_gap_spearman() -> Verdict {
    // zero-shot, augmented, ZERO top-1 for FLWR DTD PETS CARS UCF CAL FOOD SUN AIR
    let zero_shot: [f64; 9] = [67.44, 44.27, 88.25, 65.48, 65.13, 93.35, 83.65, 62.59, 23.67];
    let augmented = [66.19, 44.90, 86.17, 65.88, 65.59, 92.62, 83.25, 62.97, 23.52];
    let zero = [67.07, 45.80, 86.74, 67.54, 67.64, 93.51, 84.36, 64.49, 24.40];
    let report = error_gap_report(&zero_shot, &augmented, &zero).unwrap();
    let rho: f64 = report.spearman.unwrap();
    verdict(
        (rho + 0.95).abs() <= 0.01,
        format!("Spearman over the nine (gap, improvement) pairs = {rho:.4} (target -0.95 ± 0.01)"),
    )
}

fn filter_fixture() -> Verdict {
    let mut r = common::rng(64);
    let logits = common::distinct_logits(&mut r, 64, 10);
    let kept = |gamma: f64| {
        let (_, mask) = confidence_filter_logits(&logits, &FilterConfig::new(gamma, 0.01).unwrap()).unwrap();
        (keep_count(64, gamma), mask.kept_count())
    };
    let (a, b) = (kept(0.1), kept(0.3));
    verdict(
        a == (6, 6) && b == (19, 19),
        format!("N=64: γ=0.1 keeps {} (6), γ=0.3 keeps {} (19)", a.1, b.1),
    )
}

fn label_group_dominance() -> Verdict {
    let classes = 10;
    let (mut sum_marginal, mut sum_eps, mut sum_base) = (0.0, 0.0, 0.0);
    let mut seeds_ok = 0;
    for seed in 0..100 {
        let mut r = common::rng(5000 + seed);
        let mut groups = Vec::new();
        let mut eps_total = 0.0;
        for y in 0..classes {
            let eps: f64 = r.random_range(0.05..0.45);
            eps_total += eps;
            let size = r.random_range(15..=40);
            let rows: Vec<Vec<f64>> = (0..size)
                .map(|_| {
                    // calibrated: confidence 1−ε on the predicted class, which is right w.p. 1−ε
                    let predicted = if r.random_bool(1.0 - eps) {
                        y
                    } else {
                        let k = r.random_range(0..classes - 1);
                        if k >= y {
                            k + 1
                        } else {
                            k
                        }
                    };
                    (0..classes)
                        .map(|c| {
                            if c == predicted {
                                1.0 - eps
                            } else {
                                eps / (classes - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            groups.push(LabelGroup {
                label: y,
                predictions: Matrix64::from_rows(&rows).unwrap(),
            });
        }
        let report = label_group_marginal_error(&groups).unwrap();
        let mean_eps = eps_total / classes as f64;
        seeds_ok += usize::from(report.mean_marginal_error <= mean_eps);
        sum_marginal += report.mean_marginal_error;
        sum_base += report.mean_base_error;
        sum_eps += mean_eps;
    }
    let (m, e, b) = (sum_marginal / 100.0, sum_eps / 100.0, sum_base / 100.0);
    verdict(
        m <= e,
        format!("100 seeds, 10 labels, groups of 15-40: mean marginal error {m:.4} ≤ mean ε(y) {e:.4} (empirical base error {b:.4}; {seeds_ok}/100 seeds individually)"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = common::random_fixture(dir.path(), 77, 120, 16, 6, 8);
    let ds = Dataset::load(&path).unwrap();
    let cfg = ZeroConfig64 {
        gamma: 0.25,
        strategy: TieBreakStrategy::Random,
        seed: 3,
        limit: LimitMode::Analytic,
        ..ZeroConfig64::default()
    };
    let a = evaluate_dataset(&ds, &Method::ALL, &cfg).unwrap().to_json().unwrap();
    let b = evaluate_dataset(&ds, &Method::ALL, &cfg).unwrap().to_json().unwrap();
    let identical = a == b;

    let mut shuffled = ds.manifest.clone();
    shuffled.samples.shuffle(&mut common::rng(8));
    let shuffled_path = dir.path().join("shuffled.json");
    fs::write(&shuffled_path, shuffled.to_json().unwrap()).unwrap();
    let s = evaluate_dataset(&Dataset::load(&shuffled_path).unwrap(), &Method::ALL, &cfg).unwrap();
    let base = evaluate_dataset(&ds, &Method::ALL, &cfg).unwrap();
    let ties = base.summary(Method::Zero).unwrap().ties;
    let unchanged = s.predictions == base.predictions && s.methods == base.methods;
    verdict(
        identical && unchanged,
        format!("rerun byte-identical: {identical}; shuffled records give identical predictions: {unchanged} (120 samples, {ties} random tie-breaks)"),
    )
}

fn format() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let m = common::unit_rows(&[
        vec![1.0, 2.0, 3.0, 4.0],
        vec![-0.5, 0.25, 0.0, 1.0],
        vec![0.3, 0.3, -0.9, 0.1],
    ])
    .cast::<f32>();
    let path = dir.path().join("m.zteb");
    write_embedding_file(&m, &path).unwrap();
    let back = read_embedding_file::<f32>(&path).unwrap();
    let bits = |e: &zero_tta::EmbeddingMatrix32| -> Vec<u32> {
        e.as_matrix().as_slice().iter().map(|x| x.to_bits()).collect()
    };
    let roundtrip = bits(&m) == bits(&back);
    let (_, payload) = decode_zteb(&fs::read(&path).unwrap()).unwrap();
    let raw = payload.iter().map(|x| x.to_bits()).collect::<Vec<_>>() == bits(&m);

    let good = fs::read(&path).unwrap();
    let corrupt = |name: &str, f: &dyn Fn(&mut Vec<u8>)| {
        let mut bytes = good.clone();
        f(&mut bytes);
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        match read_embedding_file::<f64>(&p) {
            Err(Error::File { source, .. }) => Some(*source),
            _ => None,
        }
    };
    let checks = [
        matches!(
            corrupt("magic.zteb", &|b| b[0] = b'X'),
            Some(Error::BadMagic { offset: 0, .. })
        ),
        matches!(
            corrupt("version.zteb", &|b| b[4] = 9),
            Some(Error::UnsupportedVersion { offset: 4, found: 9 })
        ),
        matches!(
            corrupt("dtype.zteb", &|b| b[6] = 2),
            Some(Error::UnsupportedDtype { offset: 6, found: 2 })
        ),
        {
            let p = dir.path().join("short.zteb");
            let mut bytes = encode_zteb(&[2, 3], &[0.0; 6]).unwrap();
            bytes.truncate(bytes.len() - 4);
            fs::write(&p, bytes).unwrap();
            matches!(
                read_embedding_file::<f64>(&p),
                Err(Error::File { source, .. }) if matches!(*source, Error::TruncatedPayload { expected: 24, actual: 20, .. })
            )
        },
        {
            let p = dir.path().join("norm.zteb");
            fs::write(&p, encode_zteb(&[1, 2], &[1.0, 0.5]).unwrap()).unwrap();
            matches!(
                read_embedding_file::<f64>(&p),
                Err(Error::File { source, .. }) if matches!(*source, Error::NotUnitNorm { row: 0, .. })
            )
        },
    ];
    let rejected = checks.iter().filter(|&&c| c).count();
    verdict(
        roundtrip && raw && rejected == 5,
        format!("3x4 roundtrip bitwise: {}; malformed files rejected with the documented error: {rejected}/5 (magic, version, dtype, truncated payload, norm)", roundtrip && raw),
    )
}
