//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line. Everything runs at the library defaults (a=2, b=1.5,
//! d=10^4, M=64, N=512, L=512, sigma=1, gamma=0.05, R=100, seed 0) unless a
//! criterion pins something else.

use batchlaw::cli::config::ExperimentConfig;
use batchlaw::cli::experiments::{cmd_decomp, cmd_exp1, cmd_exp2, run_exp1, run_exp2};
use batchlaw::decomp::{bias_exact_teacher_mean, DecompConfig};
use batchlaw::model::{build_problem, draw_teacher, ProblemSpec, SketchedProblem};
use batchlaw::optim::Schedule;
use batchlaw::oracle;

fn default_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn default_problem() -> SketchedProblem {
    build_problem(&default_config().problem_spec()).expect("default problem")
}

fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("[{status}] {criterion}: {detail}");
    assert!(passed, "{criterion}: {detail}");
}

/// Ordinary least-squares slope of y against x.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

#[test]
fn criterion_1_oracle_exactness() {
    // Exhaustive finite-population identity, N <= 8, all B, dimension 2.
    let mut state = 0x243F6A8885A308D3u64;
    let mut unit = move || {
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        (state.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    let mut worst = 0.0f64;
    for n in 2..=8usize {
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| vec![unit(), unit()]).collect();
        for batch in 1..=n {
            let (exact, formula) = oracle::finite_pop_cov_bruteforce(&vectors, batch).unwrap();
            let scale = exact.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            for (e, f) in exact.iter().zip(formula.iter()) {
                worst = worst.max((e - f).abs() / (1.0 + scale));
            }
        }
    }

    let scalars: Vec<Vec<f64>> = [1.0, -1.0, 2.0, -2.0].iter().map(|&v| vec![v]).collect();
    let (exact, formula) = oracle::finite_pop_cov_bruteforce(&scalars, 2).unwrap();
    let scalar_ok =
        (exact[0] - 5.0 / 6.0).abs() <= 1e-14 && (formula[0] - 5.0 / 6.0).abs() <= 1e-14;

    let problem = default_problem();
    let cfg = default_config();
    let lines = oracle::equivalence_suite(&problem, &Schedule::new(cfg.gamma, cfg.l), cfg.n);
    let equiv_ok = lines.iter().all(|l| l.passed);
    let equiv_detail: Vec<String> = lines
        .iter()
        .map(|l| format!("{} [{}]", l.name, if l.passed { "ok" } else { "FAIL" }))
        .collect();

    report(
        "criterion 1 (oracle exactness)",
        worst <= 1e-12 && scalar_ok && equiv_ok,
        &format!(
            "bruteforce worst gap {worst:.3e}; scalar case 5/6 {}; {}",
            if scalar_ok { "ok" } else { "FAIL" },
            equiv_detail.join("; ")
        ),
    );
}

#[test]
fn criterion_2_variance_split_identities() {
    let cfg = default_config();
    let problem = default_problem();
    let batch = 8;
    let s = Schedule::new(cfg.gamma, cfg.n / batch);
    let rep = oracle::variance_split_check(&problem, cfg.n, batch, &s, 200, 7_100);
    report(
        "criterion 2 (variance-split identities, B=8, R=200)",
        rep.passed,
        &format!(
            "pathwise max {:.3e} (tol 1e-10), cross ratio {:.2}, closure ratio {:.2} (tol 4)",
            rep.max_pathwise_deviation, rep.cross_term_ratio, rep.norm_identity_ratio
        ),
    );
}

#[test]
fn criterion_3_decomposition_closure() {
    let cfg = default_config();
    let problem = default_problem();
    let mut all_ok = true;
    let mut details = Vec::new();
    for batch in [1usize, 8, 64] {
        let est = batchlaw::decomp::estimate_decomposition(
            &problem,
            &DecompConfig {
                batch,
                n: cfg.n,
                l_run: cfg.l,
                gamma: cfg.gamma,
                reps: cfg.reps,
                experiment: 7_200 + batch as u64,
            },
        );
        let onepass_gap = (est.bias_exact + est.var_emp.value - est.onepass_excess.value).abs();
        let onepass_se = est.var_emp.se.hypot(est.onepass_excess.se);
        let onepass_ok = onepass_gap <= 4.0 * onepass_se;
        let wr_ok = est.closure_wr.value.abs() <= 4.0 * est.closure_wr.se;
        let wor_ok = est.closure_wor.value.abs() <= 4.0 * est.closure_wor.se;
        all_ok &= onepass_ok && wr_ok && wor_ok;
        details.push(format!(
            "B={batch}: one-pass gap/SE {:.2}, wr {:.2}, wor {:.2}",
            onepass_gap / onepass_se.max(1e-300),
            est.closure_wr.value.abs() / est.closure_wr.se.max(1e-300),
            est.closure_wor.value.abs() / est.closure_wor.se.max(1e-300),
        ));
    }
    report(
        "criterion 3 (decomposition closures)",
        all_ok,
        &format!("{} (all ratios vs tol 4)", details.join("; ")),
    );
}

#[test]
fn criterion_4_variance_sweep_below_reference() {
    let cfg = default_config();
    let rows = run_exp1(&cfg).expect("exp1");
    let mut below = true;
    let mut worst_ratio = 0.0f64;
    for r in &rows {
        let ratio = r.var_emp.value / r.var_ref_matched;
        worst_ratio = worst_ratio.max(ratio);
        below &= r.var_emp.value <= r.var_ref_matched;
    }
    let mut monotone = true;
    for w in rows.windows(2) {
        let slack = w[0].var_emp.se.hypot(w[1].var_emp.se);
        monotone &= w[1].var_emp.value <= w[0].var_emp.value + slack;
    }
    report(
        "criterion 4 (variance below matched reference, nonincreasing)",
        below && monotone,
        &format!("worst emp/ref ratio {worst_ratio:.3} (tol 1), monotone within 1 SE: {monotone}"),
    );
}

#[test]
fn criteria_5_and_6_fluctuation_sweep() {
    let cfg = default_config();
    let rows = run_exp2(&cfg).expect("exp2");

    // Criterion 5: wr decay slope, wor/wr against rho*B, exact wor collapse
    // at B = N.
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.batch <= 64)
        .map(|r| ((r.batch as f64).ln(), r.fluc_wr.value.ln()))
        .unzip();
    let wr_slope = slope(&xs, &ys);
    let slope_ok = (-1.25..=-0.75).contains(&wr_slope);

    let mut ratio_ok = true;
    let mut ratio_detail = Vec::new();
    for r in rows.iter().filter(|r| [32, 64, 128, 256].contains(&r.batch)) {
        let measured = r.fluc_wor.value / r.fluc_wr.value;
        let predicted = r.rho_wor * r.batch as f64;
        let ratio = measured / predicted;
        ratio_ok &= (0.5..=1.5).contains(&ratio);
        ratio_detail.push(format!("B={} {:.2}", r.batch, ratio));
    }

    let bn = rows.last().expect("rows");
    let bn_ok = bn.batch == cfg.n && bn.fluc_wor.value <= 1e-18;

    report(
        "criterion 5 (fluctuation decay and finite-population ratio)",
        slope_ok && ratio_ok && bn_ok,
        &format!(
            "wr slope {wr_slope:.3} (tol [-1.25,-0.75]); wor/wr vs rho*B: {} (tol [0.5,1.5]); \
             fluc_wor(B=N) = {:.3e} (tol 1e-18)",
            ratio_detail.join(", "),
            bn.fluc_wor.value
        ),
    );

    // Criterion 6: normalized collapse over B in 1..=256, both rules.
    let norm_wr: Vec<f64> = rows
        .iter()
        .filter(|r| r.batch <= 256)
        .map(|r| r.fluc_wr.value * r.batch as f64)
        .collect();
    let norm_wor: Vec<f64> = rows
        .iter()
        .filter(|r| r.batch <= 256 && r.rho_wor > 0.0)
        .map(|r| r.fluc_wor.value / r.rho_wor)
        .collect();
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let wr_spread = spread(&norm_wr);
    let wor_spread = spread(&norm_wor);
    report(
        "criterion 6 (normalized fluctuation collapse)",
        wr_spread <= 3.0 && wor_spread <= 3.0,
        &format!("max/min: wr {wr_spread:.3}, wor {wor_spread:.3} (tol 3)"),
    );
}

#[test]
fn criterion_7_scaling_slopes() {
    let cfg = default_config();

    // Approximation error vs sketch dimension, averaged over 200 teacher
    // redraws; expected exponent 1 - b = -0.5.
    let sketch_dims = [16usize, 32, 64, 128];
    let mut mean_approx = Vec::new();
    for &m in &sketch_dims {
        let spec = ProblemSpec { m, ..cfg.problem_spec() };
        let problem = build_problem(&spec).expect("problem");
        let mut acc = 0.0;
        let draws = 200;
        for rep in 0..draws {
            let redrawn = problem
                .with_teacher(draw_teacher(&spec, 10 + rep))
                .expect("teacher redraw");
            acc += redrawn.approx_error();
        }
        mean_approx.push(acc / draws as f64);
    }
    let xs: Vec<f64> = sketch_dims.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = mean_approx.iter().map(|v| v.ln()).collect();
    let approx_slope = slope(&xs, &ys);
    let approx_ok = (approx_slope - (-0.5)).abs() <= 0.15;

    // Sketched-spectrum power law over j in [4, 32]; expected exponent -a.
    let problem = default_problem();
    let (xs, ys): (Vec<f64>, Vec<f64>) = problem
        .eig_vals()
        .iter()
        .enumerate()
        .filter(|(j, _)| (4..=32).contains(&(j + 1)))
        .map(|(j, &mu)| (((j + 1) as f64).ln(), mu.ln()))
        .unzip();
    let spectrum_slope = slope(&xs, &ys);
    let spectrum_ok = (spectrum_slope - (-cfg.a)).abs() <= 0.3;

    // One-pass bias vs effective horizon at M = 256, teacher-prior mean;
    // expected exponent (1 - b) / a = -0.25.
    let spec = ProblemSpec { m: 256, ..cfg.problem_spec() };
    let problem = build_problem(&spec).expect("problem");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for exp in 7..=12u32 {
        let t = 1usize << exp;
        let s = Schedule::new(cfg.gamma, t);
        xs.push((s.l_eff() * cfg.gamma).ln());
        ys.push(bias_exact_teacher_mean(&problem, &s).ln());
    }
    let bias_slope = slope(&xs, &ys);
    let bias_ok = (bias_slope - (-0.25)).abs() <= 0.1;

    report(
        "criterion 7 (scaling-law slopes)",
        approx_ok && spectrum_ok && bias_ok,
        &format!(
            "approx vs M: {approx_slope:.3} (target -0.5 +- 0.15); spectrum: {spectrum_slope:.3} \
             (target -2 +- 0.3); bias vs T_eff*gamma: {bias_slope:.3} (target -0.25 +- 0.1)"
        ),
    );
}

#[test]
fn criterion_8_determinism_across_threads() {
    let base = std::env::temp_dir().join("batchlaw-acceptance-det");
    let read = |dir: &std::path::Path, name: &str| std::fs::read(dir.join(name)).expect("csv");

    // Full-size exp1 across thread counts.
    let mut ok = true;
    let mut detail = Vec::new();
    let mut reference: Option<Vec<u8>> = None;
    for threads in [1usize, 4] {
        let mut cfg = default_config();
        cfg.threads = threads;
        cfg.out_dir = base.join(format!("exp1-t{threads}"));
        cmd_exp1(&cfg).expect("exp1");
        let bytes = read(&cfg.out_dir, "exp1.csv");
        if let Some(r) = &reference {
            ok &= *r == bytes;
        }
        reference = Some(bytes);
    }
    detail.push(format!("exp1 defaults t1==t4: {ok}"));

    // Reduced-size exp2 and decomp across thread counts.
    let small = ExperimentConfig {
        d: 1_000,
        m: 16,
        n: 64,
        l: 64,
        reps: 12,
        batch_sizes: vec![1, 4, 16, 64],
        ..default_config()
    };
    let mut exp2_ok = true;
    let mut decomp_ok = true;
    let mut exp2_ref: Option<Vec<u8>> = None;
    let mut decomp_ref: Option<String> = None;
    for threads in [1usize, 3] {
        let mut cfg = small.clone();
        cfg.threads = threads;
        cfg.out_dir = base.join(format!("small-t{threads}"));
        cmd_exp2(&cfg).expect("exp2");
        let bytes = read(&cfg.out_dir, "exp2.csv");
        if let Some(r) = &exp2_ref {
            exp2_ok &= *r == bytes;
        }
        exp2_ref = Some(bytes);
        let csv = cmd_decomp(&cfg).expect("decomp");
        if let Some(r) = &decomp_ref {
            decomp_ok &= *r == csv;
        }
        decomp_ref = Some(csv);
    }
    detail.push(format!("exp2 small t1==t3: {exp2_ok}"));
    detail.push(format!("decomp small t1==t3: {decomp_ok}"));

    report(
        "criterion 8 (byte-identical CSV across thread counts)",
        ok && exp2_ok && decomp_ok,
        &detail.join("; "),
    );
}
