//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any criterion fails. Runs without the libtest harness so the lines are
//! always visible.

mod common;

use std::f64::consts::E;
use std::process::ExitCode;
use std::time::Instant;

use lqmkv::presets::*;
use lqmkv::quadrature::{integrate, DEFAULT_TOL};
use lqmkv::verify::{max_bellman_residual, max_dpp_residual, run_battery, VerifyConfig};
use lqmkv::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Run = lqmkv::Result<Outcome>;

fn mv_params() -> MeanVarianceParams {
    MeanVarianceParams::default()
}

fn presets() -> Vec<(&'static str, LqModel, MomentState)> {
    let mv = mv_params();
    let sys = SystemicParams::default();
    vec![
        ("mean-variance", mean_variance_model(&mv).unwrap(), mv.initial_state()),
        ("systemic-risk", systemic_model(&sys).unwrap(), sys.initial_state()),
    ]
}

fn criterion_1() -> Run {
    let p = MeanVarianceParams::constant(0.05, 0.2, 0.3, 1.0, 1.0, 1.0);
    let model = mean_variance_model(&p)?;
    let start = Instant::now();
    let sol = solve_riccati(&model, 1000)?;
    let elapsed = start.elapsed().as_secs_f64();
    let (mut e_lam, mut e_gam, mut e_vec, mut e_chi) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (k, s) in sol.states().iter().enumerate() {
        let exact = mean_variance_closed_form(&p, sol.time(k))?;
        e_lam = e_lam.max((s.lambda[(0, 0)] - exact.lambda[(0, 0)]).abs());
        e_gam = e_gam.max(s.gamma[(0, 0)].abs());
        e_vec = e_vec.max((s.gamma_vec[0] - exact.gamma_vec[0]).abs());
        e_chi = e_chi.max((s.chi - exact.chi).abs());
    }
    let pass = e_lam <= 1e-8 && e_vec <= 1e-8 && e_chi <= 1e-8 && e_gam <= 1e-12 && elapsed < 1.0;
    Ok(outcome(
        pass,
        format!("max err Lambda {e_lam:.2e}, gamma {e_vec:.2e}, chi {e_chi:.2e}; |Gamma| {e_gam:.2e}; {elapsed:.3}s"),
    ))
}

fn criterion_2() -> Run {
    let p = SystemicParams::default();
    let model = systemic_model(&p)?;
    let start = Instant::now();
    let sol = solve_riccati(&model, 1000)?;
    let elapsed = start.elapsed().as_secs_f64();
    let oracle = SystemicLambdaOracle::new(&p, SYSTEMIC_ORACLE_STEPS)?;
    let (mut e_lam, mut e_gam, mut e_chi) = (0.0f64, 0.0f64, 0.0f64);
    for (k, s) in sol.states().iter().enumerate() {
        let t = sol.time(k);
        e_lam = e_lam.max((s.lambda[(0, 0)] - oracle.lambda(t)?).abs());
        e_gam = e_gam.max(s.gamma[(0, 0)].abs()).max(s.gamma_vec[0].abs());
        if k % 50 == 0 {
            let int = integrate(|u| oracle.lambda(u).unwrap(), t, p.horizon, DEFAULT_TOL);
            e_chi = e_chi.max((s.chi - p.sigma * p.sigma * int).abs());
        }
    }
    let pass = e_lam <= 1e-8 && e_gam <= 1e-12 && e_chi <= 1e-8 && elapsed < 1.0;
    Ok(outcome(
        pass,
        format!("max err Lambda {e_lam:.2e}, chi {e_chi:.2e}; |Gamma|,|gamma| {e_gam:.2e}; {elapsed:.3}s"),
    ))
}

fn criterion_3() -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (d, m) = (1 + i % 3, 1 + i % 2);
        let model = common::random_model(&mut rng, d, m, 1.0, false);
        if !check_standard_conditions(&model, 1e-3)?.holds() {
            return Ok(outcome(false, format!("generated model {i} violates the standard conditions")));
        }
        let sol = solve_riccati(&model, 1000)?;
        for s in sol.states() {
            worst = worst.max((&s.lambda - &s.gamma).amax());
        }
    }
    Ok(outcome(worst <= 1e-10, format!("max |Lambda - Gamma| {worst:.2e} over 10 models")))
}

fn criterion_4() -> Run {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, model, _) in presets() {
        let sol = solve_riccati(&model, 1000)?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = max_bellman_residual(&model, &sol, &mut rng, 100, 10)?;
        pass &= r <= 1e-4;
        parts.push(format!("{name} {r:.2e}"));
    }
    Ok(outcome(pass, format!("max |residual|: {}", parts.join(", "))))
}

fn criterion_5() -> Run {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, model, ms0) in presets() {
        let sol = solve_riccati(&model, 1000)?;
        let fb = optimal_feedback(&model, &sol)?;
        let v0 = value(&sol, 0.0, &ms0)?;
        let optimal = cost_from_moments(&model, &fb, 0.0, &ms0, 1000)?;
        let mut margin = f64::INFINITY;
        for (_, delta) in canonical_perturbations(&fb, model.dims) {
            let cost = cost_from_moments(&model, &fb.add(&delta)?, 0.0, &ms0, 1000)?;
            margin = margin.min(cost - optimal);
        }
        let gap = (v0 - optimal).abs();
        pass &= gap <= 1e-6 && margin >= 1e-9;
        parts.push(format!("{name} |value - cost| {gap:.2e}, min margin {margin:.2e}"));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn criterion_6() -> Run {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, model, _) in presets() {
        let residual = |k: usize| -> lqmkv::Result<f64> {
            let sol = solve_riccati(&model, k)?;
            let fb = optimal_feedback(&model, &sol)?;
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            max_dpp_residual(&model, &sol, &fb, &mut rng, 10, k)
        };
        let coarse = residual(1000)?;
        let fine = residual(2000)?;
        let ratio = coarse / fine;
        pass &= fine <= 1e-6 && ratio >= 12.0;
        // Both residuals above sit at the rounding floor; on coarse grids the
        // truncation error is visible and the order can be read off.
        let coarse_ratio = residual(10)? / residual(20)?;
        parts.push(format!(
            "{name} max residual {fine:.2e} (K=2000), {coarse:.2e} (K=1000), ratio {ratio:.1} \
             [info: K=10/K=20 ratio {coarse_ratio:.1}]"
        ));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn sim_config(n: usize, seed: u64, ms0: &MomentState) -> SimConfig {
    let mut cfg = SimConfig::new(n, 1000, seed, InitialLaw::Dirac(ms0.mean.clone()));
    cfg.record_every = 250;
    cfg.keep_ensembles = true;
    cfg
}

/// Standard errors of the sample mean and sample variance of a 1-d ensemble.
fn mean_var_se(e: &ParticleEnsemble) -> (f64, f64, f64, f64) {
    let xs = e.as_flat();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / (n - 1.0);
    let sq_mean = sq.iter().sum::<f64>() / n;
    let sq_var = sq.iter().map(|s| (s - sq_mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt(), var, (sq_var / n).sqrt())
}

/// Variance of the empirical mean of N interacting particles, times N.
/// Fluctuations of the mean obey the mean-field drift
/// `A_m = B + B̄ + (C + C̄)K2` and carry the per-particle noise covariance
/// `Σ' - AΣ - ΣAᵀ` (with `A = B + C K1`), so `P' = A_m P + P A_mᵀ + noise`,
/// `P(0) = Σ0`. The naive `Σ/N` misses the mean-field feedback.
fn mean_fluctuation(model: &LqModel, fb: &AffineFeedback, traj: &MomentTrajectory) -> lqmkv::Result<Vec<f64>> {
    let rhs = |t: f64, ms: &MomentState, p: &nalgebra::DMatrix<f64>| -> lqmkv::Result<nalgebra::DMatrix<f64>> {
        let c = model.coefficients_at(t)?;
        let g = fb.gains_at(t);
        let a = &c.b + &c.c * &g.k1;
        let a_m = &c.b + &c.b_bar + (&c.c + &c.c_bar) * &g.k2;
        let (_, ds) = moment_rhs(model, fb, t, ms)?;
        let noise = ds - &a * &ms.cov - &ms.cov * a.transpose();
        Ok(&a_m * p + p * a_m.transpose() + noise)
    };
    let mut p = traj.states[0].cov.clone();
    let mut out = vec![p[(0, 0)]];
    for k in 0..traj.times.len() - 1 {
        let (t0, t1) = (traj.times[k], traj.times[k + 1]);
        let h = t1 - t0;
        let (s0, s1) = (&traj.states[k], &traj.states[k + 1]);
        let mid = MomentState::new((&s0.mean + &s1.mean) * 0.5, (&s0.cov + &s1.cov) * 0.5)?;
        let k1 = rhs(t0, s0, &p)?;
        let k2 = rhs(t0 + h / 2.0, &mid, &(&p + &k1 * (h / 2.0)))?;
        let k3 = rhs(t0 + h / 2.0, &mid, &(&p + &k2 * (h / 2.0)))?;
        let k4 = rhs(t1, s1, &(&p + &k3 * h))?;
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(p[(0, 0)]);
    }
    Ok(out)
}

fn criterion_7() -> Run {
    let mut pass = true;
    let mut worst = [0.0f64; 4];
    let mut slowest = 0.0f64;
    for (name, model, ms0) in presets() {
        let sol = solve_riccati(&model, 1000)?;
        let fb = optimal_feedback(&model, &sol)?;
        let v0 = value(&sol, 0.0, &ms0)?;
        let traj = propagate_moments(&model, &fb, 0.0, &ms0, 1000)?;
        let fluct = mean_fluctuation(&model, &fb, &traj)?;
        for seed in 0..3 {
            let start = Instant::now();
            let res = simulate(&model, &fb, &sim_config(50_000, seed, &ms0))?;
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let z_cost = (res.cost_mean - v0).abs() / res.cost_stderr;
            worst[0] = worst[0].max(z_cost);
            for (t, e) in res.times.iter().zip(&res.ensembles) {
                let (mean, _, var, se_var) = mean_var_se(e);
                let k = (t * 1000.0).round() as usize;
                let se_mean = (fluct[k] / e.len() as f64).sqrt();
                if *t > 0.0 {
                    let oracle = &traj.states[k];
                    let z_mean = (mean - oracle.mean[0]).abs() / se_mean;
                    let z_var = (var - oracle.cov[(0, 0)]).abs() / se_var;
                    worst[1] = worst[1].max(z_mean);
                    worst[2] = worst[2].max(z_var);
                    pass &= z_mean <= 4.0 && z_var <= 4.0;
                }
                if name == "systemic-risk" && *t > 0.0 {
                    let z = (mean - ms0.mean[0]).abs() / se_mean;
                    worst[3] = worst[3].max(z);
                    pass &= z <= 4.0;
                }
            }
            pass &= z_cost <= 4.0;
        }
    }
    pass &= slowest < 60.0;
    Ok(outcome(
        pass,
        format!(
            "worst |z|: cost {:.2}, mean {:.2}, variance {:.2}, systemic mean vs x0 {:.2} (3 seeds x 2 presets); slowest run {slowest:.1}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

fn gap_run(model: &LqModel, ms0: &MomentState, seed: u64) -> lqmkv::Result<(GapReport, f64)> {
    let sol = solve_riccati(model, 1000)?;
    let fb = optimal_feedback(model, &sol)?;
    let mut perturbations = canonical_perturbations(&fb, model.dims);
    perturbations.insert(0, ("none".to_string(), AffineFeedback::zeros(model.dims)));
    let mut cfg = sim_config(50_000, seed, ms0);
    cfg.keep_ensembles = false;
    cfg.record_every = 1000;
    let report = optimality_gap(model, &sol, &cfg, &perturbations)?;
    let zero_gap = report.entries[0].gap;
    Ok((report, zero_gap))
}

fn min_z(report: &GapReport) -> f64 {
    report.entries[1..]
        .iter()
        .map(|e| e.gap / e.gap_stderr)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_8() -> Run {
    let p = SystemicParams::default();
    let (sys, zero) = gap_run(&systemic_model(&p)?, &p.initial_state(), 8)?;
    let z_sys = min_z(&sys);
    let detected = sys.entries[1..].iter().filter(|e| e.detected()).count();
    let pass = detected == 10 && zero == 0.0;
    // Informational: the same battery on the mean-variance preset, whose
    // multiplicative noise makes the K1-scaling gaps (~1e-2) comparable to
    // the Monte Carlo resolution.
    let mv = mv_params();
    let (mv_report, mv_zero) = gap_run(&mean_variance_model(&mv)?, &mv.initial_state(), 8)?;
    let mv_detected = mv_report.entries[1..].iter().filter(|e| e.detected()).count();
    let mv_beaten = mv_report.entries[1..].iter().filter(|e| e.beats_optimal()).count();
    Ok(outcome(
        pass,
        format!(
            "systemic-risk: {detected}/10 gaps > 2 stderr (min {z_sys:.1}), zero perturbation gap {zero:e}; \
             [info] mean-variance: {mv_detected}/10 detected, {mv_beaten} beat the optimum, zero gap {mv_zero:e}"
        ),
    ))
}

fn criterion_9() -> Run {
    let p = mv_params();
    let model = mean_variance_model(&p)?;
    let ms0 = p.initial_state();
    let sol = solve_riccati(&model, 1000)?;
    let fb = optimal_feedback(&model, &sol)?;
    let target = 1.0 + 0.5 * (E - 1.0);
    let traj = propagate_moments(&model, &fb, 0.0, &ms0, 1000)?;
    let oracle_err = (traj.final_state().mean[0] - target).abs();

    let res = simulate(&model, &fb, &sim_config(50_000, 9, &ms0))?;
    let (mean, se, _, _) = mean_var_se(&res.final_ensemble);
    let z = (mean - target).abs() / se;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut fb_err = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(0.0..=1.0);
        let x = rng.random_range(-3.0..3.0);
        let m = rng.random_range(-3.0..3.0);
        let engine = apply_feedback(&fb, t, &DVector::from_element(1, x), &DVector::from_element(1, m))?[0];
        fb_err = fb_err.max((engine - mean_variance_optimal_control(&p, t, x, m)?).abs());
    }
    let pass = oracle_err <= 1e-6 && z <= 4.0 && fb_err <= 1e-8;
    Ok(outcome(
        pass,
        format!("moment-oracle mean(T) err {oracle_err:.2e}; Monte Carlo |z| {z:.2}; feedback max err {fb_err:.2e}"),
    ))
}

fn criterion_10() -> Run {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, model, ms0) in presets() {
        let cfg = VerifyConfig {
            seed: 10,
            scale_lambda: Some(1.01),
            particles: 2000,
            sim_steps: 100,
            ..VerifyConfig::default()
        };
        let checks = run_battery(&model, &ms0, &cfg)?;
        let bellman = checks.iter().find(|c| c.name == "bellman residual").unwrap();
        let caught = !bellman.pass;
        pass &= caught;
        if name == "systemic-risk" {
            pass &= bellman.measured >= 1e-2;
        }
        parts.push(format!(
            "{name} residual {:.2e} ({})",
            bellman.measured,
            if caught { "caught" } else { "missed" }
        ));
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Run); 10] = [
        ("mean-variance Riccati agreement", criterion_1),
        ("systemic Riccati agreement", criterion_2),
        ("no-mean-field collapse", criterion_3),
        ("Bellman residual", criterion_4),
        ("verification identity", criterion_5),
        ("DPP identity and convergence", criterion_6),
        ("Monte Carlo consistency", criterion_7),
        ("optimality gap detection", criterion_8),
        ("mean-variance trajectory", criterion_9),
        ("fault injection", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
