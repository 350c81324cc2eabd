#![allow(dead_code)]

use lqmkv::presets::SystemicParams;
use lqmkv::{CoefficientSchedule, Dimensions, LqModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// `AAᵀ + shift·I`.
pub fn random_spd(rng: &mut impl Rng, n: usize, scale: f64, shift: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n, scale);
    &a * a.transpose() + DMatrix::identity(n, n) * shift
}

fn sched(m: DMatrix<f64>) -> CoefficientSchedule {
    CoefficientSchedule::constant(m)
}

/// Random constant-coefficient model with `Q2 − M2 R2⁻¹ M2ᵀ ≥ 0`, `R2 > 0`,
/// `P2 ≥ 0`; mean-field (barred) terms only if `mean_field`.
pub fn random_model(rng: &mut impl Rng, d: usize, m: usize, horizon: f64, mean_field: bool) -> LqModel {
    let mut model = LqModel::zeros(Dimensions::new(d, m), horizon);
    let dy = &mut model.dynamics;
    dy.b0 = sched(random_matrix(rng, d, 1, 0.5));
    dy.b = sched(random_matrix(rng, d, d, 0.5));
    dy.c = sched(random_matrix(rng, d, m, 0.5));
    dy.sigma0 = sched(random_matrix(rng, d, 1, 0.5));
    dy.d = sched(random_matrix(rng, d, d, 0.3));
    dy.f = sched(random_matrix(rng, d, m, 0.3));
    let r2 = random_spd(rng, m, 0.5, 0.5);
    let m2 = random_matrix(rng, d, m, 0.3);
    let r2_inv = r2.clone().try_inverse().unwrap();
    let q2 = random_spd(rng, d, 0.5, 0.1) + &m2 * r2_inv * m2.transpose();
    let c = &mut model.cost;
    c.q2 = sched(q2);
    c.r2 = sched(r2);
    c.m2 = sched(m2);
    c.q1 = sched(random_matrix(rng, d, 1, 0.5));
    c.r1 = sched(random_matrix(rng, m, 1, 0.5));
    c.p2 = random_spd(rng, d, 0.5, 0.0);
    c.p1 = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    if mean_field {
        let dy = &mut model.dynamics;
        dy.b_bar = sched(random_matrix(rng, d, d, 0.3));
        dy.c_bar = sched(random_matrix(rng, d, m, 0.3));
        dy.d_bar = sched(random_matrix(rng, d, d, 0.2));
        dy.f_bar = sched(random_matrix(rng, d, m, 0.2));
        let c = &mut model.cost;
        c.q2_bar = sched(random_spd(rng, d, 0.3, 0.0));
        c.r2_bar = sched(random_spd(rng, m, 0.3, 0.0));
        c.q1_bar = sched(random_matrix(rng, d, 1, 0.3));
        c.r1_bar = sched(random_matrix(rng, m, 1, 0.3));
        c.p2_bar = random_spd(rng, d, 0.3, 0.0);
        c.p1_bar = DVector::from_fn(d, |_, _| rng.random_range(-0.3..0.3));
    }
    model.validated().unwrap()
}

/// Closed-form Λ of the systemic example, re-derived from its scalar Riccati
/// equation `Λ' = 2(Λ − δ⁺/2)(Λ − δ⁻/2)`, `Λ(T) = c/2`.
pub fn systemic_lambda_closed_form(p: &SystemicParams, t: f64) -> f64 {
    let (dp, dm) = lqmkv::presets::systemic_delta(p).unwrap();
    let e = ((dp - dm) * (p.horizon - t)).exp();
    let qe = p.q * p.q - p.eta;
    0.5 * (qe * (e - 1.0) - p.c * (dp * e - dm)) / (dm * e - dp - p.c * (e - 1.0))
}
