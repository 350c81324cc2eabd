//! Value function, lifted costs, optimal feedback and the Bellman residual.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::feedback::{gains_in_domain, AffineFeedback, FeedbackGains};
use crate::linalg::{quad_form, trace_product};
use crate::model::{Coefficients, LqModel};
use crate::riccati::{auxiliary_from, factor_uv, AuxiliaryMatrices, RiccatiSolution, RiccatiState};
use crate::schedule::CoefficientSchedule;
use crate::state::MomentState;

fn check_moments(ms: &MomentState, d: usize) -> Result<()> {
    if ms.mean.len() != d || ms.cov.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "moment state of dimension {}, expected {d}",
            ms.mean.len()
        )));
    }
    Ok(())
}

/// `tr(Λ Σ) + mᵀ Γ m + γ·m + χ` for a given coefficient state.
pub fn value_of_state(state: &RiccatiState, ms: &MomentState) -> f64 {
    trace_product(&state.lambda, &ms.cov) + quad_form(&state.gamma, &ms.mean) + state.gamma_vec.dot(&ms.mean) + state.chi
}

pub fn value(sol: &RiccatiSolution, t: f64, ms: &MomentState) -> Result<f64> {
    let state = sol.state_at(t)?;
    check_moments(ms, state.lambda.nrows())?;
    Ok(value_of_state(&state, ms))
}

/// Lifted terminal cost `tr(P2 Σ) + mᵀ(P2 + P̄2)m + (p1 + p̄1)·m`.
pub fn g_hat(model: &LqModel, ms: &MomentState) -> Result<f64> {
    check_moments(ms, model.dims.state)?;
    let c = &model.cost;
    Ok(trace_product(&c.p2, &ms.cov)
        + quad_form(&(&c.p2 + &c.p2_bar), &ms.mean)
        + (&c.p1 + &c.p1_bar).dot(&ms.mean))
}

/// Lifted running cost in moment form for affine controls.
pub(crate) fn f_hat_frozen(c: &Coefficients, g: &FeedbackGains, ms: &MomentState) -> f64 {
    let (m, sigma) = (&ms.mean, &ms.cov);
    let a_bar = g.mean_control(m);
    let sigma_k1t = sigma * g.k1.transpose();
    trace_product(&c.q2, sigma)
        + quad_form(&(&c.q2 + &c.q2_bar), m)
        + trace_product(&c.r2, &(&g.k1 * &sigma_k1t))
        + quad_form(&(&c.r2 + &c.r2_bar), &a_bar)
        + 2.0 * m.dot(&((&c.m2 + &c.m2_bar) * &a_bar))
        + 2.0 * trace_product(&c.m2.transpose(), &sigma_k1t)
        + (&c.q1 + &c.q1_bar).dot(m)
        + (&c.r1 + &c.r1_bar).dot(&a_bar)
}

/// Expected running cost of the feedback `fb` under a law with moments `ms`.
pub fn f_hat_affine(model: &LqModel, t: f64, fb: &AffineFeedback, ms: &MomentState) -> Result<f64> {
    fb.check_dims(model.dims)?;
    check_moments(ms, model.dims.state)?;
    let c = model.coefficients_at(t)?;
    let g = gains_in_domain(fb, model, t)?;
    Ok(f_hat_frozen(&c, &g, ms))
}

/// Minimizing gains at one time: `K1 = -U⁻¹Sᵀ`, `K2 = -V⁻¹Zᵀ`, `k = -½V⁻¹Y`.
pub fn optimal_gains(model: &LqModel, t: f64, state: &RiccatiState) -> Result<FeedbackGains> {
    let c = model.coefficients_at(t)?;
    gains_from_aux(&auxiliary_from(&c, state), t)
}

fn gains_from_aux(aux: &AuxiliaryMatrices, t: f64) -> Result<FeedbackGains> {
    let (fu, fv) = factor_uv(aux, t)?;
    Ok(FeedbackGains {
        k1: -fu.solve(&aux.s.transpose()),
        k2: -fv.solve(&aux.z.transpose()),
        k: fv.solve_vec(&aux.y) * -0.5,
    })
}

/// Optimal feedback as piecewise-cubic gains on the solution grid (plus any
/// coefficient knots), exact at the knots.
pub fn optimal_feedback(model: &LqModel, sol: &RiccatiSolution) -> Result<AffineFeedback> {
    let mut times = sol.times();
    times.extend(model.breakpoints());
    times.sort_by(f64::total_cmp);
    times.dedup();
    let gains_at = |t: f64| -> Result<[DMatrix<f64>; 3]> {
        let g = optimal_gains(model, t, &sol.state_at(t)?)?;
        let k = DMatrix::from_column_slice(g.k.len(), 1, g.k.as_slice());
        Ok([g.k1, g.k2, k])
    };
    let values = times.iter().map(|&t| gains_at(t)).collect::<Result<Vec<_>>>()?;
    // one-sided second-order differences kept inside each segment, so kinks
    // of the coefficients at knots do not leak across
    let mut d_start = Vec::with_capacity(times.len() - 1);
    let mut d_end = Vec::with_capacity(times.len() - 1);
    for (i, w) in times.windows(2).enumerate() {
        let eps = 1e-3 * (w[1] - w[0]);
        let (a1, a2) = (gains_at(w[0] + eps)?, gains_at(w[0] + 2.0 * eps)?);
        let (b1, b2) = (gains_at(w[1] - eps)?, gains_at(w[1] - 2.0 * eps)?);
        d_start.push([0, 1, 2].map(|j| (&a1[j] * 4.0 - &values[i][j] * 3.0 - &a2[j]) / (2.0 * eps)));
        d_end.push([0, 1, 2].map(|j| (&values[i + 1][j] * 3.0 - &b1[j] * 4.0 + &b2[j]) / (2.0 * eps)));
    }
    let build = |j: usize| {
        CoefficientSchedule::cubic(
            times.clone(),
            values.iter().map(|v| v[j].clone()).collect(),
            d_start.iter().map(|v| v[j].clone()).collect(),
            d_end.iter().map(|v| v[j].clone()).collect(),
        )
    };
    Ok(AffineFeedback { k1: build(0)?, k2: build(1)?, k: build(2)? })
}

pub use crate::feedback::apply_feedback;

/// The functional minimized pointwise in the Bellman equation, evaluated at
/// an affine control with gains `g`:
/// `tr(U K1ΣK1ᵀ) + āᵀVā + 2tr(S K1 Σ) + 2mᵀZā + Y·ā`.
pub fn g_functional(model: &LqModel, t: f64, state: &RiccatiState, g: &FeedbackGains, ms: &MomentState) -> Result<f64> {
    check_moments(ms, model.dims.state)?;
    let aux = auxiliary_from(&model.coefficients_at(t)?, state);
    let (m, sigma) = (&ms.mean, &ms.cov);
    let a_bar = g.mean_control(m);
    let k1_sigma = &g.k1 * sigma;
    Ok(trace_product(&aux.u, &(&k1_sigma * g.k1.transpose()))
        + quad_form(&aux.v, &a_bar)
        + 2.0 * trace_product(&aux.s, &k1_sigma)
        + 2.0 * m.dot(&(&aux.z * &a_bar))
        + aux.y.dot(&a_bar))
}

/// Closed-form infimum of [`g_functional`] over affine controls:
/// `-tr(SU⁻¹Sᵀ Σ) - mᵀZV⁻¹Zᵀm - YᵀV⁻¹Zᵀm - ¼YᵀV⁻¹Y`.
pub fn g_inf(model: &LqModel, t: f64, state: &RiccatiState, ms: &MomentState) -> Result<f64> {
    check_moments(ms, model.dims.state)?;
    let aux = auxiliary_from(&model.coefficients_at(t)?, state);
    g_inf_from(&aux, t, ms)
}

fn g_inf_from(aux: &AuxiliaryMatrices, t: f64, ms: &MomentState) -> Result<f64> {
    let (fu, fv) = factor_uv(aux, t)?;
    let s_uinv_st = &aux.s * fu.solve(&aux.s.transpose());
    let vinv_zt_m = fv.solve_vec(&(aux.z.transpose() * &ms.mean));
    let vinv_y = fv.solve_vec(&aux.y);
    Ok(-trace_product(&s_uinv_st, &ms.cov)
        - (aux.z.transpose() * &ms.mean).dot(&vinv_zt_m)
        - aux.y.dot(&vinv_zt_m)
        - 0.25 * aux.y.dot(&vinv_y))
}

/// Left-hand side of the Bellman equation in the quadratic ansatz at
/// `(t, ms)`. Time derivatives come from centered differences of the stored
/// solution (step `Δt`), not from the Riccati right-hand side, so the
/// residual is an independent consistency check. Ideal value 0.
pub fn bellman_residual(model: &LqModel, sol: &RiccatiSolution, t: f64, ms: &MomentState) -> Result<f64> {
    check_moments(ms, model.dims.state)?;
    let h = sol.step();
    if !(t - h >= -1e-12 * sol.horizon() && t + h <= sol.horizon() * (1.0 + 1e-12)) {
        return Err(Error::OutOfDomain {
            t,
            start: h,
            end: sol.horizon() - h,
        });
    }
    let st = sol.state_at(t)?;
    let fwd = sol.state_at((t + h).min(sol.horizon()))?;
    let bwd = sol.state_at((t - h).max(0.0))?;
    let dt = RiccatiState::lincomb(&[(0.5 / h, &fwd), (-0.5 / h, &bwd)]);

    let c = model.coefficients_at(t)?;
    let aux = auxiliary_from(&c, &st);
    let (m, sigma) = (&ms.mean, &ms.cov);
    let lam = &st.lambda;
    let gam = &st.gamma;
    let b_sum = &c.b + &c.b_bar;
    let d_sum = &c.d + &c.d_bar;

    let lam_b = lam * &c.b;
    let var_coef = &dt.lambda + &c.q2 + c.d.transpose() * lam * &c.d + &lam_b + lam_b.transpose();
    let gam_b = gam * &b_sum;
    let mean_coef = &dt.gamma + &c.q2 + &c.q2_bar + d_sum.transpose() * lam * &d_sum + &gam_b + gam_b.transpose();
    let lin_coef = &dt.gamma_vec + &c.q1 + &c.q1_bar + b_sum.transpose() * &st.gamma_vec + d_sum.transpose() * lam * &c.sigma0 * 2.0
        + gam * &c.b0 * 2.0;
    let constant = dt.chi + st.gamma_vec.dot(&c.b0) + c.sigma0.dot(&(lam * &c.sigma0));

    Ok(trace_product(&var_coef, sigma)
        + g_inf_from(&aux, t, ms)?
        + quad_form(&mean_coef, m)
        + lin_coef.dot(m)
        + constant)
}

/// Mean-field terms only enter through `(m, Σ)`; this evaluates
/// [`value`] on an empirical ensemble for convenience.
pub fn value_of_ensemble(sol: &RiccatiSolution, t: f64, e: &crate::state::ParticleEnsemble) -> Result<f64> {
    value(sol, t, &crate::state::ensemble_moments(e)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dimensions;
    use nalgebra::DVector;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn g_hat_direct_formula() {
        let mut model = LqModel::zeros(Dimensions::new(1, 1), 1.0);
        assert_eq!(g_hat(&model, &MomentState::scalar(2.0, 3.0).unwrap()).unwrap(), 0.0);
        model.cost.p2 = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(g_hat(&model, &MomentState::scalar(2.0, 3.0).unwrap()).unwrap(), 7.0);
    }

    #[test]
    fn zero_feedback_only_state_terms() {
        let mut model = LqModel::zeros(Dimensions::new(2, 1), 1.0);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let qb = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.2]);
        model.cost.q2 = CoefficientSchedule::constant(q.clone());
        model.cost.q2_bar = CoefficientSchedule::constant(qb.clone());
        model.cost.r2 = CoefficientSchedule::constant(DMatrix::identity(1, 1));
        let ms = MomentState::new(v(&[1.0, -2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let fb = AffineFeedback::zeros(model.dims);
        let got = f_hat_affine(&model, 0.2, &fb, &ms).unwrap();
        let expect = (&q * &ms.cov).trace() + ms.mean.dot(&((&q + &qb) * &ms.mean));
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn dirac_collapse_of_f_hat() {
        let mut model = LqModel::zeros(Dimensions::new(2, 2), 1.0);
        model.cost.q2 = CoefficientSchedule::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]));
        model.cost.r2 = CoefficientSchedule::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.7]));
        model.cost.r2_bar = CoefficientSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.1]));
        model.cost.m2 = CoefficientSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.4, 0.0]));
        model.cost.m2_bar = CoefficientSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.0, 0.2]));
        model.cost.q1 = CoefficientSchedule::constant(DMatrix::from_column_slice(2, 1, &[0.5, -1.0]));
        model.cost.r1_bar = CoefficientSchedule::constant(DMatrix::from_column_slice(2, 1, &[0.2, 0.3]));
        let fb = AffineFeedback::constant(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.1, -0.4]),
            v(&[0.2, -0.7]),
        );
        let m = v(&[0.4, 1.1]);
        let ms = MomentState::dirac(m.clone());
        let a = apply_feedback(&fb, 0.3, &m, &m).unwrap();
        let direct = crate::model::running_cost(&model, 0.3, &m, &a, &m, &a).unwrap();
        assert!((f_hat_affine(&model, 0.3, &fb, &ms).unwrap() - direct).abs() < 1e-13);
    }

    #[test]
    fn zero_auxiliaries_give_zero_infimum() {
        let mut model = LqModel::zeros(Dimensions::new(1, 1), 1.0);
        model.cost.r2 = CoefficientSchedule::constant(DMatrix::identity(1, 1));
        let st = RiccatiState::zeros(1);
        assert_eq!(g_inf(&model, 0.5, &st, &MomentState::scalar(1.0, 2.0).unwrap()).unwrap(), 0.0);
    }
}
