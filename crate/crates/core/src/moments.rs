//! Deterministic propagation of `(mean, covariance)` under affine feedback.
//!
//! Because drift and diffusion are affine in `(x, a)` and the feedback is
//! affine in `(x, E[X])`, the first two moments obey a closed ODE system:
//!
//! ```text
//! ā  = K2 m + k
//! m' = b0 + (B + B̄) m + (C + C̄) ā
//! A  = B + C K1,  G = D + F K1
//! h  = σ0 + D̄ m − F K1 m + (F + F̄) ā          (σ(x) = G x + h)
//! Σ' = A Σ + Σ Aᵀ + G Σ Gᵀ + (G m + h)(G m + h)ᵀ
//! ```
//!
//! The running cost integral rides along as an extra state component so
//! the RK4 quadrature stays fourth order.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::feedback::{gains_in_domain, AffineFeedback, FeedbackGains};
use crate::linalg::{clip_psd, min_eigenvalue, symmetrize};
use crate::model::{Coefficients, LqModel};
use crate::riccati::RiccatiSolution;
use crate::schedule::clamp_to_domain;
use crate::state::MomentState;
use crate::value::{f_hat_frozen, g_hat, optimal_feedback, value};

/// Eigenvalues below this are clipped to zero (and counted).
pub const CLIP_THRESHOLD: f64 = -1e-9;
/// Eigenvalues below this abort the propagation.
pub const INSTABILITY_THRESHOLD: f64 = -1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
    /// Accumulated expected running cost from the start time.
    pub running: Vec<f64>,
    /// Number of steps at which the covariance had to be clipped.
    pub clip_count: usize,
}

impl MomentTrajectory {
    pub fn final_state(&self) -> &MomentState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_running(&self) -> f64 {
        *self.running.last().expect("trajectory is never empty")
    }

    /// `t,m_0,…,Sigma_00,…,running`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.states[0].dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("m_{i}")));
        for i in 0..d {
            for j in 0..d {
                header.push(format!("Sigma_{i}{j}"));
            }
        }
        header.push("running".into());
        writeln!(w, "{}", header.join(","))?;
        for ((t, s), r) in self.times.iter().zip(&self.states).zip(&self.running) {
            let mut row = vec![t.to_string()];
            row.extend(s.mean.iter().map(|v| v.to_string()));
            for i in 0..d {
                for j in 0..d {
                    row.push(s.cov[(i, j)].to_string());
                }
            }
            row.push(r.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn moment_rhs_frozen(
    c: &Coefficients,
    g: &FeedbackGains,
    m: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let a_bar = g.mean_control(m);
    let dm = &c.b0 + (&c.b + &c.b_bar) * m + (&c.c + &c.c_bar) * &a_bar;
    let a = &c.b + &c.c * &g.k1;
    let gmat = &c.d + &c.f * &g.k1;
    let h = &c.sigma0 + &c.d_bar * m - &c.f * (&g.k1 * m) + (&c.f + &c.f_bar) * &a_bar;
    let gm_h = &gmat * m + h;
    let a_sigma = &a * sigma;
    let mut ds = &a_sigma + a_sigma.transpose() + &gmat * sigma * gmat.transpose() + &gm_h * gm_h.transpose();
    symmetrize(&mut ds);
    (dm, ds)
}

/// `(m', Σ')` at time `t` under feedback `fb`.
pub fn moment_rhs(
    model: &LqModel,
    fb: &AffineFeedback,
    t: f64,
    ms: &MomentState,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    fb.check_dims(model.dims)?;
    check_dim(model, ms)?;
    let c = model.coefficients_at(t)?;
    let g = gains_in_domain(fb, model, t)?;
    Ok(moment_rhs_frozen(&c, &g, &ms.mean, &ms.cov))
}

fn check_dim(model: &LqModel, ms: &MomentState) -> Result<()> {
    if ms.dim() != model.dims.state {
        return Err(Error::Shape(format!(
            "moment state of dimension {}, expected {}",
            ms.dim(),
            model.dims.state
        )));
    }
    Ok(())
}

#[derive(Clone)]
struct Augmented {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    running: f64,
}

impl Augmented {
    fn axpy(&self, h: f64, d: &Augmented) -> Augmented {
        Augmented {
            mean: &self.mean + &d.mean * h,
            cov: &self.cov + &d.cov * h,
            running: self.running + h * d.running,
        }
    }
}

fn augmented_rhs(model: &LqModel, fb: &AffineFeedback, t: f64, y: &Augmented) -> Result<Augmented> {
    let c = model.coefficients_at(t)?;
    let g = gains_in_domain(fb, model, t)?;
    let (dm, ds) = moment_rhs_frozen(&c, &g, &y.mean, &y.cov);
    // the cost integrand sees the law (m, Σ) as is; Σ is PSD up to stage error
    let ms = MomentState {
        mean: y.mean.clone(),
        cov: y.cov.clone(),
    };
    Ok(Augmented {
        mean: dm,
        cov: ds,
        running: f_hat_frozen(&c, &g, &ms),
    })
}

fn rk4_step(model: &LqModel, fb: &AffineFeedback, t0: f64, t1: f64, y: &Augmented) -> Result<Augmented> {
    let h = t1 - t0;
    let tm = 0.5 * (t0 + t1);
    let k1 = augmented_rhs(model, fb, t0, y)?;
    let k2 = augmented_rhs(model, fb, tm, &y.axpy(0.5 * h, &k1))?;
    let k3 = augmented_rhs(model, fb, tm, &y.axpy(0.5 * h, &k2))?;
    let k4 = augmented_rhs(model, fb, t1, &y.axpy(h, &k3))?;
    Ok(y.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4))
}

/// RK4 on `[t0, T]` with `steps` uniform steps; see [`propagate_moments_between`].
pub fn propagate_moments(
    model: &LqModel,
    fb: &AffineFeedback,
    t0: f64,
    ms0: &MomentState,
    steps: usize,
) -> Result<MomentTrajectory> {
    propagate_moments_between(model, fb, t0, model.horizon, ms0, steps)
}

/// RK4 on `[t0, t1]` with `steps` uniform recorded steps. Steps are split at
/// knots of the feedback and model schedules so no RK4 stage straddles a
/// kink of a piecewise-linear coefficient.
pub fn propagate_moments_between(
    model: &LqModel,
    fb: &AffineFeedback,
    t0: f64,
    t1: f64,
    ms0: &MomentState,
    steps: usize,
) -> Result<MomentTrajectory> {
    fb.check_dims(model.dims)?;
    check_dim(model, ms0)?;
    if steps == 0 {
        return Err(Error::InvalidInput("step count must be >= 1".into()));
    }
    let t0 = clamp_to_domain(t0, 0.0, model.horizon)?;
    let t1 = clamp_to_domain(t1, 0.0, model.horizon)?;
    if t1 < t0 {
        return Err(Error::InvalidInput(format!("end time {t1} precedes start time {t0}")));
    }

    let mut traj = MomentTrajectory {
        times: vec![t0],
        states: vec![ms0.clone()],
        running: vec![0.0],
        clip_count: 0,
    };
    if t1 == t0 {
        return Ok(traj);
    }

    let mut kinks = fb.breakpoints();
    kinks.extend(model.breakpoints());
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();

    let node = |j: usize| {
        if j == steps {
            t1
        } else {
            t0 + (t1 - t0) * j as f64 / steps as f64
        }
    };
    let mut y = Augmented {
        mean: ms0.mean.clone(),
        cov: ms0.cov.clone(),
        running: 0.0,
    };
    let mut first_kink = 0;
    for j in 0..steps {
        let (a, b) = (node(j), node(j + 1));
        let eps = 1e-9 * (b - a);
        while first_kink < kinks.len() && kinks[first_kink] <= a + eps {
            first_kink += 1;
        }
        let mut start = a;
        let mut idx = first_kink;
        while idx < kinks.len() && kinks[idx] < b - eps {
            y = rk4_step(model, fb, start, kinks[idx], &y)?;
            start = kinks[idx];
            idx += 1;
        }
        y = rk4_step(model, fb, start, b, &y)?;

        symmetrize(&mut y.cov);
        let lowest = min_eigenvalue(&y.cov);
        if !lowest.is_finite() || lowest < INSTABILITY_THRESHOLD {
            return Err(Error::Instability { t: b, eigenvalue: lowest });
        }
        if lowest < CLIP_THRESHOLD {
            clip_psd(&mut y.cov);
            traj.clip_count += 1;
        }
        traj.times.push(b);
        traj.states.push(MomentState {
            mean: y.mean.clone(),
            cov: y.cov.clone(),
        });
        traj.running.push(y.running);
    }
    Ok(traj)
}

/// Total expected cost `∫ f̂ + ĝ(final law)` of a feedback from `(t0, ms0)`.
pub fn cost_from_moments(
    model: &LqModel,
    fb: &AffineFeedback,
    t0: f64,
    ms0: &MomentState,
    steps: usize,
) -> Result<f64> {
    let traj = propagate_moments(model, fb, t0, ms0, steps)?;
    Ok(traj.final_running() + g_hat(model, traj.final_state())?)
}

/// Dynamic-programming consistency at `(t, θ)` under the optimal feedback:
/// `|v(t, μ) − ∫_t^θ f̂ − v(θ, μ_θ)|`.
pub fn dpp_check(
    model: &LqModel,
    sol: &RiccatiSolution,
    t: f64,
    theta: f64,
    ms: &MomentState,
    steps: usize,
) -> Result<f64> {
    let fb = optimal_feedback(model, sol)?;
    dpp_check_with(model, sol, &fb, t, theta, ms, steps)
}

/// [`dpp_check`] with a prebuilt optimal feedback.
pub fn dpp_check_with(
    model: &LqModel,
    sol: &RiccatiSolution,
    fb: &AffineFeedback,
    t: f64,
    theta: f64,
    ms: &MomentState,
    steps: usize,
) -> Result<f64> {
    if theta < t {
        return Err(Error::InvalidInput(format!("need t <= theta, got t = {t}, theta = {theta}")));
    }
    let traj = propagate_moments_between(model, fb, t, theta, ms, steps)?;
    let lhs = value(sol, t, ms)?;
    let rhs = traj.final_running() + value(sol, theta, traj.final_state())?;
    Ok((lhs - rhs).abs())
}
