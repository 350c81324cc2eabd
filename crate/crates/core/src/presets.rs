//! Worked examples with closed-form or high-accuracy references: a
//! mean-variance portfolio problem and an inter-bank systemic-risk model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dimensions, LqModel};
use crate::quadrature::{integrate_piecewise, DEFAULT_TOL};
use crate::riccati::{RiccatiSolution, RiccatiState};
use crate::schedule::{clamp_to_domain, CoefficientSchedule};
use crate::state::MomentState;

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn unknown_param(preset: &str, name: &str, known: &[&str]) -> Error {
    Error::InvalidInput(format!(
        "unknown parameter '{name}' for preset {preset} (expected one of: {})",
        known.join(", ")
    ))
}

/// Wealth `dX = rX dt + a(ρ dt + ϑ dB)`, criterion `(η/2)Var(X_T) − E[X_T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanVarianceParams {
    pub r: CoefficientSchedule,
    pub rho: CoefficientSchedule,
    pub theta: CoefficientSchedule,
    pub eta: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for MeanVarianceParams {
    fn default() -> Self {
        MeanVarianceParams::constant(0.0, 1.0, 1.0, 2.0, 1.0, 1.0)
    }
}

impl MeanVarianceParams {
    pub const NAMES: [&'static str; 6] = ["r", "rho", "theta", "eta", "x0", "T"];

    pub fn constant(r: f64, rho: f64, theta: f64, eta: f64, x0: f64, horizon: f64) -> Self {
        MeanVarianceParams {
            r: CoefficientSchedule::scalar(r),
            rho: CoefficientSchedule::scalar(rho),
            theta: CoefficientSchedule::scalar(theta),
            eta,
            x0,
            horizon,
        }
    }

    /// Overrides one parameter by name; schedule parameters become constants.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "r" => self.r = CoefficientSchedule::scalar(value),
            "rho" => self.rho = CoefficientSchedule::scalar(value),
            "theta" => self.theta = CoefficientSchedule::scalar(value),
            "eta" => self.eta = value,
            "x0" => self.x0 = value,
            "T" => self.horizon = value,
            _ => return Err(unknown_param("mean-variance", name, &Self::NAMES)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidInput(format!("eta must be positive, got {}", self.eta)));
        }
        for (name, s) in [("r", &self.r), ("rho", &self.rho), ("theta", &self.theta)] {
            if s.shape() != (1, 1) {
                return Err(Error::Shape(format!("{name} must be 1x1, got {:?}", s.shape())));
            }
            if !s.spans(self.horizon) {
                return Err(Error::InvalidInput(format!("schedule {name} does not span [0,T]")));
            }
        }
        // piecewise linear: positive at 0, T and every knot means positive throughout
        let mut times = vec![0.0, self.horizon];
        times.extend_from_slice(self.theta.knot_times());
        if let Some(t) = times.into_iter().find(|&t| !(self.theta.at(t)[(0, 0)] > 0.0)) {
            return Err(Error::InvalidInput(format!("theta must be positive, fails at t = {t}")));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> MomentState {
        MomentState::dirac(DVector::from_element(1, self.x0))
    }

    fn scalar(s: &CoefficientSchedule, t: f64) -> f64 {
        s.at(t)[(0, 0)]
    }

    fn breaks(&self) -> Vec<f64> {
        let mut b: Vec<f64> = [&self.r, &self.rho, &self.theta]
            .iter()
            .flat_map(|s| s.knot_times().iter().copied())
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    fn integral(&self, f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        integrate_piecewise(f, a, b, &self.breaks(), DEFAULT_TOL)
    }

    /// `∫_a^b r`.
    fn int_r(&self, a: f64, b: f64) -> f64 {
        self.integral(|s| Self::scalar(&self.r, s), a, b)
    }

    /// `∫_a^b ρ²/ϑ²`.
    fn int_sharpe2(&self, a: f64, b: f64) -> f64 {
        self.integral(
            |s| {
                let (rho, theta) = (Self::scalar(&self.rho, s), Self::scalar(&self.theta, s));
                rho * rho / (theta * theta)
            },
            a,
            b,
        )
    }
}

pub fn mean_variance_model(p: &MeanVarianceParams) -> Result<LqModel> {
    p.validate()?;
    let mut model = LqModel::zeros(Dimensions::new(1, 1), p.horizon);
    model.dynamics.b = p.r.clone();
    model.dynamics.c = p.rho.clone();
    model.dynamics.f = p.theta.clone();
    model.cost.p2 = m1(p.eta / 2.0);
    model.cost.p2_bar = m1(-p.eta / 2.0);
    model.cost.p1_bar = DVector::from_element(1, -1.0);
    model.validated()
}

/// `Λ = (η/2)exp(∫2r − ρ²/ϑ²)`, `Γ = 0`, `γ = −exp(∫r)`,
/// `χ = −(exp(∫ρ²/ϑ²) − 1)/(2η)`, all integrals over `[t, T]`.
pub fn mean_variance_closed_form(p: &MeanVarianceParams, t: f64) -> Result<RiccatiState> {
    p.validate()?;
    let t = clamp_to_domain(t, 0.0, p.horizon)?;
    let ir = p.int_r(t, p.horizon);
    let iq = p.int_sharpe2(t, p.horizon);
    Ok(RiccatiState {
        lambda: m1(p.eta / 2.0 * (2.0 * ir - iq).exp()),
        gamma: m1(0.0),
        gamma_vec: DVector::from_element(1, -ir.exp()),
        chi: -(iq.exp_m1()) / (2.0 * p.eta),
    })
}

/// Optimal control `−(ρ/ϑ²)(x − E[X]) + (ρ/(ηϑ²))exp(∫_t^T ρ²/ϑ² − r)`.
pub fn mean_variance_optimal_control(p: &MeanVarianceParams, t: f64, x: f64, mean_x: f64) -> Result<f64> {
    p.validate()?;
    let t = clamp_to_domain(t, 0.0, p.horizon)?;
    let rho = MeanVarianceParams::scalar(&p.rho, t);
    let theta2 = MeanVarianceParams::scalar(&p.theta, t).powi(2);
    let growth = (p.int_sharpe2(t, p.horizon) - p.int_r(t, p.horizon)).exp();
    Ok(-rho / theta2 * (x - mean_x) + rho / (p.eta * theta2) * growth)
}

/// Optimal wealth mean
/// `x0·exp(∫_0^t r) + (1/η)exp(∫_t^T ρ²/ϑ² − r)(exp(∫_0^t ρ²/ϑ²) − 1)`.
pub fn mean_variance_mean_trajectory(p: &MeanVarianceParams, t: f64) -> Result<f64> {
    p.validate()?;
    let t = clamp_to_domain(t, 0.0, p.horizon)?;
    let tail = (p.int_sharpe2(t, p.horizon) - p.int_r(t, p.horizon)).exp();
    Ok(p.x0 * p.int_r(0.0, t).exp() + tail * p.int_sharpe2(0.0, t).exp_m1() / p.eta)
}

/// Reserves `dX = [κ(E[X] − X) + a]dt + σ dB` with running cost
/// `½a² − qa(E[X] − X) + (η/2)(E[X] − X)²` and terminal `(c/2)Var(X_T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemicParams {
    pub kappa: f64,
    pub sigma: f64,
    pub q: f64,
    pub eta: f64,
    pub c: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for SystemicParams {
    fn default() -> Self {
        SystemicParams {
            kappa: 0.5,
            sigma: 1.0,
            q: 0.5,
            eta: 1.0,
            c: 0.0,
            x0: 1.0,
            horizon: 1.0,
        }
    }
}

impl SystemicParams {
    pub const NAMES: [&'static str; 7] = ["kappa", "sigma", "q", "eta", "c", "x0", "T"];

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "kappa" => self.kappa = value,
            "sigma" => self.sigma = value,
            "q" => self.q = value,
            "eta" => self.eta = value,
            "c" => self.c = value,
            "x0" => self.x0 = value,
            "T" => self.horizon = value,
            _ => return Err(unknown_param("systemic-risk", name, &Self::NAMES)),
        }
        Ok(())
    }

    fn discriminant(&self) -> f64 {
        (self.kappa + self.q).powi(2) + (self.eta - self.q * self.q)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.horizon > 0.0 && self.horizon.is_finite(), "horizon must be positive"),
            (self.kappa >= 0.0, "kappa must be non-negative"),
            (self.sigma > 0.0, "sigma must be positive"),
            (self.q > 0.0, "q must be positive"),
            (self.eta > 0.0, "eta must be positive"),
            (self.c >= 0.0, "c must be non-negative"),
            (self.discriminant() >= 0.0, "(kappa+q)^2 + eta - q^2 must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidInput(format!("{msg} ({self:?})"))),
            None => Ok(()),
        }
    }

    pub fn initial_state(&self) -> MomentState {
        MomentState::dirac(DVector::from_element(1, self.x0))
    }
}

pub fn systemic_model(p: &SystemicParams) -> Result<LqModel> {
    p.validate()?;
    let mut model = LqModel::zeros(Dimensions::new(1, 1), p.horizon);
    let dy = &mut model.dynamics;
    dy.b = CoefficientSchedule::scalar(-p.kappa);
    dy.b_bar = CoefficientSchedule::scalar(p.kappa);
    dy.c = CoefficientSchedule::scalar(1.0);
    dy.sigma0 = CoefficientSchedule::scalar(p.sigma);
    let cost = &mut model.cost;
    cost.q2 = CoefficientSchedule::scalar(p.eta / 2.0);
    cost.q2_bar = CoefficientSchedule::scalar(-p.eta / 2.0);
    cost.r2 = CoefficientSchedule::scalar(0.5);
    cost.m2 = CoefficientSchedule::scalar(p.q / 2.0);
    cost.m2_bar = CoefficientSchedule::scalar(-p.q / 2.0);
    cost.p2 = m1(p.c / 2.0);
    cost.p2_bar = m1(-p.c / 2.0);
    model.validated()
}

/// `δ± = −(κ + q) ± √((κ + q)² + (η − q²))`.
pub fn systemic_delta(p: &SystemicParams) -> Result<(f64, f64)> {
    let disc = p.discriminant();
    if !(disc >= 0.0) {
        return Err(Error::InvalidInput(format!("negative discriminant {disc}")));
    }
    let root = disc.sqrt();
    let s = -(p.kappa + p.q);
    Ok((s + root, s - root))
}

/// Reference steps for the scalar systemic oracle.
pub const SYSTEMIC_ORACLE_STEPS: usize = 1_000_000;
const BLOW_UP: f64 = 1e12;

/// Dense backward RK4 solution of the scalar Λ equation
/// `Λ' = 2(κ + q)Λ + 2Λ² + ½(q² − η)`, `Λ(T) = c/2`, with cubic Hermite
/// queries between grid points.
#[derive(Clone, Debug)]
pub struct SystemicLambdaOracle {
    horizon: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl SystemicLambdaOracle {
    pub fn new(p: &SystemicParams, steps: usize) -> Result<Self> {
        if !(p.horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidInput("oracle needs a positive horizon and steps".into()));
        }
        let (a, b) = (2.0 * (p.kappa + p.q), 0.5 * (p.q * p.q - p.eta));
        let f = |l: f64| a * l + 2.0 * l * l + b;
        let h = p.horizon / steps as f64;
        let mut values = vec![0.0; steps + 1];
        let mut slopes = vec![0.0; steps + 1];
        let mut l = p.c / 2.0;
        values[steps] = l;
        slopes[steps] = f(l);
        for k in (0..steps).rev() {
            let k1 = f(l);
            let k2 = f(l - 0.5 * h * k1);
            let k3 = f(l - 0.5 * h * k2);
            let k4 = f(l - h * k3);
            l -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !l.is_finite() || l.abs() > BLOW_UP {
                return Err(Error::RiccatiBreakdown {
                    t: p.horizon * k as f64 / steps as f64,
                    matrix: "Lambda",
                    eigenvalue: l,
                });
            }
            values[k] = l;
            slopes[k] = f(l);
        }
        Ok(SystemicLambdaOracle {
            horizon: p.horizon,
            values,
            slopes,
        })
    }

    pub fn lambda(&self, t: f64) -> Result<f64> {
        let t = clamp_to_domain(t, 0.0, self.horizon)?;
        let steps = self.values.len() - 1;
        let h = self.horizon / steps as f64;
        let k = ((t / h).floor() as usize).min(steps - 1);
        let s = (t - k as f64 * h) / h;
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let (d0, d1) = (self.slopes[k] * h, self.slopes[k + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * d1)
    }
}

/// Λ(t) of the systemic example from the high-accuracy scalar oracle.
pub fn systemic_lambda_reference(p: &SystemicParams, t: f64) -> Result<f64> {
    p.validate()?;
    clamp_to_domain(t, 0.0, p.horizon)?;
    SystemicLambdaOracle::new(p, SYSTEMIC_ORACLE_STEPS)?.lambda(t)
}

/// Optimal control `−(2Λ(t) + q)(x − E[X])` with Λ from `sol`.
pub fn systemic_optimal_control(p: &SystemicParams, sol: &RiccatiSolution, t: f64, x: f64, mean_x: f64) -> Result<f64> {
    let lambda = sol.state_at(t)?.lambda[(0, 0)];
    Ok(-(2.0 * lambda + p.q) * (x - mean_x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn mean_variance_defaults_closed_form() {
        let p = MeanVarianceParams::default();
        let s0 = mean_variance_closed_form(&p, 0.0).unwrap();
        assert!((s0.lambda[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
        assert!((s0.gamma_vec[0] + 1.0).abs() < 1e-15);
        assert!((s0.chi + 0.25 * (E - 1.0)).abs() < 1e-14);
        let st = mean_variance_closed_form(&p, 1.0).unwrap();
        assert_eq!((st.lambda[(0, 0)], st.gamma_vec[0], st.chi), (1.0, -1.0, 0.0));
        assert!(mean_variance_closed_form(&p, 1.5).is_err());
    }

    #[test]
    fn mean_variance_control_and_mean() {
        let p = MeanVarianceParams::default();
        let a = mean_variance_optimal_control(&p, 0.0, 3.0, 3.0).unwrap();
        assert!((a - 0.5 * E).abs() < 1e-14);
        assert!((mean_variance_mean_trajectory(&p, 1.0).unwrap() - (1.0 + 0.5 * (E - 1.0))).abs() < 1e-14);
        assert_eq!(mean_variance_mean_trajectory(&p, 0.0).unwrap(), 1.0);
        let mut flat = p.clone();
        flat.set("rho", 0.0).unwrap();
        assert_eq!(mean_variance_optimal_control(&flat, 0.4, 2.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn tabulated_schedule_integrals() {
        // r ramps 0 → 0.2 on [0, 1]: ∫_0^1 r = 0.1
        let mut p = MeanVarianceParams::default();
        p.r = CoefficientSchedule::tabulated(vec![(0.0, m1(0.0)), (1.0, m1(0.2))]).unwrap();
        let s = mean_variance_closed_form(&p, 0.0).unwrap();
        assert!((s.gamma_vec[0] + 0.1f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn invariants_rejected() {
        let mut p = MeanVarianceParams::default();
        p.set("theta", 0.0).unwrap();
        assert!(mean_variance_model(&p).is_err());
        assert!(p.set("sigma", 1.0).is_err());
        let mut s = SystemicParams::default();
        s.set("q", 0.0).unwrap();
        assert!(systemic_model(&s).is_err());
        assert!(s.set("rho", 1.0).is_err());
    }

    #[test]
    fn delta_roots() {
        let (dp, dm) = systemic_delta(&SystemicParams::default()).unwrap();
        assert!((dp - (-1.0 + 1.75f64.sqrt())).abs() < 1e-15);
        assert!((dm - (-1.0 - 1.75f64.sqrt())).abs() < 1e-15);
        let p = SystemicParams {
            kappa: 0.0,
            q: 1.0,
            eta: 1.0,
            ..Default::default()
        };
        assert_eq!(systemic_delta(&p).unwrap(), (0.0, -2.0));
    }

    #[test]
    fn oracle_terminal_and_fixed_point() {
        let p = SystemicParams {
            c: 0.6,
            ..Default::default()
        };
        let o = SystemicLambdaOracle::new(&p, 1000).unwrap();
        assert!((o.lambda(1.0).unwrap() - 0.3).abs() < 1e-15);
        let still = SystemicParams {
            q: 1.0,
            eta: 1.0,
            ..Default::default()
        };
        let o = SystemicLambdaOracle::new(&still, 1000).unwrap();
        assert_eq!(o.lambda(0.37).unwrap(), 0.0);
    }
}
