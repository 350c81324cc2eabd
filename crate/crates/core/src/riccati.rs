//! Backward Riccati system for the value-function coefficients.
//!
//! The value of a law with mean `m` and covariance `Σ` is
//! `tr(Λ(t) Σ) + mᵀ Γ(t) m + γ(t)·m + χ(t)`; this module integrates the
//! matrix Riccati equations for `Λ`, `Γ` and the linear equations for `γ`,
//! `χ` from their terminal data at `T` down to `t = 0` with fixed-step RK4.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, NotPositive, SpdFactor};
use crate::model::{validate_model, Coefficients, LqModel};
use crate::schedule::clamp_to_domain;

/// Smallest admissible eigenvalue of `U` and `V` at every RK4 stage.
pub const POSITIVITY_FLOOR: f64 = 1e-10;

/// Default grid: at least 1000 steps and `Δt ≤ 1e-3`.
pub fn default_steps(horizon: f64) -> usize {
    ((horizon / 1e-3).ceil() as usize).max(1000)
}

/// `(Λ, Γ, γ, χ)` at one time, or its time derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiState {
    /// Weight of the covariance, `Λ`.
    pub lambda: DMatrix<f64>,
    /// Quadratic weight of the mean, `Γ`.
    pub gamma: DMatrix<f64>,
    /// Linear weight of the mean, `γ`.
    pub gamma_vec: DVector<f64>,
    pub chi: f64,
}

impl RiccatiState {
    /// `Λ(T) = P2`, `Γ(T) = P2 + P̄2`, `γ(T) = p1 + p̄1`, `χ(T) = 0`.
    pub fn terminal(model: &LqModel) -> Self {
        let c = &model.cost;
        let mut s = RiccatiState {
            lambda: c.p2.clone(),
            gamma: &c.p2 + &c.p2_bar,
            gamma_vec: &c.p1 + &c.p1_bar,
            chi: 0.0,
        };
        s.symmetrize();
        s
    }

    pub fn zeros(d: usize) -> Self {
        RiccatiState {
            lambda: DMatrix::zeros(d, d),
            gamma: DMatrix::zeros(d, d),
            gamma_vec: DVector::zeros(d),
            chi: 0.0,
        }
    }

    fn symmetrize(&mut self) {
        symmetrize(&mut self.lambda);
        symmetrize(&mut self.gamma);
    }

    /// `self + h * dir`.
    pub(crate) fn axpy(&self, h: f64, dir: &RiccatiState) -> RiccatiState {
        RiccatiState {
            lambda: &self.lambda + &dir.lambda * h,
            gamma: &self.gamma + &dir.gamma * h,
            gamma_vec: &self.gamma_vec + &dir.gamma_vec * h,
            chi: self.chi + h * dir.chi,
        }
    }

    pub(crate) fn lincomb(terms: &[(f64, &RiccatiState)]) -> RiccatiState {
        let d = terms[0].1.lambda.nrows();
        terms
            .iter()
            .fold(RiccatiState::zeros(d), |acc, (w, s)| acc.axpy(*w, s))
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &RiccatiState) -> f64 {
        (&self.lambda - &other.lambda)
            .amax()
            .max((&self.gamma - &other.gamma).amax())
            .max((&self.gamma_vec - &other.gamma_vec).amax())
            .max((self.chi - other.chi).abs())
    }

    fn is_finite(&self) -> bool {
        self.lambda.iter().chain(self.gamma.iter()).chain(self.gamma_vec.iter()).all(|v| v.is_finite())
            && self.chi.is_finite()
    }
}

/// `U`, `V`, `S`, `Z`, `Y` of the pointwise control minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryMatrices {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub fn auxiliary(model: &LqModel, t: f64, state: &RiccatiState) -> Result<AuxiliaryMatrices> {
    Ok(auxiliary_from(&model.coefficients_at(t)?, state))
}

pub(crate) fn auxiliary_from(c: &Coefficients, st: &RiccatiState) -> AuxiliaryMatrices {
    let lam = &st.lambda;
    let f_sum = &c.f + &c.f_bar;
    let d_sum = &c.d + &c.d_bar;
    let c_sum = &c.c + &c.c_bar;
    let lam_f_sum = lam * &f_sum;

    let mut u = c.f.transpose() * lam * &c.f + &c.r2;
    let mut v = f_sum.transpose() * &lam_f_sum + &c.r2 + &c.r2_bar;
    symmetrize(&mut u);
    symmetrize(&mut v);
    let s = c.d.transpose() * lam * &c.f + lam * &c.c + &c.m2;
    let z = d_sum.transpose() * &lam_f_sum + &st.gamma * &c_sum + &c.m2 + &c.m2_bar;
    // Y reads Λ (through σ0), not Γ
    let y = c_sum.transpose() * &st.gamma_vec + &c.r1 + &c.r1_bar + lam_f_sum.transpose() * &c.sigma0 * 2.0;
    AuxiliaryMatrices { u, v, s, z, y }
}

/// Cholesky factors of `U` and `V`, or a breakdown error at time `t`.
pub(crate) fn factor_uv(aux: &AuxiliaryMatrices, t: f64) -> Result<(SpdFactor, SpdFactor)> {
    let breakdown = |matrix: &'static str| move |e: NotPositive| Error::RiccatiBreakdown {
        t,
        matrix,
        eigenvalue: e.min_eigenvalue,
    };
    let fu = SpdFactor::new(&aux.u, POSITIVITY_FLOOR).map_err(breakdown("U"))?;
    let fv = SpdFactor::new(&aux.v, POSITIVITY_FLOOR).map_err(breakdown("V"))?;
    Ok((fu, fv))
}

/// Time derivative `(Λ', Γ', γ', χ')` prescribed by the Riccati system.
pub fn riccati_rhs(model: &LqModel, t: f64, state: &RiccatiState) -> Result<RiccatiState> {
    rhs_from(&model.coefficients_at(t)?, state, t)
}

pub(crate) fn rhs_from(c: &Coefficients, st: &RiccatiState, t: f64) -> Result<RiccatiState> {
    let aux = auxiliary_from(c, st);
    let (fu, fv) = factor_uv(&aux, t)?;
    let lam = &st.lambda;
    let gam = &st.gamma;
    let b_sum = &c.b + &c.b_bar;
    let d_sum = &c.d + &c.d_bar;

    let s_uinv_st = &aux.s * fu.solve(&aux.s.transpose());
    let z_vinv_zt = &aux.z * fv.solve(&aux.z.transpose());
    let vinv_y = fv.solve_vec(&aux.y);

    let lam_b = lam * &c.b;
    let mut d_lambda = -(&c.q2 + c.d.transpose() * lam * &c.d + &lam_b + lam_b.transpose() - s_uinv_st);
    let gam_b = gam * &b_sum;
    let mut d_gamma = -(&c.q2 + &c.q2_bar + d_sum.transpose() * lam * &d_sum + &gam_b + gam_b.transpose()
        - z_vinv_zt);
    let d_gamma_vec = -(b_sum.transpose() * &st.gamma_vec - &aux.z * &vinv_y
        + &c.q1
        + &c.q1_bar
        + d_sum.transpose() * lam * &c.sigma0 * 2.0
        + gam * &c.b0 * 2.0);
    let d_chi = -(-0.25 * aux.y.dot(&vinv_y) + st.gamma_vec.dot(&c.b0) + c.sigma0.dot(&(lam * &c.sigma0)));
    symmetrize(&mut d_lambda);
    symmetrize(&mut d_gamma);
    Ok(RiccatiState {
        lambda: d_lambda,
        gamma: d_gamma,
        gamma_vec: d_gamma_vec,
        chi: d_chi,
    })
}

/// Riccati coefficients on the uniform grid `t_k = k T / K`, together with
/// the right-hand side at each grid point (used for Hermite interpolation).
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    horizon: f64,
    steps: usize,
    states: Vec<RiccatiState>,
    derivatives: Vec<RiccatiState>,
}

/// Classical RK4 backward from `T` with `steps` uniform steps.
///
/// `U` and `V` must stay positive definite (eigenvalues above
/// [`POSITIVITY_FLOOR`]) at every stage; otherwise the solve stops with
/// [`Error::RiccatiBreakdown`] at the offending time.
pub fn solve_riccati(model: &LqModel, steps: usize) -> Result<RiccatiSolution> {
    if steps == 0 {
        return Err(Error::InvalidInput("step count must be >= 1".into()));
    }
    let report = validate_model(model);
    if !report.is_ok() {
        return Err(Error::InvalidModel(report));
    }
    let horizon = model.horizon;
    let time = |k: usize| horizon * k as f64 / steps as f64;
    let rhs = |t: f64, y: &RiccatiState| -> Result<RiccatiState> {
        let dy = rhs_from(&model.coefficients_at(t)?, y, t)?;
        if !dy.is_finite() {
            return Err(Error::RiccatiBreakdown {
                t,
                matrix: "Lambda",
                eigenvalue: f64::NAN,
            });
        }
        Ok(dy)
    };

    let mut states = Vec::with_capacity(steps + 1);
    let mut derivatives = Vec::with_capacity(steps + 1);
    let mut y = RiccatiState::terminal(model);
    let mut dy = rhs(horizon, &y)?;
    states.push(y.clone());
    derivatives.push(dy.clone());

    for k in (0..steps).rev() {
        let (t0, t1) = (time(k), time(k + 1));
        let h = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let k1 = dy;
        let k2 = rhs(tm, &y.axpy(-0.5 * h, &k1))?;
        let k3 = rhs(tm, &y.axpy(-0.5 * h, &k2))?;
        let k4 = rhs(t0, &y.axpy(-h, &k3))?;
        let incr = RiccatiState::lincomb(&[(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)]);
        y = y.axpy(-h / 6.0, &incr);
        y.symmetrize();
        dy = rhs(t0, &y)?;
        states.push(y.clone());
        derivatives.push(dy.clone());
    }
    states.reverse();
    derivatives.reverse();
    Ok(RiccatiSolution {
        horizon,
        steps,
        states,
        derivatives,
    })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    pub fn states(&self) -> &[RiccatiState] {
        &self.states
    }

    pub fn derivatives(&self) -> &[RiccatiState] {
        &self.derivatives
    }

    /// Stored state at grid points, cubic Hermite interpolation elsewhere.
    pub fn state_at(&self, t: f64) -> Result<RiccatiState> {
        let t = clamp_to_domain(t, 0.0, self.horizon)?;
        let k = self.interval(t);
        let (t0, t1) = (self.time(k), self.time(k + 1));
        if t == t0 {
            return Ok(self.states[k].clone());
        }
        if t == t1 {
            return Ok(self.states[k + 1].clone());
        }
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut out = RiccatiState::lincomb(&[
            (h00, &self.states[k]),
            (h * h10, &self.derivatives[k]),
            (h01, &self.states[k + 1]),
            (h * h11, &self.derivatives[k + 1]),
        ]);
        out.symmetrize();
        Ok(out)
    }

    /// Index `k` with `t_k <= t <= t_{k+1}`.
    fn interval(&self, t: f64) -> usize {
        let mut k = ((t / self.step()).floor() as usize).min(self.steps - 1);
        while k > 0 && self.time(k) > t {
            k -= 1;
        }
        while k + 1 < self.steps && self.time(k + 1) <= t {
            k += 1;
        }
        k
    }

    /// Exact integral of the Hermite interpolant of `Λ` over `[t, T]`.
    pub fn lambda_integral(&self, t: f64) -> Result<DMatrix<f64>> {
        let t = clamp_to_domain(t, 0.0, self.horizon)?;
        let d = self.states[0].lambda.nrows();
        let mut acc = DMatrix::zeros(d, d);
        let k0 = self.interval(t);
        // partial first interval via Simpson on the cubic (exact)
        let t1 = self.time(k0 + 1);
        if t < t1 {
            let mid = self.state_at(0.5 * (t + t1))?.lambda;
            let a = self.state_at(t)?.lambda;
            acc += (a + mid * 4.0 + &self.states[k0 + 1].lambda) * ((t1 - t) / 6.0);
        }
        for k in (k0 + 1)..self.steps {
            let h = self.time(k + 1) - self.time(k);
            acc += (&self.states[k].lambda + &self.states[k + 1].lambda) * (0.5 * h)
                + (&self.derivatives[k].lambda - &self.derivatives[k + 1].lambda) * (h * h / 12.0);
        }
        Ok(acc)
    }

    /// Copy with `Λ` (and its stored derivative) multiplied by `factor`.
    /// Used to check that the verification battery rejects a wrong solution.
    pub fn with_scaled_lambda(&self, factor: f64) -> RiccatiSolution {
        let scale = |v: &[RiccatiState]| {
            v.iter()
                .map(|s| RiccatiState {
                    lambda: &s.lambda * factor,
                    ..s.clone()
                })
                .collect()
        };
        RiccatiSolution {
            horizon: self.horizon,
            steps: self.steps,
            states: scale(&self.states),
            derivatives: scale(&self.derivatives),
        }
    }

    /// One row per grid point:
    /// `t,Lambda_00,…,Gamma_00,…,gamma_0,…,chi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.states[0].lambda.nrows();
        let mut header = vec!["t".to_string()];
        for name in ["Lambda", "Gamma"] {
            for i in 0..d {
                for j in 0..d {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        header.extend((0..d).map(|i| format!("gamma_{i}")));
        header.push("chi".into());
        writeln!(w, "{}", header.join(","))?;
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![self.time(k)];
            for m in [&s.lambda, &s.gamma] {
                for i in 0..d {
                    for j in 0..d {
                        row.push(m[(i, j)]);
                    }
                }
            }
            row.extend(s.gamma_vec.iter().copied());
            row.push(s.chi);
            let row: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn eval_solution(sol: &RiccatiSolution, t: f64) -> Result<RiccatiState> {
    sol.state_at(t)
}

/// Outcome of the sufficient conditions for well-posedness of the Riccati
/// system (nonnegative state weights, uniformly positive control weights).
#[derive(Clone, Debug, PartialEq)]
pub enum StandardConditions {
    Holds,
    Violated {
        condition: &'static str,
        /// `None` for the time-independent terminal weights.
        t: Option<f64>,
        min_eigenvalue: f64,
    },
}

impl StandardConditions {
    pub fn holds(&self) -> bool {
        matches!(self, StandardConditions::Holds)
    }
}

impl fmt::Display for StandardConditions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StandardConditions::Holds => f.write_str("holds"),
            StandardConditions::Violated {
                condition,
                t: Some(t),
                min_eigenvalue,
            } => write!(f, "{condition} at t = {t} (smallest eigenvalue {min_eigenvalue})"),
            StandardConditions::Violated {
                condition,
                t: None,
                min_eigenvalue,
            } => write!(f, "{condition} (smallest eigenvalue {min_eigenvalue})"),
        }
    }
}

/// Informational only: the solver never requires these conditions.
pub fn check_standard_conditions(model: &LqModel, delta: f64) -> Result<StandardConditions> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("positivity margin must be > 0, got {delta}")));
    }
    const TOL: f64 = 1e-12;
    let c = &model.cost;
    let p_sum = &c.p2 + &c.p2_bar;
    for (condition, m) in [("P2 not ≥ 0", &c.p2), ("P2 + P2_bar not ≥ 0", &p_sum)] {
        let lo = min_eigenvalue(m);
        if lo < -TOL {
            return Ok(StandardConditions::Violated {
                condition,
                t: None,
                min_eigenvalue: lo,
            });
        }
    }

    let mut times: Vec<f64> = vec![0.0, model.horizon];
    for s in [&c.q2, &c.q2_bar, &c.r2, &c.r2_bar] {
        times.extend_from_slice(s.knot_times());
    }
    times.sort_by(f64::total_cmp);
    times.dedup();

    type Pick = fn(&LqModel, f64) -> DMatrix<f64>;
    let checks: [(&'static str, Pick, f64); 4] = [
        ("Q2 not ≥ 0", |m, t| m.cost.q2.at(t), 0.0),
        ("Q2 + Q2_bar not ≥ 0", |m, t| m.cost.q2.at(t) + m.cost.q2_bar.at(t), 0.0),
        ("R2 not ≥ δI", |m, t| m.cost.r2.at(t), delta),
        ("R2 + R2_bar not ≥ δI", |m, t| m.cost.r2.at(t) + m.cost.r2_bar.at(t), delta),
    ];
    for (condition, pick, bound) in checks {
        for &t in &times {
            let lo = min_eigenvalue(&pick(model, t));
            if lo < bound - TOL {
                return Ok(StandardConditions::Violated {
                    condition,
                    t: Some(t),
                    min_eigenvalue: lo,
                });
            }
        }
    }
    Ok(StandardConditions::Holds)
}
