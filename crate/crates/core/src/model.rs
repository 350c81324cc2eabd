//! The LQ McKean-Vlasov model: affine dynamics in `(x, a, E[X], E[a])` with
//! scalar Brownian noise, and quadratic running/terminal costs.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, symmetrize};
use crate::schedule::{clamp_to_domain, CoefficientSchedule};

/// Cost matrices closer to symmetric than this are symmetrized on validation.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dimensions {
    /// State dimension `d`.
    pub state: usize,
    /// Control dimension `m`.
    pub control: usize,
}

impl Dimensions {
    pub fn new(state: usize, control: usize) -> Self {
        Dimensions { state, control }
    }
}

/// Drift `b0 + B x + B̄ E[X] + C a + C̄ E[a]` and diffusion
/// `σ0 + D x + D̄ E[X] + F a + F̄ E[a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqDynamics {
    pub b0: CoefficientSchedule,
    pub b: CoefficientSchedule,
    pub b_bar: CoefficientSchedule,
    pub c: CoefficientSchedule,
    pub c_bar: CoefficientSchedule,
    pub sigma0: CoefficientSchedule,
    pub d: CoefficientSchedule,
    pub d_bar: CoefficientSchedule,
    pub f: CoefficientSchedule,
    pub f_bar: CoefficientSchedule,
}

impl LqDynamics {
    pub fn zeros(dims: Dimensions) -> Self {
        let (d, m) = (dims.state, dims.control);
        LqDynamics {
            b0: CoefficientSchedule::zeros(d, 1),
            b: CoefficientSchedule::zeros(d, d),
            b_bar: CoefficientSchedule::zeros(d, d),
            c: CoefficientSchedule::zeros(d, m),
            c_bar: CoefficientSchedule::zeros(d, m),
            sigma0: CoefficientSchedule::zeros(d, 1),
            d: CoefficientSchedule::zeros(d, d),
            d_bar: CoefficientSchedule::zeros(d, d),
            f: CoefficientSchedule::zeros(d, m),
            f_bar: CoefficientSchedule::zeros(d, m),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqCost {
    pub q2: CoefficientSchedule,
    pub q2_bar: CoefficientSchedule,
    pub r2: CoefficientSchedule,
    pub r2_bar: CoefficientSchedule,
    pub m2: CoefficientSchedule,
    pub m2_bar: CoefficientSchedule,
    pub q1: CoefficientSchedule,
    pub q1_bar: CoefficientSchedule,
    pub r1: CoefficientSchedule,
    pub r1_bar: CoefficientSchedule,
    pub p2: DMatrix<f64>,
    pub p2_bar: DMatrix<f64>,
    pub p1: DVector<f64>,
    pub p1_bar: DVector<f64>,
}

impl LqCost {
    pub fn zeros(dims: Dimensions) -> Self {
        let (d, m) = (dims.state, dims.control);
        LqCost {
            q2: CoefficientSchedule::zeros(d, d),
            q2_bar: CoefficientSchedule::zeros(d, d),
            r2: CoefficientSchedule::zeros(m, m),
            r2_bar: CoefficientSchedule::zeros(m, m),
            m2: CoefficientSchedule::zeros(d, m),
            m2_bar: CoefficientSchedule::zeros(d, m),
            q1: CoefficientSchedule::zeros(d, 1),
            q1_bar: CoefficientSchedule::zeros(d, 1),
            r1: CoefficientSchedule::zeros(m, 1),
            r1_bar: CoefficientSchedule::zeros(m, 1),
            p2: DMatrix::zeros(d, d),
            p2_bar: DMatrix::zeros(d, d),
            p1: DVector::zeros(d),
            p1_bar: DVector::zeros(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqModel {
    pub dims: Dimensions,
    pub horizon: f64,
    pub dynamics: LqDynamics,
    pub cost: LqCost,
}

/// One failed invariant, tagged with the coefficient it concerns.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub coefficient: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, coefficient: &str, message: String) {
        self.violations.push(Violation {
            coefficient: coefficient.to_string(),
            message,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

const SYMMETRIC_SCHEDULES: [&str; 4] = ["Q2", "Q2_bar", "R2", "R2_bar"];

impl LqModel {
    /// All-zero coefficients of the right shapes.
    pub fn zeros(dims: Dimensions, horizon: f64) -> Self {
        LqModel {
            dims,
            horizon,
            dynamics: LqDynamics::zeros(dims),
            cost: LqCost::zeros(dims),
        }
    }

    /// Every time-dependent coefficient with its name and expected shape.
    pub fn schedules(&self) -> Vec<(&'static str, &CoefficientSchedule, (usize, usize))> {
        let (d, m) = (self.dims.state, self.dims.control);
        let dy = &self.dynamics;
        let c = &self.cost;
        vec![
            ("b0", &dy.b0, (d, 1)),
            ("B", &dy.b, (d, d)),
            ("B_bar", &dy.b_bar, (d, d)),
            ("C", &dy.c, (d, m)),
            ("C_bar", &dy.c_bar, (d, m)),
            ("sigma0", &dy.sigma0, (d, 1)),
            ("D", &dy.d, (d, d)),
            ("D_bar", &dy.d_bar, (d, d)),
            ("F", &dy.f, (d, m)),
            ("F_bar", &dy.f_bar, (d, m)),
            ("Q2", &c.q2, (d, d)),
            ("Q2_bar", &c.q2_bar, (d, d)),
            ("R2", &c.r2, (m, m)),
            ("R2_bar", &c.r2_bar, (m, m)),
            ("M2", &c.m2, (d, m)),
            ("M2_bar", &c.m2_bar, (d, m)),
            ("q1", &c.q1, (d, 1)),
            ("q1_bar", &c.q1_bar, (d, 1)),
            ("r1", &c.r1, (m, 1)),
            ("r1_bar", &c.r1_bar, (m, 1)),
        ]
    }

    pub(crate) fn schedules_mut(&mut self) -> Vec<(&'static str, &mut CoefficientSchedule)> {
        let dy = &mut self.dynamics;
        let c = &mut self.cost;
        vec![
            ("b0", &mut dy.b0),
            ("B", &mut dy.b),
            ("B_bar", &mut dy.b_bar),
            ("C", &mut dy.c),
            ("C_bar", &mut dy.c_bar),
            ("sigma0", &mut dy.sigma0),
            ("D", &mut dy.d),
            ("D_bar", &mut dy.d_bar),
            ("F", &mut dy.f),
            ("F_bar", &mut dy.f_bar),
            ("Q2", &mut c.q2),
            ("Q2_bar", &mut c.q2_bar),
            ("R2", &mut c.r2),
            ("R2_bar", &mut c.r2_bar),
            ("M2", &mut c.m2),
            ("M2_bar", &mut c.m2_bar),
            ("q1", &mut c.q1),
            ("q1_bar", &mut c.q1_bar),
            ("r1", &mut c.r1),
            ("r1_bar", &mut c.r1_bar),
        ]
    }

    /// Union of all coefficient knot times strictly inside `(0, T)`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .schedules()
            .iter()
            .flat_map(|(_, s, _)| s.knot_times().iter().copied())
            .filter(|&t| t > 0.0 && t < self.horizon)
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Checks, then symmetrizes the near-symmetric cost matrices.
    pub fn validated(mut self) -> Result<LqModel> {
        let report = validate_model(&self);
        if !report.is_ok() {
            return Err(Error::InvalidModel(report));
        }
        for (name, s) in self.schedules_mut() {
            if SYMMETRIC_SCHEDULES.contains(&name) {
                *s = s.map(|m| {
                    let mut m = m.clone();
                    symmetrize(&mut m);
                    m
                });
            }
        }
        symmetrize(&mut self.cost.p2);
        symmetrize(&mut self.cost.p2_bar);
        Ok(self)
    }

    /// All coefficients evaluated at `t` (checked against `[0, T]`).
    pub fn coefficients_at(&self, t: f64) -> Result<Coefficients> {
        let t = clamp_to_domain(t, 0.0, self.horizon)?;
        let dy = &self.dynamics;
        let c = &self.cost;
        let col = |s: &CoefficientSchedule| DVector::from_column_slice(s.at(t).as_slice());
        Ok(Coefficients {
            b0: col(&dy.b0),
            b: dy.b.at(t),
            b_bar: dy.b_bar.at(t),
            c: dy.c.at(t),
            c_bar: dy.c_bar.at(t),
            sigma0: col(&dy.sigma0),
            d: dy.d.at(t),
            d_bar: dy.d_bar.at(t),
            f: dy.f.at(t),
            f_bar: dy.f_bar.at(t),
            q2: c.q2.at(t),
            q2_bar: c.q2_bar.at(t),
            r2: c.r2.at(t),
            r2_bar: c.r2_bar.at(t),
            m2: c.m2.at(t),
            m2_bar: c.m2_bar.at(t),
            q1: col(&c.q1),
            q1_bar: col(&c.q1_bar),
            r1: col(&c.r1),
            r1_bar: col(&c.r1_bar),
        })
    }
}

/// Reports every shape, span, symmetry and knot violation. Never fails.
pub fn validate_model(model: &LqModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (d, m) = (model.dims.state, model.dims.control);
    if d == 0 {
        report.push("dims", "state dimension d must be >= 1".into());
    }
    if m == 0 {
        report.push("dims", "control dimension m must be >= 1".into());
    }
    let horizon = model.horizon;
    if !(horizon > 0.0 && horizon.is_finite()) {
        report.push("horizon", format!("horizon must be positive and finite, got {horizon}"));
    }
    for (name, s, shape) in model.schedules() {
        if s.shape() != shape {
            report.push(
                name,
                format!("{name} has shape {:?}, expected {:?}", s.shape(), shape),
            );
            continue;
        }
        if !s.spans(horizon) {
            report.push(name, format!("schedule {name} does not span [0,T]"));
        }
        if let CoefficientSchedule::Tabulated { values, .. } | CoefficientSchedule::Cubic { values, .. } = s {
            if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                report.push(name, format!("{name} has non-finite entries"));
            }
        }
        if SYMMETRIC_SCHEDULES.contains(&name) {
            let worst = match s {
                CoefficientSchedule::Constant(v) => asymmetry_rel(v),
                CoefficientSchedule::Tabulated { values, .. } | CoefficientSchedule::Cubic { values, .. } => {
                    values.iter().map(asymmetry_rel).fold(0.0, f64::max)
                }
            };
            if worst > SYMMETRY_TOL {
                report.push(name, format!("{name} not symmetric (asymmetry {worst:e})"));
            }
        }
    }
    let c = &model.cost;
    for (name, p) in [("P2", &c.p2), ("P2_bar", &c.p2_bar)] {
        if p.shape() != (d, d) {
            report.push(name, format!("{name} has shape {:?}, expected {:?}", p.shape(), (d, d)));
        } else if asymmetry_rel(p) > SYMMETRY_TOL {
            report.push(name, format!("{name} not symmetric (asymmetry {:e})", asymmetry_rel(p)));
        }
    }
    for (name, p) in [("p1", &c.p1), ("p1_bar", &c.p1_bar)] {
        if p.len() != d {
            report.push(name, format!("{name} has length {}, expected {d}", p.len()));
        }
    }
    report
}

fn asymmetry_rel(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    asymmetry(m) / m.amax().max(1.0)
}

/// Model coefficients frozen at one time.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub b0: DVector<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub sigma0: DVector<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub f_bar: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q2_bar: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub r2_bar: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub m2_bar: DMatrix<f64>,
    pub q1: DVector<f64>,
    pub q1_bar: DVector<f64>,
    pub r1: DVector<f64>,
    pub r1_bar: DVector<f64>,
}

/// `out += M v` on raw column-major storage.
#[inline]
pub(crate) fn gemv_acc(out: &mut [f64], m: &DMatrix<f64>, v: &[f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &mij) in out.iter_mut().zip(col) {
            *o += mij * vj;
        }
    }
}

/// `x^T M y` on raw storage.
#[inline]
pub(crate) fn bilinear(x: &[f64], m: &DMatrix<f64>, y: &[f64]) -> f64 {
    let rows = m.nrows();
    let data = m.as_slice();
    let mut acc = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        let col = &data[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for (&xi, &mij) in x.iter().zip(col) {
            s += xi * mij;
        }
        acc += s * yj;
    }
    acc
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl Coefficients {
    pub fn drift_into(&self, x: &[f64], a: &[f64], mean_x: &[f64], mean_a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.b0.as_slice());
        gemv_acc(out, &self.b, x);
        gemv_acc(out, &self.b_bar, mean_x);
        gemv_acc(out, &self.c, a);
        gemv_acc(out, &self.c_bar, mean_a);
    }

    pub fn diffusion_into(&self, x: &[f64], a: &[f64], mean_x: &[f64], mean_a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.sigma0.as_slice());
        gemv_acc(out, &self.d, x);
        gemv_acc(out, &self.d_bar, mean_x);
        gemv_acc(out, &self.f, a);
        gemv_acc(out, &self.f_bar, mean_a);
    }

    pub fn running_cost(&self, x: &[f64], a: &[f64], mean_x: &[f64], mean_a: &[f64]) -> f64 {
        bilinear(x, &self.q2, x)
            + bilinear(mean_x, &self.q2_bar, mean_x)
            + bilinear(a, &self.r2, a)
            + bilinear(mean_a, &self.r2_bar, mean_a)
            + 2.0 * bilinear(x, &self.m2, a)
            + 2.0 * bilinear(mean_x, &self.m2_bar, mean_a)
            + dot(self.q1.as_slice(), x)
            + dot(self.q1_bar.as_slice(), mean_x)
            + dot(self.r1.as_slice(), a)
            + dot(self.r1_bar.as_slice(), mean_a)
    }
}

pub(crate) fn terminal_cost_slice(cost: &LqCost, x: &[f64], mean_x: &[f64]) -> f64 {
    bilinear(x, &cost.p2, x)
        + bilinear(mean_x, &cost.p2_bar, mean_x)
        + dot(cost.p1.as_slice(), x)
        + dot(cost.p1_bar.as_slice(), mean_x)
}

fn check_len(what: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn check_point(model: &LqModel, x: &DVector<f64>, a: &DVector<f64>, mx: &DVector<f64>, ma: &DVector<f64>) -> Result<()> {
    let (d, m) = (model.dims.state, model.dims.control);
    check_len("x", x, d)?;
    check_len("a", a, m)?;
    check_len("mean_x", mx, d)?;
    check_len("mean_a", ma, m)
}

pub fn drift(
    model: &LqModel,
    t: f64,
    x: &DVector<f64>,
    a: &DVector<f64>,
    mean_x: &DVector<f64>,
    mean_a: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_point(model, x, a, mean_x, mean_a)?;
    let coef = model.coefficients_at(t)?;
    let mut out = DVector::zeros(model.dims.state);
    coef.drift_into(x.as_slice(), a.as_slice(), mean_x.as_slice(), mean_a.as_slice(), out.as_mut_slice());
    Ok(out)
}

pub fn diffusion(
    model: &LqModel,
    t: f64,
    x: &DVector<f64>,
    a: &DVector<f64>,
    mean_x: &DVector<f64>,
    mean_a: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_point(model, x, a, mean_x, mean_a)?;
    let coef = model.coefficients_at(t)?;
    let mut out = DVector::zeros(model.dims.state);
    coef.diffusion_into(x.as_slice(), a.as_slice(), mean_x.as_slice(), mean_a.as_slice(), out.as_mut_slice());
    Ok(out)
}

pub fn running_cost(
    model: &LqModel,
    t: f64,
    x: &DVector<f64>,
    a: &DVector<f64>,
    mean_x: &DVector<f64>,
    mean_a: &DVector<f64>,
) -> Result<f64> {
    check_point(model, x, a, mean_x, mean_a)?;
    let coef = model.coefficients_at(t)?;
    Ok(coef.running_cost(x.as_slice(), a.as_slice(), mean_x.as_slice(), mean_a.as_slice()))
}

pub fn terminal_cost(model: &LqModel, x: &DVector<f64>, mean_x: &DVector<f64>) -> Result<f64> {
    check_len("x", x, model.dims.state)?;
    check_len("mean_x", mean_x, model.dims.state)?;
    Ok(terminal_cost_slice(&model.cost, x.as_slice(), mean_x.as_slice()))
}
