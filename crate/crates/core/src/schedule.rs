//! Deterministic coefficient functions of time.
//!
//! A schedule is a constant matrix, a list of `(t_k, matrix)` knots evaluated
//! by linear interpolation, or a piecewise cubic given by knot values and the
//! derivatives at both ends of every segment (cubic Hermite). All three are
//! closed under scaling and under addition on the union of knots, which is
//! what feedback perturbations rely on.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Slack allowed on time comparisons at domain edges.
pub(crate) const TIME_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientSchedule {
    Constant(DMatrix<f64>),
    Tabulated {
        times: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
    /// Segment `i` is the cubic on `[times[i], times[i+1]]` with end values
    /// `values[i]`, `values[i+1]` and end derivatives `d_start[i]`, `d_end[i]`.
    Cubic {
        times: Vec<f64>,
        values: Vec<DMatrix<f64>>,
        d_start: Vec<DMatrix<f64>>,
        d_end: Vec<DMatrix<f64>>,
    },
}

fn check_knots(times: &[f64], values: &[DMatrix<f64>]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput("tabulated schedule needs at least one knot".into()));
    }
    if times.len() != values.len() {
        return Err(Error::Shape(format!("{} knot times but {} values", times.len(), values.len())));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidInput(format!(
                "knot times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let shape = values[0].shape();
    if let Some((t, m)) = times.iter().zip(values).find(|(_, m)| m.shape() != shape) {
        return Err(Error::Shape(format!(
            "knot at t = {t} has shape {:?}, expected {:?}",
            m.shape(),
            shape
        )));
    }
    Ok(())
}

/// Index `i` of the segment `[times[i], times[i+1]]` containing `t`, or `None`
/// outside the knot range.
fn segment(times: &[f64], t: f64) -> Option<usize> {
    let n = times.len();
    if n < 2 || t < times[0] || t > times[n - 1] {
        return None;
    }
    Some(times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1)
}

impl CoefficientSchedule {
    pub fn constant(m: DMatrix<f64>) -> Self {
        CoefficientSchedule::Constant(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefficientSchedule::Constant(DMatrix::zeros(rows, cols))
    }

    /// A 1x1 constant.
    pub fn scalar(v: f64) -> Self {
        CoefficientSchedule::Constant(DMatrix::from_element(1, 1, v))
    }

    /// Knots must be non-empty, strictly increasing in time and share one shape.
    pub fn tabulated(knots: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        let (times, values): (Vec<_>, Vec<_>) = knots.into_iter().unzip();
        check_knots(&times, &values)?;
        Ok(CoefficientSchedule::Tabulated { times, values })
    }

    /// Piecewise cubic; `d_start` and `d_end` hold one entry per segment.
    pub fn cubic(
        times: Vec<f64>,
        values: Vec<DMatrix<f64>>,
        d_start: Vec<DMatrix<f64>>,
        d_end: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        check_knots(&times, &values)?;
        let segs = times.len() - 1;
        if d_start.len() != segs || d_end.len() != segs {
            return Err(Error::Shape(format!(
                "{segs} segments need {segs} derivatives at each end, got {} and {}",
                d_start.len(),
                d_end.len()
            )));
        }
        let shape = values[0].shape();
        if d_start.iter().chain(&d_end).any(|m| m.shape() != shape) {
            return Err(Error::Shape(format!("segment derivatives must have shape {shape:?}")));
        }
        Ok(CoefficientSchedule::Cubic { times, values, d_start, d_end })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientSchedule::Constant(m) => m.shape(),
            CoefficientSchedule::Tabulated { values, .. } | CoefficientSchedule::Cubic { values, .. } => {
                values[0].shape()
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientSchedule::Constant(_))
    }

    /// Knot times; empty for a constant schedule.
    pub fn knot_times(&self) -> &[f64] {
        match self {
            CoefficientSchedule::Constant(_) => &[],
            CoefficientSchedule::Tabulated { times, .. } | CoefficientSchedule::Cubic { times, .. } => times,
        }
    }

    /// True when the schedule is defined on all of `[0, horizon]` and no further.
    pub fn spans(&self, horizon: f64) -> bool {
        let times = self.knot_times();
        if times.is_empty() {
            return true;
        }
        let tol = TIME_EPS * horizon.abs().max(1.0);
        times[0].abs() <= tol && (times[times.len() - 1] - horizon).abs() <= tol
    }

    /// Unchecked evaluation; times beyond the outer knots are clamped.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let (times, values) = match self {
            CoefficientSchedule::Constant(m) => return m.clone(),
            CoefficientSchedule::Tabulated { times, values } | CoefficientSchedule::Cubic { times, values, .. } => {
                (times, values)
            }
        };
        let n = times.len();
        if t <= times[0] {
            return values[0].clone();
        }
        if t >= times[n - 1] {
            return values[n - 1].clone();
        }
        // first index with times[i] > t, so times[i-1] <= t < times[i]
        let i = times.partition_point(|&s| s <= t);
        let (t0, t1) = (times[i - 1], times[i]);
        if t == t0 {
            return values[i - 1].clone();
        }
        let (y0, y1) = (&values[i - 1], &values[i]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        match self {
            CoefficientSchedule::Cubic { d_start, d_end, .. } => {
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                y0 * h00 + &d_start[i - 1] * (h10 * h) + y1 * h01 + &d_end[i - 1] * (h11 * h)
            }
            _ => y0 + (y1 - y0) * s,
        }
    }

    /// Derivative at `t` of the piece containing `probe`; zero where the
    /// schedule is constant or clamped. `t` is normally an end of the piece.
    fn piece_derivative(&self, probe: f64, t: f64) -> DMatrix<f64> {
        let (r, c) = self.shape();
        match self {
            CoefficientSchedule::Constant(_) => DMatrix::zeros(r, c),
            CoefficientSchedule::Tabulated { times, values } => match segment(times, probe) {
                Some(i) => (&values[i + 1] - &values[i]) / (times[i + 1] - times[i]),
                None => DMatrix::zeros(r, c),
            },
            CoefficientSchedule::Cubic { times, values, d_start, d_end } => match segment(times, probe) {
                Some(i) => {
                    let h = times[i + 1] - times[i];
                    if t == times[i] {
                        return d_start[i].clone();
                    }
                    if t == times[i + 1] {
                        return d_end[i].clone();
                    }
                    let s = (t - times[i]) / h;
                    let dy = (&values[i + 1] - &values[i]) * ((6.0 * s - 6.0 * s * s) / h);
                    dy + &d_start[i] * (3.0 * s * s - 4.0 * s + 1.0) + &d_end[i] * (3.0 * s * s - 2.0 * s)
                }
                None => DMatrix::zeros(r, c),
            },
        }
    }

    /// Applies `f` to every stored matrix. For cubic schedules `f` is also
    /// applied to the derivatives, so it must be linear there.
    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        match self {
            CoefficientSchedule::Constant(m) => CoefficientSchedule::Constant(f(m)),
            CoefficientSchedule::Tabulated { times, values } => CoefficientSchedule::Tabulated {
                times: times.clone(),
                values: values.iter().map(&f).collect(),
            },
            CoefficientSchedule::Cubic { times, values, d_start, d_end } => CoefficientSchedule::Cubic {
                times: times.clone(),
                values: values.iter().map(&f).collect(),
                d_start: d_start.iter().map(&f).collect(),
                d_end: d_end.iter().map(&f).collect(),
            },
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|m| m * s)
    }

    /// Pointwise sum. Non-constant operands are merged on the union of their
    /// knots, which is exact: on each merged segment both are polynomials of
    /// degree at most three.
    pub fn add(&self, other: &Self) -> Result<Self> {
        use CoefficientSchedule::*;
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add schedules of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        match (self, other) {
            (Constant(a), Constant(b)) => Ok(Constant(a + b)),
            (Constant(a), s) | (s, Constant(a)) => Ok(match s {
                Tabulated { times, values } => Tabulated {
                    times: times.clone(),
                    values: values.iter().map(|m| m + a).collect(),
                },
                Cubic { times, values, d_start, d_end } => Cubic {
                    times: times.clone(),
                    values: values.iter().map(|m| m + a).collect(),
                    d_start: d_start.clone(),
                    d_end: d_end.clone(),
                },
                Constant(_) => unreachable!(),
            }),
            _ => {
                let mut times: Vec<f64> = self.knot_times().iter().chain(other.knot_times()).copied().collect();
                times.sort_by(f64::total_cmp);
                times.dedup();
                let values = times.iter().map(|&t| self.at(t) + other.at(t)).collect();
                if let (Tabulated { .. }, Tabulated { .. }) = (self, other) {
                    return Ok(Tabulated { times, values });
                }
                let (mut d_start, mut d_end) = (Vec::new(), Vec::new());
                for w in times.windows(2) {
                    let mid = 0.5 * (w[0] + w[1]);
                    d_start.push(self.piece_derivative(mid, w[0]) + other.piece_derivative(mid, w[0]));
                    d_end.push(self.piece_derivative(mid, w[1]) + other.piece_derivative(mid, w[1]));
                }
                Ok(Cubic { times, values, d_start, d_end })
            }
        }
    }
}

/// Checked evaluation on `[0, horizon]`.
pub fn eval_schedule(s: &CoefficientSchedule, t: f64, horizon: f64) -> Result<DMatrix<f64>> {
    let t = clamp_to_domain(t, 0.0, horizon)?;
    Ok(s.at(t))
}

/// Accepts `t` within rounding slack of `[start, end]` and clamps it.
pub(crate) fn clamp_to_domain(t: f64, start: f64, end: f64) -> Result<f64> {
    let tol = TIME_EPS * end.abs().max(start.abs()).max(1.0);
    if !(t >= start - tol && t <= end + tol) {
        return Err(Error::OutOfDomain { t, start, end });
    }
    Ok(t.clamp(start, end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn constant_schedule_ignores_time() {
        let s = CoefficientSchedule::scalar(2.0);
        assert_eq!(eval_schedule(&s, 0.37, 1.0).unwrap(), m1(2.0));
    }

    #[test]
    fn midpoint_of_linear_knots() {
        let s = CoefficientSchedule::tabulated(vec![(0.0, m1(0.0)), (1.0, m1(2.0))]).unwrap();
        assert_eq!(eval_schedule(&s, 0.5, 1.0).unwrap(), m1(1.0));
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let s = CoefficientSchedule::scalar(2.0);
        assert!(matches!(eval_schedule(&s, 1.5, 1.0), Err(Error::OutOfDomain { .. })));
        assert!(eval_schedule(&s, -0.1, 1.0).is_err());
    }

    #[test]
    fn exact_at_knots() {
        let knots: Vec<_> = (0..=7).map(|k| (k as f64 / 7.0, m1((k as f64).sin() / 3.0))).collect();
        let s = CoefficientSchedule::tabulated(knots.clone()).unwrap();
        for (t, v) in knots {
            assert_eq!(s.at(t), v);
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CoefficientSchedule::tabulated(vec![]).is_err());
        assert!(CoefficientSchedule::tabulated(vec![(0.0, m1(0.0)), (0.0, m1(1.0))]).is_err());
        let bad = vec![(0.0, m1(0.0)), (1.0, DMatrix::zeros(2, 1))];
        assert!(matches!(CoefficientSchedule::tabulated(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_of_tabulated_is_exact_on_union() {
        let a = CoefficientSchedule::tabulated(vec![(0.0, m1(0.0)), (1.0, m1(1.0))]).unwrap();
        let b = CoefficientSchedule::tabulated(vec![(0.0, m1(1.0)), (0.3, m1(0.0)), (1.0, m1(2.0))]).unwrap();
        let s = a.add(&b).unwrap();
        for &t in &[0.0, 0.1, 0.3, 0.55, 0.9, 1.0] {
            assert!((s.at(t)[(0, 0)] - a.at(t)[(0, 0)] - b.at(t)[(0, 0)]).abs() < 1e-15);
        }
        assert_eq!(s.knot_times(), &[0.0, 0.3, 1.0]);
    }

    fn cubic_of(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, times: &[f64]) -> CoefficientSchedule {
        let values = times.iter().map(|&t| m1(f(t))).collect();
        let d_start = times[..times.len() - 1].iter().map(|&t| m1(df(t))).collect();
        let d_end = times[1..].iter().map(|&t| m1(df(t))).collect();
        CoefficientSchedule::cubic(times.to_vec(), values, d_start, d_end).unwrap()
    }

    #[test]
    fn cubic_reproduces_cubics() {
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t - 3.0 * t * t * t;
        let df = |t: f64| -2.0 + t - 9.0 * t * t;
        let s = cubic_of(f, df, &[0.0, 0.4, 1.0]);
        for k in 0..=50 {
            let t = k as f64 / 50.0;
            assert!((s.at(t)[(0, 0)] - f(t)).abs() < 1e-14, "t = {t}");
        }
        assert_eq!(s.at(0.4), m1(f(0.4)));
    }

    #[test]
    fn cubic_interpolation_is_fourth_order() {
        let err = |n: usize| {
            let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
            let s = cubic_of(f64::sin, f64::cos, &times);
            (0..997).map(|k| k as f64 / 996.0).map(|t| (s.at(t)[(0, 0)] - t.sin()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(10) / err(20);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn sums_with_cubic_are_exact_on_union() {
        let a = cubic_of(|t| t * t * t, |t| 3.0 * t * t, &[0.0, 0.5, 1.0]);
        let b = CoefficientSchedule::tabulated(vec![(0.0, m1(1.0)), (0.3, m1(0.0)), (1.0, m1(2.0))]).unwrap();
        let c = CoefficientSchedule::scalar(0.25);
        for other in [&b, &c, &a.scaled(-0.5)] {
            let s = a.add(other).unwrap();
            for k in 0..=40 {
                let t = k as f64 / 40.0;
                let expect = a.at(t)[(0, 0)] + other.at(t)[(0, 0)];
                assert!((s.at(t)[(0, 0)] - expect).abs() < 1e-14, "t = {t}");
            }
        }
        assert_eq!(a.add(&b).unwrap().knot_times(), &[0.0, 0.3, 0.5, 1.0]);
        assert_eq!(a.add(&CoefficientSchedule::zeros(1, 1)).unwrap(), a);
    }

    #[test]
    fn cubic_rejects_wrong_derivative_count() {
        assert!(CoefficientSchedule::cubic(vec![0.0, 1.0], vec![m1(0.0), m1(1.0)], vec![], vec![]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn piecewise_linear_between_knots(v0 in -5.0..5.0f64, v1 in -5.0..5.0f64, v2 in -5.0..5.0f64, u in 0.0..1.0f64) {
            let s = CoefficientSchedule::tabulated(vec![(0.0, m1(v0)), (0.5, m1(v1)), (2.0, m1(v2))]).unwrap();
            let t = 0.5 + 1.5 * u;
            let expect = v1 + u * (v2 - v1);
            proptest::prop_assert!((s.at(t)[(0, 0)] - expect).abs() < 1e-12);
        }
    }
}
