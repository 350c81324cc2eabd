use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{gemv_acc, Dimensions, LqModel};
use crate::schedule::{clamp_to_domain, CoefficientSchedule};

/// Affine closed-loop control `a = K1(t)(x - E[X]) + K2(t) E[X] + k(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFeedback {
    /// Gain on the deviation from the mean, `m x d`.
    pub k1: CoefficientSchedule,
    /// Gain on the mean, `m x d`.
    pub k2: CoefficientSchedule,
    /// Offset, `m x 1`.
    pub k: CoefficientSchedule,
}

/// An affine feedback frozen at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGains {
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub k: DVector<f64>,
}

impl FeedbackGains {
    /// Mean of the control under a law with mean `mean`.
    pub fn mean_control(&self, mean: &DVector<f64>) -> DVector<f64> {
        &self.k2 * mean + &self.k
    }

    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], mean: &[f64], dev: &mut [f64], out: &mut [f64]) {
        for ((d, xi), mi) in dev.iter_mut().zip(x).zip(mean) {
            *d = xi - mi;
        }
        out.copy_from_slice(self.k.as_slice());
        gemv_acc(out, &self.k1, dev);
        gemv_acc(out, &self.k2, mean);
    }
}

impl AffineFeedback {
    pub fn zeros(dims: Dimensions) -> Self {
        let (d, m) = (dims.state, dims.control);
        AffineFeedback {
            k1: CoefficientSchedule::zeros(m, d),
            k2: CoefficientSchedule::zeros(m, d),
            k: CoefficientSchedule::zeros(m, 1),
        }
    }

    pub fn constant(k1: DMatrix<f64>, k2: DMatrix<f64>, k: DVector<f64>) -> Self {
        AffineFeedback {
            k1: CoefficientSchedule::Constant(k1),
            k2: CoefficientSchedule::Constant(k2),
            k: CoefficientSchedule::Constant(DMatrix::from_column_slice(k.len(), 1, k.as_slice())),
        }
    }

    pub fn check_dims(&self, dims: Dimensions) -> Result<()> {
        let (d, m) = (dims.state, dims.control);
        for (name, s, shape) in [("K1", &self.k1, (m, d)), ("K2", &self.k2, (m, d)), ("k", &self.k, (m, 1))] {
            if s.shape() != shape {
                return Err(Error::Shape(format!(
                    "feedback {name} has shape {:?}, expected {:?}",
                    s.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Unchecked evaluation (clamped at the outer knots).
    pub fn gains_at(&self, t: f64) -> FeedbackGains {
        FeedbackGains {
            k1: self.k1.at(t),
            k2: self.k2.at(t),
            k: DVector::from_column_slice(self.k.at(t).as_slice()),
        }
    }

    /// Sum of two feedback laws, e.g. an optimal law plus a perturbation.
    pub fn add(&self, delta: &AffineFeedback) -> Result<AffineFeedback> {
        Ok(AffineFeedback {
            k1: self.k1.add(&delta.k1)?,
            k2: self.k2.add(&delta.k2)?,
            k: self.k.add(&delta.k)?,
        })
    }

    /// Knot times of all three schedules, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = [&self.k1, &self.k2, &self.k]
            .iter()
            .flat_map(|s| s.knot_times().iter().copied())
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

/// `K1(t)(x - mean_x) + K2(t) mean_x + k(t)`.
pub fn apply_feedback(fb: &AffineFeedback, t: f64, x: &DVector<f64>, mean_x: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, d) = fb.k1.shape();
    if x.len() != d || mean_x.len() != d {
        return Err(Error::Shape(format!(
            "feedback expects state dimension {d}, got x: {}, mean_x: {}",
            x.len(),
            mean_x.len()
        )));
    }
    fb.check_dims(Dimensions::new(d, m))?;
    let g = fb.gains_at(t);
    let mut out = DVector::zeros(m);
    let mut dev = vec![0.0; d];
    g.apply_into(x.as_slice(), mean_x.as_slice(), &mut dev, out.as_mut_slice());
    Ok(out)
}

/// Checked variant of [`AffineFeedback::gains_at`] on the model horizon.
pub(crate) fn gains_in_domain(fb: &AffineFeedback, model: &LqModel, t: f64) -> Result<FeedbackGains> {
    let t = clamp_to_domain(t, 0.0, model.horizon)?;
    Ok(fb.gains_at(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn at_the_mean_only_offset_remains() {
        let fb = AffineFeedback::constant(
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::zeros(1, 1),
            v(&[0.25]),
        );
        assert_eq!(apply_feedback(&fb, 0.1, &v(&[2.0]), &v(&[2.0])).unwrap()[0], 0.25);
    }

    #[test]
    fn identity_gains_return_the_mean() {
        let eye = DMatrix::identity(2, 2);
        let fb = AffineFeedback::constant(eye.clone(), eye, DVector::zeros(2));
        let m = v(&[1.0, -4.0]);
        assert_eq!(apply_feedback(&fb, 0.0, &m, &m).unwrap(), m);
    }

    #[test]
    fn systemic_style_gain() {
        // -(2 * 0.2 + 0.5) * 0.5
        let fb = AffineFeedback::constant(DMatrix::from_element(1, 1, -0.9), DMatrix::zeros(1, 1), v(&[0.0]));
        let a = apply_feedback(&fb, 0.3, &v(&[1.5]), &v(&[1.0])).unwrap();
        assert!((a[0] + 0.45).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let fb = AffineFeedback::zeros(Dimensions::new(2, 1));
        assert!(apply_feedback(&fb, 0.0, &v(&[1.0]), &v(&[1.0])).is_err());
    }
}
