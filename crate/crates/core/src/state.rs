use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, clip_psd, symmetrize};

/// Tolerance on the smallest covariance eigenvalue accepted at construction.
pub const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of a law on R^d. The LQ value function depends on the
/// law only through these two statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentState {
    /// Rejects asymmetric or indefinite covariances; clips tiny negative
    /// eigenvalues (down to `-PSD_TOL`) to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "covariance has shape {:?}, expected {:?}",
                cov.shape(),
                (d, d)
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("moment state has non-finite entries".into()));
        }
        let scale = cov.amax().max(1.0);
        if asymmetry(&cov) > PSD_TOL * scale {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let mut cov = cov;
        symmetrize(&mut cov);
        let lowest = clip_psd(&mut cov);
        if lowest < -PSD_TOL * scale {
            return Err(Error::InvalidInput(format!(
                "covariance is not positive semidefinite (smallest eigenvalue {lowest})"
            )));
        }
        Ok(MomentState { mean, cov })
    }

    /// Point mass at `mean`.
    pub fn dirac(mean: DVector<f64>) -> Self {
        let d = mean.len();
        MomentState {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        MomentState::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `N` particles in R^d, stored contiguously particle by particle.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    states: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn from_flat(dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || !states.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not split into particles of dimension {dim}",
                states.len()
            )));
        }
        Ok(ParticleEnsemble { dim, states })
    }

    pub fn from_vectors(particles: &[DVector<f64>]) -> Result<Self> {
        let dim = particles
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
        if particles.iter().any(|p| p.len() != dim) {
            return Err(Error::Shape("particles of differing dimension".into()));
        }
        let states = particles.iter().flat_map(|p| p.iter().copied()).collect();
        ParticleEnsemble::from_flat(dim, states)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Sequential sum in index order, so results do not depend on threading.
pub(crate) fn empirical_mean(flat: &[f64], dim: usize) -> DVector<f64> {
    let n = flat.len() / dim;
    let mut mean = DVector::zeros(dim);
    for p in flat.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean / n as f64
}

pub(crate) fn empirical_cov(flat: &[f64], dim: usize, mean: &DVector<f64>) -> DMatrix<f64> {
    let n = flat.len() / dim;
    let mut cov = DMatrix::zeros(dim, dim);
    let mut dev = vec![0.0; dim];
    for p in flat.chunks_exact(dim) {
        for k in 0..dim {
            dev[k] = p[k] - mean[k];
        }
        for j in 0..dim {
            for i in j..dim {
                cov[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    for j in 0..dim {
        for i in j..dim {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Sample mean and unbiased (divisor `N - 1`) sample covariance.
pub fn ensemble_moments(e: &ParticleEnsemble) -> Result<MomentState> {
    if e.len() < 2 {
        return Err(Error::InsufficientSample { needed: 2, got: e.len() });
    }
    let mean = empirical_mean(&e.states, e.dim);
    let cov = empirical_cov(&e.states, e.dim, &mean);
    Ok(MomentState { mean, cov })
}
