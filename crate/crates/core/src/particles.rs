//! Interacting-particle Euler–Maruyama simulation of the controlled
//! McKean-Vlasov dynamics, with the law replaced by the empirical measure.
//!
//! Randomness: particle `i` owns the ChaCha8 stream `i` of the root seed.
//! Initial Gaussian draws come first, then exactly one standard normal per
//! step (Box–Muller, cosine branch). All reductions over particles run
//! sequentially in index order, so the parallel and single-lane paths give
//! bitwise-identical results.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::{AffineFeedback, FeedbackGains};
use crate::linalg::psd_sqrt;
use crate::model::{bilinear, gemv_acc, terminal_cost_slice, Coefficients, Dimensions, LqModel};
use crate::riccati::RiccatiSolution;
use crate::schedule::CoefficientSchedule;
use crate::state::{empirical_cov, empirical_mean, MomentState, ParticleEnsemble};
use crate::value::optimal_feedback;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    Dirac(DVector<f64>),
    Gaussian(MomentState),
    Particles(ParticleEnsemble),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub t0: f64,
    pub initial: InitialLaw,
    /// Record summary statistics every this many steps (the final step is
    /// always recorded). Also the CSV thinning factor.
    pub record_every: usize,
    /// Keep full particle ensembles at recorded times.
    pub keep_ensembles: bool,
    pub parallel: bool,
}

impl SimConfig {
    pub fn new(particles: usize, steps: usize, seed: u64, initial: InitialLaw) -> Self {
        SimConfig {
            particles,
            steps,
            seed,
            t0: 0.0,
            initial,
            record_every: 1,
            keep_ensembles: false,
            parallel: true,
        }
    }

    fn validate(&self, model: &LqModel) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::InsufficientSample {
                needed: 2,
                got: self.particles,
            });
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("step count must be >= 1".into()));
        }
        if !(self.t0 >= 0.0 && self.t0 < model.horizon) {
            return Err(Error::InvalidInput(format!(
                "start time {} must lie in [0, {})",
                self.t0, model.horizon
            )));
        }
        let d = model.dims.state;
        let dim = match &self.initial {
            InitialLaw::Dirac(x) => x.len(),
            InitialLaw::Gaussian(ms) => ms.dim(),
            InitialLaw::Particles(e) => {
                if e.len() != self.particles {
                    return Err(Error::InvalidInput(format!(
                        "initial ensemble has {} particles, config asks for {}",
                        e.len(),
                        self.particles
                    )));
                }
                e.dim()
            }
        };
        if dim != d {
            return Err(Error::Shape(format!("initial law has dimension {dim}, expected {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    /// Recorded times (thinned).
    pub times: Vec<f64>,
    /// Empirical mean and unbiased covariance at each recorded time.
    pub moments: Vec<MomentState>,
    /// Mean accumulated running cost at each recorded time.
    pub running_mean: Vec<f64>,
    /// Ensembles at recorded times when `keep_ensembles` is set.
    pub ensembles: Vec<ParticleEnsemble>,
    pub final_ensemble: ParticleEnsemble,
    /// Running plus terminal cost per particle.
    pub per_particle_cost: Vec<f64>,
    pub cost_mean: f64,
    pub cost_stderr: f64,
}

impl SimResult {
    /// `t,emp_mean_0,…,emp_cov_00,…,running_cost_mean`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.moments[0].dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("emp_mean_{i}")));
        for i in 0..d {
            for j in 0..d {
                header.push(format!("emp_cov_{i}{j}"));
            }
        }
        header.push("running_cost_mean".into());
        writeln!(w, "{}", header.join(","))?;
        for ((t, ms), r) in self.times.iter().zip(&self.moments).zip(&self.running_mean) {
            let mut row = vec![t.to_string()];
            row.extend(ms.mean.iter().map(|v| v.to_string()));
            for i in 0..d {
                for j in 0..d {
                    row.push(ms.cov[(i, j)].to_string());
                }
            }
            row.push(r.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[inline]
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn particle_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Normals drawn per particle stream at a time; the per-stream draw order
/// is unchanged, batching only keeps each generator hot in cache.
const NOISE_BATCH: usize = 64;

fn nonzero(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.iter().any(|&v| v != 0.0).then(|| m.clone())
}

/// One Euler step's coefficients with the mean-field terms folded into
/// constants and all-zero matrices dropped.
struct Kernel {
    mean_x: Vec<f64>,
    a0: Vec<f64>,
    k1: Option<DMatrix<f64>>,
    drift0: Vec<f64>,
    b: Option<DMatrix<f64>>,
    c: Option<DMatrix<f64>>,
    diff0: Vec<f64>,
    d: Option<DMatrix<f64>>,
    f: Option<DMatrix<f64>>,
    cost0: f64,
    q2: Option<DMatrix<f64>>,
    r2: Option<DMatrix<f64>>,
    m2: Option<DMatrix<f64>>,
    q1: Option<DMatrix<f64>>,
    r1: Option<DMatrix<f64>>,
    dt: f64,
    sqrt_dt: f64,
}

impl Kernel {
    fn new(c: &Coefficients, g: &FeedbackGains, mean_x: &DVector<f64>, dt: f64) -> Self {
        // For affine feedback the empirical control mean is K2 m̂ + k exactly
        // (the deviations average to zero).
        let mean_a = g.mean_control(mean_x);
        let drift0 = &c.b0 + &c.b_bar * mean_x + &c.c_bar * &mean_a;
        let diff0 = &c.sigma0 + &c.d_bar * mean_x + &c.f_bar * &mean_a;
        let cost0 = bilinear(mean_x.as_slice(), &c.q2_bar, mean_x.as_slice())
            + bilinear(mean_a.as_slice(), &c.r2_bar, mean_a.as_slice())
            + 2.0 * bilinear(mean_x.as_slice(), &c.m2_bar, mean_a.as_slice())
            + c.q1_bar.dot(mean_x)
            + c.r1_bar.dot(&mean_a);
        let col = |v: &DVector<f64>| nonzero(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        Kernel {
            mean_x: mean_x.as_slice().to_vec(),
            a0: mean_a.as_slice().to_vec(),
            k1: nonzero(&g.k1),
            drift0: drift0.as_slice().to_vec(),
            b: nonzero(&c.b),
            c: nonzero(&c.c),
            diff0: diff0.as_slice().to_vec(),
            d: nonzero(&c.d),
            f: nonzero(&c.f),
            cost0,
            q2: nonzero(&c.q2),
            r2: nonzero(&c.r2),
            m2: nonzero(&(&c.m2 * 2.0)),
            q1: col(&c.q1),
            r1: col(&c.r1),
            dt,
            sqrt_dt: dt.sqrt(),
        }
    }

    /// `d = m = 1`: the same update with plain scalars.
    fn scalar(&self) -> ScalarKernel {
        let get = |m: &Option<DMatrix<f64>>| m.as_ref().map_or(0.0, |m| m[(0, 0)]);
        ScalarKernel {
            mean_x: self.mean_x[0],
            a0: self.a0[0],
            k1: get(&self.k1),
            drift0: self.drift0[0],
            b: get(&self.b),
            c: get(&self.c),
            diff0: self.diff0[0],
            d: get(&self.d),
            f: get(&self.f),
            cost0: self.cost0,
            q2: get(&self.q2),
            r2: get(&self.r2),
            m2: get(&self.m2),
            q1: get(&self.q1),
            r1: get(&self.r1),
            dt: self.dt,
            sqrt_dt: self.sqrt_dt,
        }
    }

    /// Left-endpoint running cost accrual and one Euler–Maruyama update of `x`.
    #[inline]
    fn advance(&self, x: &mut [f64], xi: f64, cost: &mut f64, buf: &mut Scratch) {
        let Scratch { dev, a, drift, diff } = buf;
        a.copy_from_slice(&self.a0);
        if let Some(k1) = &self.k1 {
            for ((dv, xv), mv) in dev.iter_mut().zip(x.iter()).zip(&self.mean_x) {
                *dv = xv - mv;
            }
            gemv_acc(a, k1, dev);
        }
        drift.copy_from_slice(&self.drift0);
        diff.copy_from_slice(&self.diff0);
        let mut running = self.cost0;
        if let Some(m) = &self.b {
            gemv_acc(drift, m, x);
        }
        if let Some(m) = &self.c {
            gemv_acc(drift, m, a);
        }
        if let Some(m) = &self.d {
            gemv_acc(diff, m, x);
        }
        if let Some(m) = &self.f {
            gemv_acc(diff, m, a);
        }
        if let Some(m) = &self.q2 {
            running += bilinear(x, m, x);
        }
        if let Some(m) = &self.r2 {
            running += bilinear(a, m, a);
        }
        if let Some(m) = &self.m2 {
            running += bilinear(x, m, a);
        }
        if let Some(m) = &self.q1 {
            running += dot(m.as_slice(), x);
        }
        if let Some(m) = &self.r1 {
            running += dot(m.as_slice(), a);
        }
        *cost += running * self.dt;
        for ((xk, bk), sk) in x.iter_mut().zip(drift.iter()).zip(diff.iter()) {
            *xk += bk * self.dt + sk * self.sqrt_dt * xi;
        }
    }
}

struct ScalarKernel {
    mean_x: f64,
    a0: f64,
    k1: f64,
    drift0: f64,
    b: f64,
    c: f64,
    diff0: f64,
    d: f64,
    f: f64,
    cost0: f64,
    q2: f64,
    r2: f64,
    m2: f64,
    q1: f64,
    r1: f64,
    dt: f64,
    sqrt_dt: f64,
}

impl ScalarKernel {
    #[inline]
    fn advance(&self, x: &mut f64, xi: f64, cost: &mut f64) {
        let x0 = *x;
        let a = self.a0 + self.k1 * (x0 - self.mean_x);
        let drift = self.drift0 + self.b * x0 + self.c * a;
        let diff = self.diff0 + self.d * x0 + self.f * a;
        let running =
            self.cost0 + self.q2 * x0 * x0 + self.r2 * a * a + self.m2 * x0 * a + self.q1 * x0 + self.r1 * a;
        *cost += running * self.dt;
        *x = x0 + drift * self.dt + diff * self.sqrt_dt * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

struct Scratch {
    dev: Vec<f64>,
    a: Vec<f64>,
    drift: Vec<f64>,
    diff: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize) -> Self {
        Scratch {
            dev: vec![0.0; d],
            a: vec![0.0; m],
            drift: vec![0.0; d],
            diff: vec![0.0; d],
        }
    }
}

fn fill_noise(noise: &mut [f64], rngs: &mut [ChaCha8Rng], count: usize, parallel: bool) {
    let draw = |(chunk, rng): (&mut [f64], &mut ChaCha8Rng)| {
        for z in &mut chunk[..count] {
            *z = standard_normal(rng);
        }
    };
    if parallel {
        noise.par_chunks_mut(NOISE_BATCH).zip(rngs.par_iter_mut()).for_each(draw);
    } else {
        noise.chunks_mut(NOISE_BATCH).zip(rngs.iter_mut()).for_each(draw);
    }
}

/// Simulates `N` interacting particles under `fb` from `cfg.t0` to `T`.
pub fn simulate(model: &LqModel, fb: &AffineFeedback, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate(model)?;
    fb.check_dims(model.dims)?;
    let Dimensions { state: d, control: m } = model.dims;
    let n = cfg.particles;
    let parallel = cfg.parallel && rayon::current_num_threads() > 1;

    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| particle_stream(cfg.seed, i)).collect();
    let mut states = vec![0.0; n * d];
    match &cfg.initial {
        InitialLaw::Dirac(x) => {
            for p in states.chunks_exact_mut(d) {
                p.copy_from_slice(x.as_slice());
            }
        }
        InitialLaw::Gaussian(ms) => {
            let root = psd_sqrt(&ms.cov);
            for (p, rng) in states.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                let z = DVector::from_fn(d, |_, _| standard_normal(rng));
                let x = &ms.mean + &root * z;
                p.copy_from_slice(x.as_slice());
            }
        }
        InitialLaw::Particles(e) => states.copy_from_slice(e.as_flat()),
    }

    let mut costs = vec![0.0; n];
    let mut noise = vec![0.0; n * NOISE_BATCH];
    let horizon = model.horizon;
    let time = |k: usize| {
        if k == cfg.steps {
            horizon
        } else {
            cfg.t0 + (horizon - cfg.t0) * k as f64 / cfg.steps as f64
        }
    };
    let record_every = cfg.record_every.max(1);

    let mut result = SimResult {
        times: Vec::new(),
        moments: Vec::new(),
        running_mean: Vec::new(),
        ensembles: Vec::new(),
        final_ensemble: ParticleEnsemble::from_flat(d, Vec::new())?,
        per_particle_cost: Vec::new(),
        cost_mean: 0.0,
        cost_stderr: 0.0,
    };
    let record = |result: &mut SimResult, t: f64, states: &[f64], costs: &[f64], mean: &DVector<f64>| -> Result<()> {
        result.times.push(t);
        result.moments.push(MomentState {
            mean: mean.clone(),
            cov: empirical_cov(states, d, mean),
        });
        result.running_mean.push(costs.iter().sum::<f64>() / n as f64);
        if cfg.keep_ensembles {
            result.ensembles.push(ParticleEnsemble::from_flat(d, states.to_vec())?);
        }
        Ok(())
    };

    for k in 0..cfg.steps {
        let slot = k % NOISE_BATCH;
        if slot == 0 {
            fill_noise(&mut noise, &mut rngs, NOISE_BATCH.min(cfg.steps - k), parallel);
        }
        let t = time(k);
        let mean_x = empirical_mean(&states, d);
        if k % record_every == 0 {
            record(&mut result, t, &states, &costs, &mean_x)?;
        }
        let kernel = Kernel::new(&model.coefficients_at(t)?, &fb.gains_at(t), &mean_x, time(k + 1) - t);
        if d == 1 && m == 1 {
            let sk = kernel.scalar();
            let step = |((x, z), c): ((&mut f64, &[f64]), &mut f64)| sk.advance(x, z[slot], c);
            if parallel {
                states
                    .par_iter_mut()
                    .zip(noise.par_chunks(NOISE_BATCH))
                    .zip(costs.par_iter_mut())
                    .for_each(step);
            } else {
                states.iter_mut().zip(noise.chunks(NOISE_BATCH)).zip(costs.iter_mut()).for_each(step);
            }
        } else {
            let step = |buf: &mut Scratch, ((x, z), c): ((&mut [f64], &[f64]), &mut f64)| {
                kernel.advance(x, z[slot], c, buf)
            };
            if parallel {
                states
                    .par_chunks_mut(d)
                    .zip(noise.par_chunks(NOISE_BATCH))
                    .zip(costs.par_iter_mut())
                    .for_each_init(|| Scratch::new(d, m), step);
            } else {
                let mut buf = Scratch::new(d, m);
                for item in states.chunks_mut(d).zip(noise.chunks(NOISE_BATCH)).zip(costs.iter_mut()) {
                    step(&mut buf, item);
                }
            }
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
    }

    let mean_t = empirical_mean(&states, d);
    record(&mut result, horizon, &states, &costs, &mean_t)?;
    for (c, x) in costs.iter_mut().zip(states.chunks_exact(d)) {
        *c += terminal_cost_slice(&model.cost, x, mean_t.as_slice());
    }
    let (mean, stderr) = mean_and_stderr(&costs);
    result.final_ensemble = ParticleEnsemble::from_flat(d, states)?;
    result.per_particle_cost = costs;
    result.cost_mean = mean;
    result.cost_stderr = stderr;
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct GapEntry {
    pub name: String,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// `cost_mean(candidate) − cost_mean(optimal)`.
    pub gap: f64,
    /// Standard error of the per-particle paired difference (common random
    /// numbers make this the relevant spread).
    pub gap_stderr: f64,
    /// `sqrt(se_candidate² + se_optimal²)`, as if the runs were independent.
    pub independent_stderr: f64,
}

impl GapEntry {
    /// Candidate is cheaper than the optimum by more than two standard errors.
    pub fn beats_optimal(&self) -> bool {
        self.gap < -2.0 * self.gap_stderr
    }

    /// Candidate is costlier than the optimum by more than two standard errors.
    pub fn detected(&self) -> bool {
        self.gap > 2.0 * self.gap_stderr
    }
}

#[derive(Clone, Debug)]
pub struct GapReport {
    pub optimal_cost_mean: f64,
    pub optimal_cost_stderr: f64,
    pub entries: Vec<GapEntry>,
}

impl GapReport {
    pub fn any_beats_optimal(&self) -> bool {
        self.entries.iter().any(GapEntry::beats_optimal)
    }
}

/// Simulates the optimal feedback and each `optimal + delta` with the same
/// seed and reports the cost gaps.
pub fn optimality_gap(
    model: &LqModel,
    sol: &RiccatiSolution,
    cfg: &SimConfig,
    perturbations: &[(String, AffineFeedback)],
) -> Result<GapReport> {
    let optimal = optimal_feedback(model, sol)?;
    let base = simulate(model, &optimal, cfg)?;
    let n = base.per_particle_cost.len() as f64;
    let mut entries = Vec::with_capacity(perturbations.len());
    for (name, delta) in perturbations {
        let run = simulate(model, &optimal.add(delta)?, cfg)?;
        let diffs: Vec<f64> = run
            .per_particle_cost
            .iter()
            .zip(&base.per_particle_cost)
            .map(|(a, b)| a - b)
            .collect();
        let (_, gap_stderr) = mean_and_stderr(&diffs);
        entries.push(GapEntry {
            name: name.clone(),
            cost_mean: run.cost_mean,
            cost_stderr: run.cost_stderr,
            gap: run.cost_mean - base.cost_mean,
            gap_stderr,
            independent_stderr: (run.cost_stderr.powi(2) + base.cost_stderr.powi(2)).sqrt(),
        });
        debug_assert!(n > 1.0);
    }
    Ok(GapReport {
        optimal_cost_mean: base.cost_mean,
        optimal_cost_stderr: base.cost_stderr,
        entries,
    })
}

/// The ten standard perturbation deltas relative to an optimal feedback:
/// deviation gain scaled by 0.8 / 1.2, offset shifted by ±0.5, the four
/// combinations of both, and the mean gain shifted by ±0.5·I.
pub fn canonical_perturbations(optimal: &AffineFeedback, dims: Dimensions) -> Vec<(String, AffineFeedback)> {
    let (d, m) = (dims.state, dims.control);
    let zero = AffineFeedback::zeros(dims);
    let gain = |s: f64| optimal.k1.scaled(s - 1.0);
    let shift = |v: f64| CoefficientSchedule::constant(DMatrix::from_element(m, 1, v));
    let mut out = Vec::with_capacity(10);
    for s in [0.8, 1.2] {
        out.push((format!("K1 x{s}"), AffineFeedback { k1: gain(s), ..zero.clone() }));
    }
    for v in [0.5, -0.5] {
        out.push((format!("k {v:+}"), AffineFeedback { k: shift(v), ..zero.clone() }));
    }
    for s in [0.8, 1.2] {
        for v in [0.5, -0.5] {
            out.push((
                format!("K1 x{s}, k {v:+}"),
                AffineFeedback {
                    k1: gain(s),
                    k2: zero.k2.clone(),
                    k: shift(v),
                },
            ));
        }
    }
    for v in [0.5, -0.5] {
        let k2 = DMatrix::from_fn(m, d, |i, j| if i == j { v } else { 0.0 });
        out.push((
            format!("K2 {v:+}I"),
            AffineFeedback {
                k2: CoefficientSchedule::constant(k2),
                ..zero.clone()
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pure_noise_model() -> LqModel {
        let mut model = LqModel::zeros(Dimensions::new(1, 1), 1.0);
        model.dynamics.sigma0 = CoefficientSchedule::scalar(1.0);
        model.cost.p2 = DMatrix::from_element(1, 1, 1.0);
        model
    }

    #[test]
    fn deterministic_dirac_run() {
        let mut model = LqModel::zeros(Dimensions::new(1, 1), 2.0);
        model.cost.q2 = CoefficientSchedule::scalar(1.0);
        model.cost.r2 = CoefficientSchedule::scalar(3.0);
        model.cost.p2 = DMatrix::from_element(1, 1, 0.5);
        let fb = AffineFeedback::constant(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DVector::from_element(1, 0.2));
        let cfg = SimConfig::new(4, 10, 3, InitialLaw::Dirac(DVector::from_element(1, 1.5)));
        let res = simulate(&model, &fb, &cfg).unwrap();
        // running: (1.5² + 3·0.2²)·T, terminal: 0.5·1.5²
        let expect = (2.25 + 0.12) * 2.0 + 0.5 * 2.25;
        for &c in &res.per_particle_cost {
            assert!((c - expect).abs() < 1e-12);
        }
        assert_eq!(res.cost_stderr, 0.0);
        assert!(res.final_ensemble.iter().all(|p| p[0] == 1.5));
    }

    #[test]
    fn parallel_matches_single_lane_bitwise() {
        let model = pure_noise_model();
        let fb = AffineFeedback::constant(DMatrix::from_element(1, 1, -0.5), DMatrix::zeros(1, 1), DVector::zeros(1));
        let mut cfg = SimConfig::new(
            257,
            40,
            99,
            InitialLaw::Gaussian(MomentState::scalar(0.3, 0.7).unwrap()),
        );
        let par = simulate(&model, &fb, &cfg).unwrap();
        cfg.parallel = false;
        let seq = simulate(&model, &fb, &cfg).unwrap();
        assert_eq!(par.per_particle_cost, seq.per_particle_cost);
        assert_eq!(par.final_ensemble, seq.final_ensemble);
        assert_eq!(par.moments, seq.moments);
    }

    #[test]
    fn invalid_configs() {
        let model = pure_noise_model();
        let fb = AffineFeedback::zeros(model.dims);
        let dirac = InitialLaw::Dirac(DVector::zeros(1));
        let one = SimConfig::new(1, 10, 0, dirac.clone());
        assert!(matches!(simulate(&model, &fb, &one), Err(Error::InsufficientSample { .. })));
        let no_steps = SimConfig::new(10, 0, 0, dirac.clone());
        assert!(simulate(&model, &fb, &no_steps).is_err());
        let mut late = SimConfig::new(10, 5, 0, dirac);
        late.t0 = 1.0;
        assert!(simulate(&model, &fb, &late).is_err());
        let wrong_dim = SimConfig::new(10, 5, 0, InitialLaw::Dirac(DVector::zeros(2)));
        assert!(simulate(&model, &fb, &wrong_dim).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = LqModel::zeros(Dimensions::new(1, 1), 1.0);
        model.dynamics.b = CoefficientSchedule::scalar(1e300);
        let fb = AffineFeedback::zeros(model.dims);
        let cfg = SimConfig::new(3, 5, 0, InitialLaw::Dirac(DVector::from_element(1, 1e10)));
        assert!(matches!(simulate(&model, &fb, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn thinning_and_csv() {
        let model = pure_noise_model();
        let fb = AffineFeedback::zeros(model.dims);
        let mut cfg = SimConfig::new(50, 10, 5, InitialLaw::Dirac(DVector::zeros(1)));
        cfg.record_every = 4;
        cfg.keep_ensembles = true;
        let res = simulate(&model, &fb, &cfg).unwrap();
        assert_eq!(res.times, vec![0.0, 0.4, 0.8, 1.0]);
        assert_eq!(res.ensembles.len(), 4);
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,emp_mean_0,emp_cov_00,running_cost_mean");
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn ten_distinct_perturbations() {
        let dims = Dimensions::new(1, 1);
        let opt = AffineFeedback::constant(DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1), DVector::zeros(1));
        let p = canonical_perturbations(&opt, dims);
        assert_eq!(p.len(), 10);
        let mut names: Vec<_> = p.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 10);
        let scaled = opt.add(&p[1].1).unwrap();
        assert!((scaled.k1.at(0.3)[(0, 0)] + 1.2).abs() < 1e-15);
    }
}
