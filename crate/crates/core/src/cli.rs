//! Batch front-end: `riccati`, `value`, `simulate` and `verify`.
//!
//! Every invocation ends its standard output with
//! `RESULT pass=<n> fail=<m>`; the exit status is 0 iff `m == 0`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::load_model;
use crate::model::LqModel;
use crate::moments::cost_from_moments;
use crate::particles::{simulate, InitialLaw, SimConfig};
use crate::presets::{mean_variance_model, systemic_model, MeanVarianceParams, SystemicParams};
use crate::riccati::{default_steps, solve_riccati};
use crate::state::MomentState;
use crate::value::{g_hat, optimal_feedback, value};
use crate::verify::{run_battery, VerifyConfig};

#[derive(Parser, Debug)]
#[command(name = "lqmkv", version, about = "LQ McKean-Vlasov control solver and validator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the Riccati system and write the solution grid as CSV.
    Riccati {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the value function at (t, mean, cov).
    Value {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[command(flatten)]
        law: Law,
    },
    /// Simulate the particle system under the optimal feedback.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 50_000)]
        particles: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        law: Law,
        /// Write every k-th step to the CSV.
        #[arg(long, default_value_t = 10)]
        record_every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the validation battery and print a PASS/FAIL table.
    Verify {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Riccati and moment-flow steps.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 50_000)]
        particles: usize,
        #[arg(long, default_value_t = 1000)]
        sim_steps: usize,
        #[command(flatten)]
        law: Law,
        /// Multiply the solved Λ by this factor before checking.
        #[arg(long)]
        scale_lambda: Option<f64>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Source {
    /// "mean-variance" or "systemic-risk".
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    /// JSON model document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset parameter override, e.g. `--param eta=0.5`.
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
}

#[derive(Args, Debug, Clone)]
pub struct Law {
    /// Mean vector, comma separated (defaults to the preset x0, else 0).
    #[arg(long, allow_hyphen_values = true)]
    pub mean: Option<String>,
    /// Covariance, rows separated by ';', entries by ',' (defaults to 0).
    #[arg(long, allow_hyphen_values = true)]
    pub cov: Option<String>,
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value in '{s}': {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_numbers(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("{what}: cannot parse '{x}': {e}")))
        })
        .collect()
}

struct Problem {
    model: LqModel,
    initial_mean: DVector<f64>,
}

fn load(source: &Source) -> Result<Problem> {
    if let Some(path) = &source.config {
        if !source.params.is_empty() {
            return Err(Error::InvalidInput("--param only applies to presets".into()));
        }
        let model = load_model(path)?;
        let d = model.dims.state;
        return Ok(Problem {
            model,
            initial_mean: DVector::zeros(d),
        });
    }
    let name = source.preset.as_deref().unwrap_or_default();
    match name {
        "mean-variance" => {
            let mut p = MeanVarianceParams::default();
            for (k, v) in &source.params {
                p.set(k, *v)?;
            }
            Ok(Problem {
                model: mean_variance_model(&p)?,
                initial_mean: DVector::from_element(1, p.x0),
            })
        }
        "systemic-risk" => {
            let mut p = SystemicParams::default();
            for (k, v) in &source.params {
                p.set(k, *v)?;
            }
            Ok(Problem {
                model: systemic_model(&p)?,
                initial_mean: DVector::from_element(1, p.x0),
            })
        }
        other => Err(Error::InvalidInput(format!(
            "unknown preset '{other}' (expected mean-variance or systemic-risk)"
        ))),
    }
}

fn moment_state(law: &Law, problem: &Problem) -> Result<MomentState> {
    let d = problem.model.dims.state;
    let mean = match &law.mean {
        Some(s) => DVector::from_vec(parse_numbers(s, "--mean")?),
        None => problem.initial_mean.clone(),
    };
    let cov = match &law.cov {
        Some(s) => {
            let rows = s.split(';').map(|r| parse_numbers(r, "--cov")).collect::<Result<Vec<_>>>()?;
            if rows.iter().any(|r| r.len() != rows.len()) {
                return Err(Error::InvalidInput(format!("--cov must be square, got '{s}'")));
            }
            DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
        }
        None => DMatrix::zeros(d, d),
    };
    if mean.len() != d || cov.nrows() != d {
        return Err(Error::Shape(format!(
            "moment state has dimension {} / {}x{}, model state dimension is {d}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    MomentState::new(mean, cov)
}

/// Formats with 12 significant digits, plain decimal where reasonable.
pub fn sig12(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        format!("{:.*}", (11 - exp).max(0) as usize, x)
    } else {
        format!("{x:.11e}")
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| sig12(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_mat(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| r.iter().map(|x| sig12(*x)).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Outcome of one subcommand: number of passed and failed checks.
struct Tally {
    pass: usize,
    fail: usize,
}

fn cmd_riccati(out: &mut dyn Write, source: &Source, steps: Option<usize>, path: &Option<PathBuf>) -> Result<Tally> {
    let problem = load(source)?;
    let model = &problem.model;
    let steps = steps.unwrap_or_else(|| default_steps(model.horizon));
    let sol = solve_riccati(model, steps)?;
    if let Some(p) = path {
        let mut w = create(p)?;
        sol.write_csv(&mut w)?;
        w.flush()?;
        writeln!(out, "wrote {} rows to {}", steps + 1, p.display())?;
    }
    let s0 = &sol.states()[0];
    writeln!(out, "steps       {steps}")?;
    writeln!(out, "Lambda(0)   {}", fmt_mat(&s0.lambda))?;
    writeln!(out, "Gamma(0)    {}", fmt_mat(&s0.gamma))?;
    writeln!(out, "gamma(0)    {}", fmt_vec(&s0.gamma_vec))?;
    writeln!(out, "chi(0)      {}", sig12(s0.chi))?;
    Ok(Tally { pass: 1, fail: 0 })
}

fn cmd_value(out: &mut dyn Write, source: &Source, steps: Option<usize>, t: f64, law: &Law) -> Result<Tally> {
    let problem = load(source)?;
    let ms = moment_state(law, &problem)?;
    let model = &problem.model;
    let sol = solve_riccati(model, steps.unwrap_or_else(|| default_steps(model.horizon)))?;
    let v = value(&sol, t, &ms)?;
    writeln!(out, "value {}", sig12(v))?;
    if (t - model.horizon).abs() <= 1e-12 * model.horizon.max(1.0) {
        writeln!(out, "terminal cost {}", sig12(g_hat(model, &ms)?))?;
    }
    Ok(Tally { pass: 1, fail: 0 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    out: &mut dyn Write,
    source: &Source,
    particles: usize,
    steps: Option<usize>,
    seed: u64,
    law: &Law,
    record_every: usize,
    path: &Option<PathBuf>,
) -> Result<Tally> {
    let problem = load(source)?;
    let ms0 = moment_state(law, &problem)?;
    let model = &problem.model;
    let steps = steps.unwrap_or_else(|| default_steps(model.horizon));
    let sol = solve_riccati(model, steps)?;
    let fb = optimal_feedback(model, &sol)?;
    let initial = if ms0.cov.amax() == 0.0 {
        InitialLaw::Dirac(ms0.mean.clone())
    } else {
        InitialLaw::Gaussian(ms0.clone())
    };
    let mut cfg = SimConfig::new(particles, steps, seed, initial);
    cfg.record_every = record_every;
    let res = simulate(model, &fb, &cfg)?;
    if let Some(p) = path {
        let mut w = create(p)?;
        res.write_csv(&mut w)?;
        w.flush()?;
        writeln!(out, "wrote {} rows to {}", res.times.len(), p.display())?;
    }
    let v0 = value(&sol, 0.0, &ms0)?;
    let oracle = cost_from_moments(model, &fb, 0.0, &ms0, steps)?;
    let z = (res.cost_mean - v0).abs() / res.cost_stderr.max(f64::MIN_POSITIVE);
    let pass = z <= 4.0;
    writeln!(out, "monte carlo cost  {} +- {}", sig12(res.cost_mean), sig12(res.cost_stderr))?;
    writeln!(out, "moment-oracle     {}", sig12(oracle))?;
    writeln!(out, "value             {}", sig12(v0))?;
    writeln!(
        out,
        "{} |cost_mean - value| = {:.3} stderr (<= 4)",
        if pass { "PASS" } else { "FAIL" },
        z
    )?;
    Ok(Tally {
        pass: pass as usize,
        fail: (!pass) as usize,
    })
}

fn cmd_verify(out: &mut dyn Write, source: &Source, law: &Law, cfg: VerifyConfig) -> Result<Tally> {
    let problem = load(source)?;
    let ms0 = moment_state(law, &problem)?;
    let checks = run_battery(&problem.model, &ms0, &cfg)?;
    writeln!(out, "{:<4} {:<28} {:>14} {:>2} tolerance", "", "check", "measured", "")?;
    for c in &checks {
        writeln!(out, "{c}")?;
    }
    let pass = checks.iter().filter(|c| c.pass).count();
    Ok(Tally {
        pass,
        fail: checks.len() - pass,
    })
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<Tally> {
    match &cli.command {
        Command::Riccati { source, steps, out: path } => cmd_riccati(out, source, *steps, path),
        Command::Value { source, steps, t, law } => cmd_value(out, source, *steps, *t, law),
        Command::Simulate {
            source,
            particles,
            steps,
            seed,
            law,
            record_every,
            out: path,
        } => cmd_simulate(out, source, *particles, *steps, *seed, law, *record_every, path),
        Command::Verify {
            source,
            seed,
            steps,
            particles,
            sim_steps,
            law,
            scale_lambda,
        } => {
            let cfg = VerifyConfig {
                seed: *seed,
                steps: *steps,
                particles: *particles,
                sim_steps: *sim_steps,
                scale_lambda: *scale_lambda,
                ..VerifyConfig::default()
            };
            cmd_verify(out, source, law, cfg)
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                let _ = writeln!(out, "RESULT pass=0 fail=1");
            } else {
                let _ = write!(out, "{e}");
            }
            return code;
        }
    };
    let tally = match dispatch(&cli, out) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            Tally { pass: 0, fail: 1 }
        }
    };
    let _ = writeln!(out, "RESULT pass={} fail={}", tally.pass, tally.fail);
    let _ = out.flush();
    if tally.fail == 0 {
        0
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig12(-1.4295704571147613), "-1.42957045711");
        assert_eq!(sig12(0.36787944117144233), "0.367879441171");
        assert_eq!(sig12(1234.5), "1234.50000000");
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(1.5e-9), "1.50000000000e-9");
    }

    #[test]
    fn param_parsing() {
        assert_eq!(parse_param("eta=0.5").unwrap(), ("eta".to_string(), 0.5));
        assert!(parse_param("eta").is_err());
        assert!(parse_param("eta=x").is_err());
    }
}
