//! Experiment runner behind the `levytd` binary: config handling, training
//! runs with CSV artifacts, and parameter sweeps.
//!
//! A run writes `metrics.csv` (one row per logging event), `trajectories.csv`
//! (sample paths under the trained network), and `summary.txt`. A sweep runs
//! one configuration per value of a single axis and collects `sweep.csv`.
//! Setting `LEVYTD_FIXED_CLOCK` (to any non-empty value) writes all
//! wall-clock fields as zero so repeated runs produce byte-identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::problems::{self, ProblemParams, ProblemSpec};
use crate::stochastic::{self, purpose, JumpLaw, StochasticError};
use crate::trainer::{self, MetricsRecord, TrainOptions, TrainerError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

type Result<T> = std::result::Result<T, CliError>;

/// Everything one experiment needs. Field names double as config-file keys
/// and command-line flag names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: String,
    pub d: usize,
    /// Trajectory count M.
    pub m: usize,
    /// Interval count N.
    pub n: usize,
    pub iterations: usize,
    pub td_step: usize,
    /// Horizon T.
    pub horizon: f64,
    pub lambda: f64,
    /// Jump law name: normal | uniform | exponential | bernoulli | constant.
    pub jump: String,
    pub jump_params: Vec<f64>,
    pub epsilon: f64,
    pub theta: f64,
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_every: usize,
    /// Sample-path count for trajectories.csv.
    pub paths: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os("LEVYTD_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        RunConfig {
            problem: "pure_jump_1d".into(),
            d: 1,
            m: 1000,
            n: 50,
            iterations: 400,
            td_step: 1,
            horizon: 1.0,
            lambda: 0.3,
            jump: "normal".into(),
            jump_params: vec![0.4, 0.25],
            epsilon: 0.0,
            theta: 0.0,
            lr0: 5e-5,
            lr_drop_every: 5000,
            lr_drop_factor: 5.0,
            seed: 2023,
            out_dir,
            log_every: 500,
            paths: 30,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.iterations == 0 || self.td_step == 0 {
            return Err(CliError::Config(
                "M, N, iterations, and td_step must all be >= 1".into(),
            ));
        }
        if !self.n.is_multiple_of(self.td_step) {
            return Err(CliError::Config(format!(
                "td_step {} must divide N {}",
                self.td_step, self.n
            )));
        }
        if self.horizon <= 0.0 {
            return Err(CliError::Config(format!(
                "T must be positive, got {}",
                self.horizon
            )));
        }
        if self.log_every == 0 || self.lr_drop_every == 0 {
            return Err(CliError::Config(
                "log_every and lr_drop_every must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Assemble the jump law from its name, parameters, and the dimension.
    pub fn build_law(&self) -> Result<JumpLaw> {
        let p = &self.jump_params;
        let need = |count: usize, what: &str| -> Result<()> {
            if p.len() == count {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "jump law '{}' needs {count} parameter(s) ({what}), got {}",
                    self.jump,
                    p.len()
                )))
            }
        };
        let law = match self.jump.as_str() {
            "normal" => {
                need(2, "mu, sigma")?;
                JumpLaw::Normal {
                    mu: p[0],
                    sigma: p[1],
                }
            }
            "uniform" => {
                need(1, "delta")?;
                JumpLaw::Uniform { delta: p[0] }
            }
            "exponential" => {
                need(1, "lambda0")?;
                JumpLaw::Exponential { lambda0: p[0] }
            }
            "bernoulli" => {
                need(3, "a1, a2, p")?;
                JumpLaw::Bernoulli {
                    a1: p[0],
                    a2: p[1],
                    p: p[2],
                }
            }
            "constant" => {
                need(1, "c")?;
                JumpLaw::ConstantVector { c: p[0], d: self.d }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown jump law '{other}'; expected normal, uniform, \
                     exponential, bernoulli, or constant"
                )))
            }
        };
        law.validate()?;
        Ok(law)
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let params = ProblemParams {
            d: self.d,
            lambda: self.lambda,
            law: self.build_law()?,
            epsilon: self.epsilon,
            theta: self.theta,
        };
        let mut problem = problems::by_name(&self.problem, &params)?;
        problem.horizon = self.horizon;
        Ok(problem)
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            trajectories: self.m,
            intervals: self.n,
            iterations: self.iterations,
            td_step: self.td_step,
            seed: self.seed,
            lr0: self.lr0,
            lr_drop_every: self.lr_drop_every,
            lr_drop_factor: self.lr_drop_factor,
            log_every: self.log_every,
            stop_gradient_target: false,
            trace_buffer: false,
        }
    }

    /// Set a field by its config-file key / flag name.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| CliError::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "problem" => self.problem = value.to_string(),
            "d" => self.d = parse(key, value)?,
            "M" => self.m = parse(key, value)?,
            "N" => self.n = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "td_step" => self.td_step = parse(key, value)?,
            "T" => self.horizon = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "jump" => self.jump = value.to_string(),
            "jump_params" => {
                self.jump_params = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse("jump_params", s.trim()))
                    .collect::<Result<_>>()?
            }
            "epsilon" => self.epsilon = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_drop_every" => self.lr_drop_every = parse(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "log_every" => self.log_every = parse(key, value)?,
            "paths" => self.paths = parse(key, value)?,
            other => {
                return Err(CliError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Apply a flat `key = value` config file (# starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set_field(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// True when wall-clock fields should be written as zero.
pub fn fixed_clock() -> bool {
    std::env::var_os("LEVYTD_FIXED_CLOCK").is_some_and(|v| !v.is_empty())
}

/// 17 significant digits; round-trips f64 exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Outcome of one completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_y0: f64,
    pub exact_y0: f64,
    pub rel_error: f64,
    pub updates: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,update,y0_estimate,y0_rel_error,loss1,loss2,loss3,loss4,lr,seconds";
pub const TRAJECTORIES_HEADER: &str =
    "trajectory,step,time,coord_index,x_value,n1_value,exact_value,jump_flag";
pub const SWEEP_HEADER: &str = "value,y0_rel_error,seconds";

fn metrics_row(r: &MetricsRecord, zero_clock: bool) -> String {
    let seconds = if zero_clock { 0.0 } else { r.seconds };
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        r.iteration,
        r.update,
        fmt_float(r.y0_estimate),
        fmt_float(r.y0_rel_error),
        fmt_float(r.loss.loss1),
        fmt_float(r.loss.loss2),
        fmt_float(r.loss.loss3),
        fmt_float(r.loss.loss4),
        fmt_float(r.lr),
        fmt_float(seconds),
    )
}

/// Execute one training run and write `metrics.csv`, `trajectories.csv`,
/// and `summary.txt` under the configured output directory.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let problem = config.build_problem()?;
    fs::create_dir_all(&config.out_dir)?;
    let zero_clock = fixed_clock();
    let start = Instant::now();

    let metrics_path = config.out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    metrics.write_all(METRICS_HEADER.as_bytes())?;
    metrics.write_all(b"\n")?;

    let mut write_error = None;
    let outcome = trainer::train(&problem, &config.train_options(), |r| {
        if write_error.is_none() {
            if let Err(e) = metrics.write_all(metrics_row(r, zero_clock).as_bytes()) {
                write_error = Some(e);
            }
        }
    });
    metrics.flush()?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    // Divergence surfaces after the partial metrics have been flushed.
    let state = outcome?;

    write_trajectories(
        &config.out_dir.join("trajectories.csv"),
        config,
        &problem,
        &state.net,
    )?;

    let (n1, _) = state
        .net
        .forward_values(0.0, &problem.initial_point, problem.dim)?;
    let final_y0 = n1[0];
    let exact_y0 = problem.y0_exact().unwrap_or(f64::NAN);
    let rel_error = if exact_y0 != 0.0 {
        ((final_y0 - exact_y0) / exact_y0).abs()
    } else {
        (final_y0 - exact_y0).abs()
    };
    let seconds = if zero_clock {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    };
    let summary = RunSummary {
        final_y0,
        exact_y0,
        rel_error,
        updates: state.update_count,
        seconds,
    };

    let text = format!(
        "problem: {}\nfinal_y0: {}\nexact_y0: {}\nrel_error: {}\nupdates: {}\nruntime_seconds: {}\n",
        config.problem,
        fmt_float(summary.final_y0),
        fmt_float(summary.exact_y0),
        fmt_float(summary.rel_error),
        summary.updates,
        fmt_float(summary.seconds),
    );
    fs::write(config.out_dir.join("summary.txt"), text)?;
    Ok(summary)
}

/// Simulate sample paths under the trained network and write the trajectory
/// CSV. `jump_flag` is 1 on steps whose incoming interval contains at least
/// one jump.
fn write_trajectories(
    path: &Path,
    config: &RunConfig,
    problem: &ProblemSpec,
    net: &crate::network::Net,
) -> Result<()> {
    let paths = config.paths;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(TRAJECTORIES_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    if paths == 0 {
        out.flush()?;
        return Ok(());
    }

    let batch = stochastic::simulate_batch(
        problem,
        paths,
        config.n,
        config.seed,
        purpose::TRAJECTORIES,
        0,
    )?;
    let d = problem.dim;
    let dt = batch.dt();

    // Network values per grid time, batched across the sample paths.
    let mut n1_by_step = Vec::with_capacity(config.n + 1);
    for step in 0..=config.n {
        let mut states = Vec::with_capacity(paths * d);
        for j in 0..paths {
            states.extend_from_slice(batch.state(j, step));
        }
        let (n1, _) = net.forward_values(step as f64 * dt, &states, d)?;
        n1_by_step.push(n1);
    }

    for (j, traj_jumps) in batch.jumps.iter().enumerate() {
        let jump_steps: std::collections::HashSet<usize> = traj_jumps
            .iter()
            .map(|rec| stochastic::PathBatch::interval_of(rec.time, dt, config.n) + 1)
            .collect();
        for (step, n1_row) in n1_by_step.iter().enumerate() {
            let t = step as f64 * dt;
            let x = batch.state(j, step);
            let n1 = n1_row[j];
            let exact = problem.exact_value(t, x).unwrap_or(f64::NAN);
            let flag = u8::from(jump_steps.contains(&step));
            for (coord, &xv) in x.iter().enumerate() {
                out.write_all(
                    format!(
                        "{j},{step},{},{coord},{},{},{},{flag}\n",
                        fmt_float(t),
                        fmt_float(xv),
                        fmt_float(n1),
                        fmt_float(exact),
                    )
                    .as_bytes(),
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Run one configuration per axis value; write `sweep.csv` with one row per
/// run. Individual failures are recorded as NaN rows and the sweep
/// continues.
pub fn sweep(template: &RunConfig, axis: &str, values: &[String]) -> Result<PathBuf> {
    // Surface unknown axis names before running anything.
    template
        .clone()
        .set_field(axis, values.first().map(String::as_str).unwrap_or("0"))?;

    fs::create_dir_all(&template.out_dir)?;
    let sweep_path = template.out_dir.join("sweep.csv");
    let mut out = BufWriter::new(fs::File::create(&sweep_path)?);
    out.write_all(SWEEP_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    let zero_clock = fixed_clock();

    for value in values {
        let start = Instant::now();
        let attempt = (|| -> Result<RunSummary> {
            let mut config = template.clone();
            config.set_field(axis, value)?;
            config.out_dir = template.out_dir.join(format!("{axis}={value}"));
            run(&config)
        })();
        let seconds = if zero_clock {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        let rel = match &attempt {
            Ok(summary) => summary.rel_error,
            Err(e) => {
                eprintln!("sweep {axis}={value} failed: {e}");
                f64::NAN
            }
        };
        out.write_all(format!("{value},{},{}\n", fmt_float(rel), fmt_float(seconds)).as_bytes())?;
    }
    out.flush()?;
    Ok(sweep_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            m: 8,
            n: 4,
            iterations: 2,
            log_every: 2,
            paths: 3,
            out_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_td_step_and_jump_params() {
        let mut c = RunConfig {
            td_step: 7,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Config(_))));

        c = RunConfig::default();
        c.jump = "uniform".into();
        c.jump_params = vec![0.4, 0.1];
        assert!(c.build_law().is_err());
        c.jump_params = vec![0.4];
        assert_eq!(c.build_law().unwrap(), JumpLaw::Uniform { delta: 0.4 });
    }

    #[test]
    fn config_file_and_overrides() {
        let dir = std::env::temp_dir().join(format!("levytd-cli-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(
            &path,
            "# comment\nproblem = robustness_1d\nM = 123\nlambda = 0.9 # trailing\njump_params = 0.1,0.2\n",
        )
        .unwrap();
        let mut config = RunConfig::default();
        config.apply_file(&path).unwrap();
        assert_eq!(config.problem, "robustness_1d");
        assert_eq!(config.m, 123);
        assert_eq!(config.lambda, 0.9);
        assert_eq!(config.jump_params, vec![0.1, 0.2]);
        config.set_field("M", "77").unwrap();
        assert_eq!(config.m, 77);
        assert!(config.set_field("bogus", "1").is_err());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn run_writes_all_artifacts_with_exact_headers() {
        let dir = std::env::temp_dir().join(format!("levytd-cli-run-{}", std::process::id()));
        let config = tiny_config(&dir);
        let summary = run(&config).unwrap();
        assert_eq!(summary.updates, 2 * 4);

        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(&format!("{METRICS_HEADER}\n")));
        // initial record + updates 2, 4, 6, 8
        assert_eq!(metrics.trim().lines().count(), 1 + 1 + 4);

        let traj = fs::read_to_string(dir.join("trajectories.csv")).unwrap();
        assert!(traj.starts_with(&format!("{TRAJECTORIES_HEADER}\n")));
        assert_eq!(traj.trim().lines().count(), 1 + 3 * 5);

        let summary_text = fs::read_to_string(dir.join("summary.txt")).unwrap();
        assert!(summary_text.contains("final_y0:"));
        assert!(summary_text.contains("rel_error:"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_writes_header_only_for_empty_values() {
        let dir = std::env::temp_dir().join(format!("levytd-cli-sweep0-{}", std::process::id()));
        let config = tiny_config(&dir);
        let path = sweep(&config, "lambda", &[]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text, format!("{SWEEP_HEADER}\n"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_continues_past_failures() {
        let dir = std::env::temp_dir().join(format!("levytd-cli-sweep-{}", std::process::id()));
        let mut config = tiny_config(&dir);
        config.problem = "robustness_1d".into();
        config.jump = "exponential".into();
        config.jump_params = vec![3.0];
        // lambda0 = 0.5 has a divergent compensator, 3 is fine.
        let path = sweep(&config, "jump_params", &["0.5".into(), "3".into()]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.5,NaN"));
        assert!(!lines[2].contains("NaN"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_sweep_axis_is_rejected() {
        let dir = std::env::temp_dir().join(format!("levytd-cli-axis-{}", std::process::id()));
        let config = tiny_config(&dir);
        assert!(sweep(&config, "warp", &["1".into()]).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
