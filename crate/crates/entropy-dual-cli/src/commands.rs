use std::f64::consts::PI;

use entropy_dual::consistency::{self, ConsistencyError, ConsistencyOptions, ConsistencyTolerances, DafermosOptions, HopfLaxOptions};
use entropy_dual::dual::{self, DualError, DualOptions, DualStart};
use entropy_dual::entropy::{self, Conjugate, EntropyError};
use entropy_dual::grid::{random_smooth, GridError};
use entropy_dual::strong::{self, StrongOptions};
use entropy_dual::systems::{self, LambdaCone, SystemError};
use entropy_dual::{FieldShape, GridField, PeriodicGrid, SampledFunction, SystemParams, SystemSpec, Trajectory, WeightSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{Auto, RunConfig};
use crate::output::{LinePlot, OutputDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    CheckAssumptions,
    SolveStrong,
    SolveDual,
    Verify,
    Dafermos,
    Hopflax,
    OrliczNorm,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckAssumptions => "check-assumptions",
            Command::SolveStrong => "solve-strong",
            Command::SolveDual => "solve-dual",
            Command::Verify => "verify",
            Command::Dafermos => "dafermos",
            Command::Hopflax => "hopflax",
            Command::OrliczNorm => "orlicz-norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    NonConvergence,
    Hypothesis,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::NonConvergence => 2,
            Status::Hypothesis => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::NonConvergence => "numerical-failure",
            Status::Hypothesis => "hypothesis-violated",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 4,
            CliError::Numerical(_) => 2,
            CliError::Hypothesis(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o: {e}"))
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::Unknown(_) | SystemError::Param(_) => CliError::Config(e.to_string()),
            SystemError::Entropy(EntropyError::NoConvergence { .. }) => CliError::Numerical(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EntropyError> for CliError {
    fn from(e: EntropyError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<DualError> for CliError {
    fn from(e: DualError) -> Self {
        match e {
            DualError::Infeasible(_) => CliError::Hypothesis(e.to_string()),
            DualError::NonConvergence(_) => CliError::Numerical(e.to_string()),
            DualError::System(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ConsistencyError> for CliError {
    fn from(e: ConsistencyError) -> Self {
        match e {
            ConsistencyError::NotSubsolution(_) => CliError::Hypothesis(e.to_string()),
            ConsistencyError::Param(_) => CliError::Config(e.to_string()),
            ConsistencyError::Dual(d) => d.into(),
            ConsistencyError::System(s) => s.into(),
            ConsistencyError::Grid(g) => g.into(),
        }
    }
}

pub struct Outcome {
    pub status: Status,
    pub notes: Vec<String>,
    pub results: Value,
}

/// Everything derived from the config before any solver runs.
pub struct Setup {
    pub cfg: RunConfig,
    pub sys: SystemSpec,
    pub space: PeriodicGrid,
    pub v0: GridField,
}

impl Setup {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate().map_err(|e| CliError::Config(e.0))?;
        let s = &cfg.system;
        if s.d > 1 && !matches!(s.name.as_str(), "nls" | "nlkg" | "hj") {
            return Err(CliError::Config(format!("system.d > 1 is not available for {}", s.name)));
        }
        let params = SystemParams {
            alpha: s.alpha,
            q: s.q,
            d: s.d,
            epsilon: match s.epsilon {
                Auto::Auto => None,
                Auto::Value(e) => Some(e),
            },
        };
        let sys = systems::make_system(&s.name, &params)?;
        let space = PeriodicGrid::new(vec![cfg.grid.nx; s.d], vec![cfg.grid.length; s.d])?;
        let shape = FieldShape::Vector(sys.n);
        let v0 = match cfg.data.kind.as_str() {
            "zero" => GridField::zeros(&space, shape),
            "cos" => {
                let (a, l) = (cfg.data.amplitude, cfg.grid.length);
                GridField::from_fn(&space, shape, |x| vec![a * (2.0 * PI * x[0] / l).cos(); sys.n])
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                random_smooth(&space, shape, cfg.data.modes, cfg.data.amplitude, &mut rng)
            }
        };
        Ok(Self { cfg, sys, space, v0 })
    }

    fn strong_options(&self) -> StrongOptions {
        let g = &self.cfg.grid;
        let mut o = StrongOptions::with_cfl(&self.sys, &self.space, g.t_end, g.steps, g.cfl, g.dealias);
        o.blowup = self.cfg.strong.blowup;
        o.tol = self.cfg.strong.tol;
        o
    }

    fn strong(&self) -> Result<Trajectory, CliError> {
        Ok(strong::integrate_sharp(&self.sys, &self.v0, &self.strong_options())?)
    }

    fn schedule(&self, traj: &Trajectory, t_end: f64) -> Result<(f64, WeightSchedule), CliError> {
        let gamma = match self.cfg.schedule.gamma {
            Auto::Value(g) => g,
            Auto::Auto => strong::select_gamma(&self.sys, traj, t_end)?,
        };
        Ok((gamma, WeightSchedule::new(gamma, self.cfg.grid.t_end)?))
    }

    fn dual_options(&self) -> DualOptions {
        let d = &self.cfg.dual;
        DualOptions {
            mu0: d.mu0,
            mu_stages: d.stages,
            max_iters: d.max_iters,
            tol: d.tol,
            conj_tol: d.conj_tol,
            newton_iters: d.newton_iters,
            start: match d.start.as_str() {
                "zero" => DualStart::Zero,
                _ => DualStart::Random { seed: self.cfg.seed, amplitude: d.start_amplitude, modes: 3 },
            },
            ..Default::default()
        }
    }
}

fn l2(a: &GridField, b: &GridField) -> f64 {
    (a.sub(b).norm().powi(2) * a.grid.cell_volume()).sqrt()
}

fn fields(fs: &[GridField]) -> impl Iterator<Item = f64> + '_ {
    fs.iter().flat_map(|f| f.data.iter().copied())
}

/// Point-major copy of a grid field for the N-function toolkit.
fn sampled(f: &GridField) -> Result<SampledFunction, CliError> {
    let n = f.components();
    let data = (0..f.len()).flat_map(|p| f.point(p)).collect();
    let spacing = (0..f.grid.dim()).map(|a| f.grid.spacing(a)).collect();
    Ok(SampledFunction::new(n, f.grid.points.clone(), spacing, data)?)
}

pub fn run(cmd: Command, setup: &Setup, out: &mut OutputDir) -> Result<Outcome, CliError> {
    match cmd {
        Command::CheckAssumptions => check_assumptions(setup),
        Command::SolveStrong => solve_strong(setup, out),
        Command::SolveDual => solve_dual(setup, out),
        Command::Verify => verify(setup),
        Command::Dafermos => dafermos(setup, out),
        Command::Hopflax => hopflax(setup, out),
        Command::OrliczNorm => orlicz_norm(setup),
    }
}

fn check_assumptions(s: &Setup) -> Result<Outcome, CliError> {
    let (sys, cfg) = (&s.sys, &s.cfg);
    let seed = cfg.seed;
    let mut failed = vec![];
    let mut notes = vec![];
    let nf = entropy::n_function_report(sys.entropy.as_ref(), (0.1, 10.0), 2000, seed)?;
    let nf_ok =
        nf.even && nf.positive && nf.strictly_convex && nf.ratio_min > 1.0 && nf.delta2_k.is_finite() && nf.delta2_kstar.is_finite();
    let cons = systems::check_conservativity(sys, &s.space, cfg.checks.trials, seed, 0.5)?;
    let cone = LambdaCone::new(sys);
    let conv = systems::check_lambda_convexity(sys, &cone, cfg.checks.samples, seed);
    let order = systems::check_lambda_order(sys, &cone, cfg.checks.samples, seed, cfg.checks.radius);
    let trace = systems::check_strong_trace(sys, &s.space, 4, seed)?;
    if !trace.verified {
        notes.push("strong trace condition unverified for this operator".to_string());
    }
    let loewner = (sys.name == "gkdv").then(|| systems::loewner_counterexample(sys, &systems::loewner_matrix(sys.big_n)));
    let loewner_ok = match &loewner {
        Some(w) => w.as_ref().is_some_and(|w| w.eigenvalue < -1e-6),
        None => true,
    };
    for (name, ok) in [
        ("n_function", nf_ok),
        ("conservativity", cons <= 1e-9),
        ("lambda_convexity", conv.min_eigenvalue >= -1e-10),
        ("lambda_order", order.min_pairing >= -1e-10),
        ("loewner_negative_control", loewner_ok),
    ] {
        if !ok {
            failed.push(name);
        }
    }
    let status = if failed.is_empty() { Status::Pass } else { Status::Hypothesis };
    if !failed.is_empty() {
        notes.push(format!("failed checks: {}", failed.join(", ")));
    }
    Ok(Outcome {
        status,
        notes,
        results: json!({
            "system": sys.name,
            "epsilon": sys.epsilon,
            "failed": failed,
            "n_function": nf,
            "conservativity_residual": cons,
            "lambda_convexity": conv,
            "lambda_order": order,
            "strong_trace": trace,
            "loewner": loewner,
        }),
    })
}

fn solve_strong(s: &Setup, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let traj = s.strong()?;
    let t_end = s.cfg.grid.t_end;
    let (gamma, sch) = s.schedule(&traj, t_end)?;
    let series = strong::entropy_series(&s.sys, &traj);
    let margins = strong::node_margins(&s.sys, &traj, &sch)?;
    let rows: Vec<Vec<f64>> = traj.times.iter().zip(&series).zip(&margins).map(|((t, k), m)| vec![*t, *k, *m]).collect();
    out.csv("entropy.csv", &["t", "entropy", "margin"], &rows)?;
    out.svg(
        "entropy.svg",
        &LinePlot {
            title: format!("total entropy, {}", s.sys.name),
            x_label: "t".into(),
            series: vec![("K(t)".into(), traj.times.iter().copied().zip(series.iter().copied()).collect())],
        },
    )?;
    out.binary("trajectory.bin", fields(&traj.states))?;
    let drift = strong::entropy_drift(&series);
    let margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let mut notes = vec![];
    let status = if traj.blown_up {
        notes.push(format!("blow-up detected; valid up to t = {}", traj.final_valid_time));
        Status::NonConvergence
    } else {
        Status::Pass
    };
    if margin < 0.0 {
        notes.push("weighted cone margin is negative along the trajectory; increase gamma".into());
    }
    Ok(Outcome {
        status,
        notes,
        results: json!({
            "gamma": gamma,
            "entropy_drift": drift,
            "feasibility_margin": margin,
            "blown_up": traj.blown_up,
            "final_valid_time": traj.final_valid_time,
            "substeps": s.strong_options().substeps,
            "trajectory_shape": [traj.len(), s.sys.n, s.space.len()],
        }),
    })
}

fn solve_dual(s: &Setup, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let traj = s.strong()?;
    let t_end = s.cfg.grid.t_end;
    let (gamma, sch) = s.schedule(&traj, t_end)?;
    let grid = s.space.clone().with_time(t_end, s.cfg.grid.steps)?;
    let sol = dual::solve_dual(&s.sys, &s.v0, &grid, &sch, &s.dual_options())?;
    let reference = consistency::reference_value(&s.sys, &s.v0, &sch);
    let recovered = dual::recover_primal(&s.sys, &sol.state.e, &grid, &sch, s.cfg.dual.conj_tol)?;
    let v0_error = (!traj.blown_up).then(|| l2(&recovered.states[0], &s.v0));
    let upper = reference + 1e-3 * (1.0 + reference.abs());
    let sandwich = sol.value >= sol.lower_bound - 1e-8 && sol.value <= upper;
    let rows: Vec<Vec<f64>> = sol.history.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
    out.csv("history.csv", &["iteration", "objective"], &rows)?;
    out.svg(
        "convergence.svg",
        &LinePlot {
            title: format!("dual ascent, {}", s.sys.name),
            x_label: "iteration".into(),
            series: vec![("J - penalty".into(), rows.iter().map(|r| (r[0], r[1])).collect())],
        },
    )?;
    out.binary("dual_potential.bin", fields(&sol.state.a))?;
    out.binary("recovered.bin", fields(&recovered.states))?;
    let mut notes = vec![];
    if !sol.converged {
        notes.push("dual solver did not reach its stationarity tolerance".into());
    }
    if !sandwich {
        notes.push("value outside the sandwich bounds".into());
    }
    let status = if sol.converged && sandwich { Status::Pass } else { Status::NonConvergence };
    Ok(Outcome {
        status,
        notes,
        results: json!({
            "gamma": gamma,
            "value": sol.value,
            "lower_bound": sol.lower_bound,
            "reference": reference,
            "relative_gap": (sol.value - reference).abs() / (1.0 + reference.abs()),
            "sandwich_ok": sandwich,
            "penalty": sol.penalty,
            "stationarity": sol.stationarity,
            "iterations": sol.iterations,
            "converged": sol.converged,
            "cone_margin": sol.state.cone_margin,
            "recovered_v0_error": v0_error,
            "stages": sol.stages,
            "potential_shape": [sol.state.a.len(), s.sys.n, s.space.len()],
        }),
    })
}

fn verify(s: &Setup) -> Result<Outcome, CliError> {
    let traj = s.strong()?;
    if traj.blown_up {
        return Err(CliError::Numerical(format!("strong solution blew up at t = {}", traj.final_valid_time)));
    }
    let t_end = s.cfg.grid.t_end;
    let (gamma, sch) = s.schedule(&traj, t_end)?;
    let v = &s.cfg.verify;
    let opts = ConsistencyOptions {
        tolerances: ConsistencyTolerances {
            gap: v.gap,
            recovery: v.recovery,
            constraint: v.constraint,
            margin: v.margin,
            maximality: v.maximality,
        },
        conj_tol: s.cfg.dual.conj_tol,
        solve: v.solve.then(|| s.dual_options()),
    };
    let rep = consistency::verify_consistency(&s.sys, &traj, &sch, &opts)?;
    let mut notes = vec![];
    let status = if !rep.hypothesis_ok {
        notes.push(rep.hypothesis_note.clone().unwrap_or_default());
        Status::Hypothesis
    } else if rep.pass {
        Status::Pass
    } else {
        notes.push("consistency tolerances not met".into());
        Status::NonConvergence
    };
    Ok(Outcome { status, notes, results: json!({ "gamma": gamma, "consistency": rep }) })
}

fn dafermos(s: &Setup, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let traj = s.strong()?;
    if traj.blown_up {
        return Err(CliError::Numerical(format!("strong solution blew up at t = {}", traj.final_valid_time)));
    }
    let t1 = match s.cfg.dafermos.t1 {
        Auto::Auto => s.cfg.grid.t_end,
        Auto::Value(t) => t,
    };
    let (gamma, sch) = s.schedule(&traj, t1)?;
    let g = vec![s.cfg.dafermos.inflation; traj.len()];
    let sub = consistency::subsolution_inflate(&s.sys, &traj, &g)?;
    let d = &s.cfg.dafermos;
    let opts = DafermosOptions { tol: d.tol, samples: d.samples, certify_samples: d.certify, modes: d.modes, seed: s.cfg.seed };
    let rep = consistency::dafermos_check(&s.sys, &sub, &traj, &sch, t1, &opts)?;
    let strong_series = strong::entropy_series(&s.sys, &traj);
    let rows: Vec<Vec<f64>> = traj.times.iter().zip(&sub.entropy).zip(&strong_series).map(|((t, a), b)| vec![*t, *a, *b]).collect();
    out.csv("entropy.csv", &["t", "subsolution", "strong"], &rows)?;
    out.svg(
        "entropy.svg",
        &LinePlot {
            title: format!("subsolution vs strong entropy, {}", s.sys.name),
            x_label: "t".into(),
            series: vec![
                ("subsolution".into(), rows.iter().map(|r| (r[0], r[1])).collect()),
                ("strong".into(), rows.iter().map(|r| (r[0], r[2])).collect()),
            ],
        },
    )?;
    let mut notes = vec![];
    let status = if rep.pass {
        Status::Pass
    } else {
        notes.push("weighted entropy fell below the reference or the pointwise pattern occurred".into());
        Status::NonConvergence
    };
    Ok(Outcome { status, notes, results: json!({ "gamma": gamma, "dafermos": rep }) })
}

fn hopflax(s: &Setup, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let h = &s.cfg.hopflax;
    let (a, l) = (h.amplitude, s.cfg.grid.length);
    let line = PeriodicGrid::line(s.cfg.grid.nx, l)?;
    let psi0 = GridField::from_fn(&line, FieldShape::Vector(1), |x| vec![a * (2.0 * PI * x[0] / l).cos()]);
    let unit = consistency::normalize_hopf_lax(&psi0, h.t_end)?;
    let opts = HopfLaxOptions { steps: h.steps, iterations: h.iterations, dual: s.dual_options(), residual_tol: 1e-6 };
    let rep = consistency::hopf_lax_crosscheck(&unit, &opts)?;
    let n = rep.density.len();
    let rows: Vec<Vec<f64>> = rep.density.iter().enumerate().map(|(i, m)| vec![i as f64 / n as f64, *m * n as f64]).collect();
    out.csv("density.csv", &["x", "density"], &rows)?;
    let mut notes = vec![];
    if rep.flagged {
        notes.push("dual solver unconverged or descent residual above tolerance".into());
    }
    let status = if rep.relative_gap <= h.gap { Status::Pass } else { Status::NonConvergence };
    Ok(Outcome { status, notes, results: json!({ "hopf_lax": rep }) })
}

fn orlicz_norm(s: &Setup) -> Result<Outcome, CliError> {
    let k = s.sys.entropy.as_ref();
    let tol = 1e-12;
    let f = sampled(&s.v0)?;
    let w = sampled(&s.sys.sharp_field(&s.v0))?;
    let kstar = Conjugate { base: k, tol: 1e-13 };
    let lux = entropy::luxemburg_norm(&f, k, tol)?;
    let orl = entropy::orlicz_norm(&f, k, tol)?;
    let modular = entropy::modular(&f, k)?;
    let lux_star = entropy::luxemburg_norm(&w, &kstar, tol)?;
    let pairing: f64 = f.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>() * f.cell_volume();
    let slack = 1e-9 * (1.0 + lux);
    let equivalence = lux <= orl + slack && orl <= 2.0 * lux + slack;
    let holder = pairing.abs() <= 2.0 * lux * lux_star * (1.0 + 1e-9) + 1e-15;
    let modular_bound = lux <= modular.max(1.0) * (1.0 + 1e-10);
    let pass = equivalence && holder && modular_bound;
    Ok(Outcome {
        status: if pass { Status::Pass } else { Status::NonConvergence },
        notes: vec![],
        results: json!({
            "luxemburg": lux,
            "orlicz": orl,
            "modular": modular,
            "conjugate_luxemburg_of_sharp": lux_star,
            "pairing_with_sharp": pairing,
            "equivalence_ok": equivalence,
            "holder_ok": holder,
            "modular_bound_ok": modular_bound,
        }),
    })
}
