use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use sabra_core::equilibrium::{self, SteadySolution};
use sabra_core::exec::{stream, Execution};
use sabra_core::hinf::{self, FeedbackSign, HinfContext, RobustSummary};
use sabra_core::model::{ShellParams, ShellState, Trajectory};
use sabra_core::sim::{self, IntegratorConfig, LinearPart, Rhs};
use sabra_core::stabilization::{self, DECAY_WINDOW};
use sabra_core::verify::{self, Scenario};
use sabra_core::{spectral, Error};

use crate::config::{Forcing, Initial, Level, RunConfig};
use crate::output::Sink;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::StepTooLarge { .. } | Error::IndexOutOfRange { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

type Res<T> = std::result::Result<T, CliError>;

/// Parameters, forcing and output sink built from a configuration.
pub struct Run {
    pub cfg: RunConfig,
    pub params: ShellParams,
    pub forcing: ShellState,
    pub sink: Sink,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Res<Self> {
        let m = &cfg.model;
        let params = ShellParams::new(m.a, m.b, m.lambda, m.k0, m.nu, m.m).map_err(|e| CliError::Config(e.to_string()))?;
        let forcing = load_forcing(&cfg.forcing, m.m)?;
        let sink = Sink::new(&cfg.output.dir, cfg.output.csv, cfg.output.json)?;
        Ok(Run {
            cfg,
            params,
            forcing,
            sink,
        })
    }

    fn integrator(&self) -> IntegratorConfig {
        let s = &self.cfg.sim;
        IntegratorConfig {
            scheme: s.scheme,
            dt: s.dt,
            t_end: s.t_end,
            record_every: s.record_every,
            tolerance: s.tolerance,
        }
    }

    fn steady(&self) -> Res<SteadySolution> {
        let c = &self.cfg.control;
        let sol = equilibrium::solve_steady(&self.params, &self.forcing, c.tolerance, c.max_iter)?;
        if !sol.converged {
            return Err(CliError::Numerical(format!(
                "steady state did not converge after {} iterations (residual {:e})",
                sol.iterations, sol.residual_norm
            )));
        }
        Ok(sol)
    }

    fn b1(&self) -> Res<DMatrix<f64>> {
        Ok(stabilization::shell_mask(&self.params, self.cfg.control.b1_mask.shells())?)
    }

    fn b2(&self) -> Res<DMatrix<f64>> {
        Ok(stabilization::shell_mask(&self.params, self.cfg.hinf.b2_mask.shells())?)
    }

    fn context(&self, u_e: &ShellState) -> Res<HinfContext> {
        Ok(HinfContext::for_model(&self.params, u_e, self.b1()?, self.b2()?)?)
    }

    fn grid(&self, horizon: f64) -> Vec<f64> {
        let h = self.cfg.hinf.step;
        sim::uniform_grid(horizon, (horizon / h).ceil().max(1.0) as usize)
    }

    pub fn scenario(&self, exec: Execution) -> Scenario {
        let c = &self.cfg;
        Scenario {
            params: self.params.clone(),
            forcing: self.forcing.clone(),
            beta: c.control.beta,
            b1_mask: c.control.b1_mask.shells().map(|s| s.to_vec()),
            b2_mask: c.hinf.b2_mask.shells().map(|s| s.to_vec()),
            gamma_factor: c.hinf.gamma_factor,
            trials: c.control.trials,
            seed: c.seed,
            dt: c.sim.dt,
            hinf_step: c.hinf.structure_step,
            exec,
        }
    }
}

/// Rows `n,re,im`; an optional header line is skipped, unlisted shells are
/// zero.
fn load_forcing(spec: &Forcing, m: usize) -> Res<ShellState> {
    let mut f = ShellState::zeros(m);
    match spec {
        Forcing::Zero => {}
        Forcing::Single { shell, amplitude, phase } => {
            f.amps_mut()[shell - 1] = Complex64::from_polar(*amplitude, *phase);
        }
        Forcing::File(path) => {
            let bad = |line: usize, msg: &str| CliError::Config(format!("{} line {line}: {msg}", path.display()));
            let mut rd = csv::ReaderBuilder::new()
                .has_headers(false)
                .trim(csv::Trim::All)
                .comment(Some(b'#'))
                .from_path(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            for (i, rec) in rd.records().enumerate() {
                let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let line = rec.position().map_or(i + 1, |p| p.line() as usize);
                if rec.len() != 3 {
                    return Err(bad(line, "expected three fields n,re,im"));
                }
                let n: usize = match rec[0].parse() {
                    Ok(n) => n,
                    Err(_) if i == 0 => continue,
                    Err(_) => return Err(bad(line, "shell index is not an integer")),
                };
                if n < 1 || n > m {
                    return Err(bad(line, &format!("shell {n} outside 1..{m}")));
                }
                let re: f64 = rec[1].parse().map_err(|_| bad(line, "bad real part"))?;
                let im: f64 = rec[2].parse().map_err(|_| bad(line, "bad imaginary part"))?;
                f.amps_mut()[n - 1] = Complex64::new(re, im);
            }
        }
    }
    Ok(f)
}

#[derive(Serialize)]
struct Amplitudes {
    re: Vec<f64>,
    im: Vec<f64>,
}

fn amplitudes(u: &ShellState) -> Amplitudes {
    Amplitudes {
        re: u.amps().iter().map(|z| z.re).collect(),
        im: u.amps().iter().map(|z| z.im).collect(),
    }
}

fn pairs(z: &[Complex64]) -> Vec<[f64; 2]> {
    z.iter().map(|z| [z.re, z.im]).collect()
}

/// Runs a trajectory, writing the record even when it was cut short.
/// Returns the trajectory and `Some((time, growth))` on blow-up.
fn run_flushed(run: &mut Run, name: &str, rhs: &Rhs<'_>, u0: &ShellState) -> Res<(Trajectory, Option<(f64, f64)>)> {
    let cfg = run.integrator();
    let (traj, blow) = match sim::integrate(rhs, u0, &cfg) {
        Ok(t) => (t, None),
        Err(Error::Instability { time, growth, partial }) => (*partial, Some((time, growth))),
        Err(e) => return Err(e.into()),
    };
    run.sink.trajectory(name, &run.params, &traj)?;
    Ok((traj, blow))
}

fn blow_up_json(blow: Option<(f64, f64)>) -> serde_json::Value {
    blow.map_or(serde_json::Value::Null, |(t, g)| json!({ "time": t, "growth": g }))
}

pub fn simulate(run: &mut Run) -> Res<()> {
    let u0 = match run.cfg.sim.initial {
        Initial::Zero => ShellState::zeros(run.params.m()),
        Initial::Shell { shell, amplitude } => ShellState::unit(run.params.m(), shell)?.scale(amplitude),
        Initial::Perturbed { radius } => {
            let u_e = run.steady()?.u_e;
            let mut rng = stream(run.cfg.seed, 0);
            u_e.add(&stabilization::smooth_perturbation(&run.params, radius, &mut rng))
        }
    };
    let params = run.params.clone();
    let rhs = Rhs::open_loop(&params, &run.forcing);
    let (traj, blow) = run_flushed(run, "simulate", &rhs, &u0)?;
    let budget = sim::energy_budget(&traj, &run.params, &run.forcing)?;
    let fit = sim::fit_decay_rate(&traj, DECAY_WINDOW).ok();
    let last = traj.last().expect("record holds the initial state");
    let result = json!({
        "scheme": run.cfg.sim.scheme.name(),
        "steps_recorded": traj.len(),
        "t_final": traj.times[traj.len() - 1],
        "final_abs_u": last.h_norm(),
        "final_v_norm": sabra_core::model::norm(&run.params, last, 1.0)?,
        "energy_max_residual": budget.max_residual,
        "energy_max_relative": budget.max_relative,
        "decay_rate": fit.map(|f| f.0),
        "decay_r_squared": fit.map(|f| f.1),
        "blow_up": blow_up_json(blow),
    });
    let status = if blow.is_some() { "unstable" } else { "ok" };
    run.sink.json("simulate", status, run.cfg.seed, &result)?;
    match blow {
        Some((t, g)) => Err(CliError::Numerical(format!("integration unstable at t = {t} (growth {g:e}); partial record written"))),
        None => Ok(()),
    }
}

pub fn steady(run: &mut Run) -> Res<()> {
    let c = &run.cfg.control;
    let sol = equilibrium::solve_steady(&run.params, &run.forcing, c.tolerance, c.max_iter)?;
    let result = json!({
        "u_e": amplitudes(&sol.u_e),
        "residual_norm": sol.residual_norm,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "unique_certified": sol.unique_certified,
        "bound_v": sol.bound_v,
        "a_priori_bound": sol.a_priori_bound,
        "a_norm": sol.a_norm,
    });
    let status = if sol.converged { "ok" } else { "not_converged" };
    run.sink.json("steady", status, run.cfg.seed, &result)?;
    if sol.converged {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("steady state did not converge (residual {:e})", sol.residual_norm)))
    }
}

pub fn spectrum(run: &mut Run) -> Res<()> {
    let u_e = run.steady()?.u_e;
    let a = spectral::assemble_linearization(&run.params, &u_e)?;
    let d = spectral::eigensplit(&a, run.cfg.control.beta)?;
    let ctrl = spectral::controllability_matrix(&d, &run.b1()?)?;
    let result = json!({
        "beta": d.beta,
        "eigenvalues": pairs(&d.eigenvalues),
        "n_slow": d.n_slow,
        "slow_eigenvalues": pairs(d.slow_eigenvalues()),
        "clusters": d.clusters.len(),
        "eigen_residual": d.eigen_residual(),
        "left_residual": d.left_residual(),
        "biorthogonality_residual": d.biorthogonality_residual(),
        "controllability": ctrl,
    });
    run.sink.json("spectrum", "ok", run.cfg.seed, &result)?;
    Ok(())
}

pub fn lqr(run: &mut Run, exec: Execution) -> Res<()> {
    let u_e = run.steady()?.u_e;
    let c = run.cfg.control.clone();
    let law = stabilization::synthesize(&run.params, &u_e, c.beta, &run.b1()?, c.weight)?;
    let basin = stabilization::estimate_basin(&law, &run.forcing, &c.radii, c.trials, run.cfg.seed, run.cfg.sim.dt, exec)?;

    let radius = c.radii[0];
    let mut rng = stream(run.cfg.seed, u64::MAX);
    let v0 = stabilization::smooth_perturbation(&run.params, radius, &mut rng);
    let rhs = stabilization::nonlinear_deviation_rhs(&law, &run.forcing)?.with_anchor(u_e.to_real());
    let (traj, blow) = run_flushed(run, "lqr", &rhs, &u_e.add(&v0))?;
    let dev: Vec<f64> = traj.states.iter().map(|u| u.sub(&u_e).h_norm()).collect();
    let fit = sim::fit_decay_rate_series(&traj.times, &dev, DECAY_WINDOW).ok();

    let result = json!({
        "law": &law,
        "gain_rank": law.gain_rank(),
        "slow_shells": law.slow_shells(1e-12),
        "basin": basin,
        "run": {
            "radius": radius,
            "decay_rate": fit.map(|f| f.0),
            "final_deviation": dev[dev.len() - 1],
            "blow_up": blow_up_json(blow),
        },
    });
    let status = if blow.is_some() { "unstable" } else { "ok" };
    run.sink.json("lqr", status, run.cfg.seed, &result)?;
    match blow {
        Some((t, _)) => Err(CliError::Numerical(format!("closed-loop run unstable at t = {t}; partial record written"))),
        None => Ok(()),
    }
}

pub fn hinf(run: &mut Run) -> Res<()> {
    let u_e = run.steady()?.u_e;
    let ctx = run.context(&u_e)?;
    let h = run.cfg.hinf.clone();
    let gs = hinf::gamma_star(&ctx, 1e-6)?;
    let gamma = match h.gamma {
        Level::Fixed(g) => g,
        // any level works without a disturbance channel
        Level::Auto if gs.gamma_star > 0.0 => h.gamma_factor * gs.gamma_star,
        Level::Auto => 1.0,
    };
    let mut ctrl = hinf::synthesize_robust(&ctx, gamma)?;
    ctrl.gamma_star = Some(gs.gamma_star);
    let grid = match h.horizon {
        Level::Auto => ctrl.grid(h.step)?,
        Level::Fixed(t) => run.grid(t),
    };

    let mut rng = stream(run.cfg.seed, 1);
    let u0 = hinf::smooth_initial(&ctx, 1.0, &mut rng);
    let w = hinf::smooth_disturbance(&grid, ctx.b2.ncols(), 1.0, &mut rng)?;
    let (_, attenuation) = hinf::robust_loop_linear(&ctrl, &u0, &w)?;
    let saddle = hinf::optimal_disturbance(&ctrl, &u0, &grid)?;

    // saddle loop with the selected feedback sign, in deviation coordinates
    let rhs = Rhs::linear(LinearPart::Dense(ctrl.loop_matrix(h.sign)));
    let (_, blow) = run_flushed(run, "hinf", &rhs, &ShellState::from_real(&u0))?;

    let result = json!({
        "summary": RobustSummary::from(&ctrl),
        "sign": h.sign,
        "horizon": grid[grid.len() - 1],
        "grid_points": grid.len(),
        "loop_margin_derived": ctrl.loop_margin(FeedbackSign::Derived)?,
        "loop_margin_flipped": ctrl.loop_margin(FeedbackSign::Flipped)?,
        "closed_loop_margin": ctrl.closed_loop_margin()?,
        "attenuation": attenuation,
        "saddle": { "cost": saddle.cost, "value": saddle.value },
        "blow_up": blow_up_json(blow),
    });
    let status = match (blow, h.sign) {
        (None, _) => "ok",
        (Some(_), FeedbackSign::Flipped) => "diverged",
        (Some(_), FeedbackSign::Derived) => "unstable",
    };
    run.sink.json("hinf", status, run.cfg.seed, &result)?;
    match (blow, h.sign) {
        (Some((t, _)), FeedbackSign::Derived) => {
            Err(CliError::Numerical(format!("robust loop unstable at t = {t}; partial record written")))
        }
        _ => Ok(()),
    }
}

pub fn gamma(run: &mut Run) -> Res<()> {
    let u_e = run.steady()?.u_e;
    let ctx = run.context(&u_e)?;
    let gs = hinf::gamma_star(&ctx, 1e-6)?;
    let grid = match run.cfg.hinf.horizon {
        Level::Auto => ctx.grid(run.cfg.hinf.step),
        Level::Fixed(t) => run.grid(t),
    };
    let g0 = hinf::gamma0_power_iteration(&ctx, &grid, 1e-6, run.cfg.seed, 500)?;
    let result = json!({
        "gamma_star": gs.gamma_star,
        "gamma_star_bracket": [gs.lower, gs.upper],
        "gamma0": g0.gamma0,
        "gamma0_iterations": g0.iterations,
        "gamma0_converged": g0.converged,
        "lqr_margin": ctx.margin,
        "horizon": grid[grid.len() - 1],
        "disturbance": ctx.has_disturbance(),
    });
    run.sink.json("gamma", "ok", run.cfg.seed, &result)?;
    Ok(())
}

pub fn verify(run: &mut Run, exec: Execution) -> Res<()> {
    let reports = verify::run_all(&run.scenario(exec));
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    let result = json!({ "checks": reports, "failed": failed });
    run.sink.json("verify", if failed == 0 { "ok" } else { "failed" }, run.cfg.seed, &result)?;
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{failed} of {} checks failed", reports.len())))
    }
}
