//! The five subcommands. Each computes everything first, then writes files
//! from the calling thread.

use std::path::PathBuf;
use std::time::Instant;

use serde_json::{json, Value};
use signtrack_core::experiment::{
    cumulative_average, deviation_sample, diffusion_check, mse_bound, mse_curve, mse_sweep, paired_deviation,
    run_replication, scaled_error,
};
use signtrack_core::limits::{effective_matrix, effective_matrix_monte_carlo, lyapunov_solve, EffectiveMatrixMethod};
use signtrack_core::regime::{marginal_distribution, mean_parameter, stationary_distribution};
use signtrack_core::{Algorithm, DVector, Error, GeneratorMatrix, RegimeKind, RegimeModel, Scenario};
use thiserror::Error;

use crate::config::{CommandKind, ConfigError, Format, RunConfig};
use crate::output::{json_document, matrix_json, num, vector_cells, vector_columns, vector_json, write_file, Csv, Provenance};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} self-test checks failed")]
    SelftestFailed { failed: usize, total: usize },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Core(e) if e.is_divergence() => 3,
            CommandError::Config(_) | CommandError::Core(_) => 2,
            CommandError::Io(_) => 1,
            CommandError::SelftestFailed { .. } => 4,
        }
    }
}

/// Command-line overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub reps: Option<usize>,
    pub threads: Option<usize>,
}

pub const DEFAULT_PRESET: &str = "e_eq_mu";

pub fn resolve_config(kind: CommandKind, opts: &Options) -> Result<RunConfig, ConfigError> {
    let mut cfg = match (&opts.config, &opts.preset) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::Field {
                field: "--config",
                message: "give either a config file or a preset, not both".into(),
            })
        }
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset(DEFAULT_PRESET)?,
    };
    if let Some(expected) = cfg.command {
        if expected != kind {
            return Err(ConfigError::Field {
                field: "command",
                message: format!("config is for `{expected:?}`, not `{kind:?}`").to_lowercase(),
            });
        }
    }
    if let Some(seed) = opts.seed {
        cfg.master_seed = seed;
    }
    if let Some(reps) = opts.reps {
        cfg.replications = reps;
        cfg.limits.deviation_reps = reps;
        cfg.limits.diffusion_reps = reps;
    }
    if let Some(out) = &opts.out {
        cfg.output.dir = Some(out.clone());
    }
    Ok(cfg)
}

/// Runs one subcommand and returns the files it wrote.
pub fn execute(kind: CommandKind, opts: &Options) -> Result<Vec<PathBuf>, CommandError> {
    let cfg = resolve_config(kind, opts)?;
    let run = || -> Result<Vec<PathBuf>, CommandError> {
        let started = Instant::now();
        let written = match kind {
            CommandKind::Track => track(&cfg),
            CommandKind::Mse => mse(&cfg),
            CommandKind::Limits => limits(&cfg),
            CommandKind::Cumavg => cumavg(&cfg),
            CommandKind::Selftest => selftest(&cfg),
        };
        // Timing goes to stderr only; files must not depend on it.
        eprintln!("{kind:?} finished in {:.2?}", started.elapsed());
        written
    };
    match opts.threads {
        Some(0) => Err(ConfigError::Field {
            field: "--threads",
            message: "must be at least 1".into(),
        }
        .into()),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| ConfigError::Field {
                field: "--threads",
                message: e.to_string(),
            })?
            .install(run),
        None => run(),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
    hash: String,
    dir: PathBuf,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, CommandError> {
        Ok(Self {
            scenario: cfg.scenario()?,
            hash: cfg.config_hash(),
            dir: cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            cfg,
        })
    }

    fn prov(&self, command: &'a str) -> Provenance<'_> {
        Provenance {
            command,
            config_hash: &self.hash,
            master_seed: self.cfg.master_seed,
        }
    }

    fn write(&self, written: &mut Vec<PathBuf>, format: Format, name: &str, text: String) -> std::io::Result<()> {
        if self.cfg.wants(format) {
            written.push(write_file(&self.dir, name, &text)?);
        }
        Ok(())
    }
}

pub fn track(cfg: &RunConfig) -> Result<Vec<PathBuf>, CommandError> {
    let ctx = Ctx::new(cfg)?;
    let s = &ctx.scenario;
    let r = s.regime.dim();
    let trajectories = run_replication(s, &cfg.algorithms, 0)?;
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend(vector_columns("alpha", r));
    header.extend(vector_columns("theta", r));
    header.push("y".into());
    let mut written = Vec::new();
    for traj in &trajectories {
        let name = traj.algorithm.short_name();
        let mut csv = Csv::new(
            &ctx.prov("track"),
            &[("algorithm", name.to_string()), ("mu", num(s.mu())), ("epsilon", num(s.epsilon()))],
            &header,
        );
        for n in 0..s.n_steps {
            let mut row = vec![n.to_string(), num(n as f64 * s.mu())];
            row.extend(vector_cells(s.regime.state(traj.chain.indices[n])));
            row.extend(vector_cells(&traj.thetas[n]));
            row.push(num(traj.observations[n]));
            csv.row(&row);
        }
        ctx.write(&mut written, Format::Csv, &format!("track_{name}.csv"), csv.finish())?;
    }
    Ok(written)
}

pub fn mse(cfg: &RunConfig) -> Result<Vec<PathBuf>, CommandError> {
    let ctx = Ctx::new(cfg)?;
    let s = &ctx.scenario;
    let curves = mse_curve(s, &cfg.algorithms, None)?;
    let burn_in = s.burn_in();
    let bound = mse_bound(s.mu(), s.epsilon());

    let mut header = vec!["n".to_string(), "t".to_string()];
    for c in &curves {
        header.push(format!("mse_{}", c.algorithm.short_name()));
        header.push(format!("stderr_{}", c.algorithm.short_name()));
    }
    let mut csv = Csv::new(
        &ctx.prov("mse"),
        &[
            ("replications", s.n_replications.to_string()),
            ("mu", num(s.mu())),
            ("epsilon", num(s.epsilon())),
        ],
        &header,
    );
    for n in 0..=s.n_steps {
        let mut row = vec![n.to_string(), num(n as f64 * s.mu())];
        for c in &curves {
            row.push(num(c.mean[n]));
            // Undefined for a single replication: left empty rather than 0.
            row.push(c.std_err.as_ref().map_or_else(String::new, |se| num(se[n])));
        }
        csv.row(&row);
    }

    let mut per_alg = Vec::new();
    for c in &curves {
        let steady = c.steady_state(burn_in)?;
        per_alg.push(json!({
            "algorithm": c.algorithm,
            "steady_state_mse": steady,
            "fitted_c": steady / bound,
            "plateau_gap": c.plateau_gap(burn_in).ok(),
            "std_err_available": c.std_err.is_some(),
        }));
    }
    let mut body = json!({
        "mu": s.mu(),
        "epsilon": s.epsilon(),
        "bound": bound,
        "n_steps": s.n_steps,
        "replications": s.n_replications,
        "burn_in": burn_in,
        "algorithms": per_alg,
    });

    let mut written = Vec::new();
    if !cfg.mse.mu_grid.is_empty() {
        let horizon = s.n_steps as f64 * s.mu();
        let steps_for = |mu: f64| (horizon / mu - 1e-9).ceil() as usize;
        let mut sweeps = Vec::new();
        for &alg in &cfg.algorithms {
            let mut sa = s.clone();
            sa.filter = sa.filter.with_algorithm(alg);
            sweeps.push(mse_sweep(&sa, &cfg.mse.mu_grid, steps_for, None)?);
        }
        let mut header = vec!["mu".to_string(), "epsilon".to_string(), "bound".to_string(), "n_steps".to_string()];
        header.extend(sweeps.iter().map(|sw| format!("steady_state_mse_{}", sw.algorithm.short_name())));
        let mut sweep_csv = Csv::new(&ctx.prov("mse"), &[("replications", s.n_replications.to_string())], &header);
        for (k, &mu) in cfg.mse.mu_grid.iter().enumerate() {
            let p = &sweeps[0].points[k];
            let mut row = vec![num(mu), num(p.epsilon), num(p.bound), steps_for(mu).to_string()];
            row.extend(sweeps.iter().map(|sw| num(sw.points[k].steady_state_mse)));
            sweep_csv.row(&row);
        }
        ctx.write(&mut written, Format::Csv, "mse_sweep.csv", sweep_csv.finish())?;
        body["sweep"] = serde_json::to_value(&sweeps).expect("sweep serializes");
    }
    ctx.write(&mut written, Format::Csv, "mse.csv", csv.finish())?;
    ctx.write(&mut written, Format::Json, "mse_summary.json", json_document(&ctx.prov("mse"), body))?;
    Ok(written)
}

pub fn limits(cfg: &RunConfig) -> Result<Vec<PathBuf>, CommandError> {
    let ctx = Ctx::new(cfg)?;
    let s = &ctx.scenario;
    let r = s.regime.dim();
    let sys = s.limit_system()?;
    let (equilibrium, field_at_equilibrium) = match sys.kind() {
        RegimeKind::Switched => {
            let eqs: Vec<Value> = s.regime.states().iter().map(vector_json).collect();
            (Value::Array(eqs), Value::Null)
        }
        RegimeKind::Slow | RegimeKind::Fast => {
            let eq = sys.equilibrium()?;
            let f = sys.field(0, &eq)?;
            (vector_json(&eq), vector_json(&f))
        }
    };

    let mut dev = s.clone();
    dev.n_replications = cfg.limits.deviation_reps;
    let (dt_ode, horizon) = (cfg.limits.dt_ode, cfg.limits.horizon);
    let pair = paired_deviation(&dev, dt_ode, horizon, None)?;
    let sample = deviation_sample(&dev, dt_ode, horizon, 0)?;

    let mut written = Vec::new();
    let mut csv = Csv::new(
        &ctx.prov("limits"),
        &[("mu", num(pair.coarse.mu)), ("mu_half", num(pair.fine.mu)), ("horizon", num(horizon))],
        &["replication".into(), "deviation_mu".into(), "deviation_mu_half".into()],
    );
    for (i, (c, f)) in pair.coarse.per_replication.iter().zip(&pair.fine.per_replication).enumerate() {
        csv.row(&[i.to_string(), num(*c), num(*f)]);
    }
    ctx.write(&mut written, Format::Csv, "deviation.csv", csv.finish())?;

    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend(vector_columns("alpha", r));
    header.extend(vector_columns("theta", r));
    header.extend(vector_columns("ode", r));
    let mut path_csv = Csv::new(&ctx.prov("limits"), &[("replication", "0".into())], &header);
    let traj = &sample.trajectory;
    for n in 0..traj.n_steps() {
        let mut row = vec![n.to_string(), num(n as f64 * traj.mu)];
        row.extend(vector_cells(s.regime.state(traj.chain.indices[n])));
        row.extend(vector_cells(&traj.thetas[n]));
        row.extend(vector_cells(&sample.ode[n]));
        path_csv.row(&row);
    }
    ctx.write(&mut written, Format::Csv, "ode_path.csv", path_csv.finish())?;

    let centering = s.coupling.centering();
    let diffusion = diffusion_check(s, centering, cfg.limits.diffusion_reps, None)?;
    let first = run_replication(s, &[s.filter.algorithm], 0)?.remove(0);
    let series = scaled_error(&first, &s.regime, centering, s.burn_in())?;
    let mut header = vec!["n".to_string(), "t".to_string()];
    header.extend(vector_columns("z", r));
    header.push("state".into());
    let mut z_csv = Csv::new(
        &ctx.prov("limits"),
        &[
            ("centering", serde_json::to_value(centering).unwrap().as_str().unwrap().to_string()),
            ("replication", "0".into()),
        ],
        &header,
    );
    for (k, (z, state)) in series.values.iter().zip(&series.states).enumerate() {
        let n = series.burn_in + k;
        let mut row = vec![n.to_string(), num(n as f64 * s.mu())];
        row.extend(vector_cells(z));
        row.push(state.to_string());
        z_csv.row(&row);
    }
    ctx.write(&mut written, Format::Csv, "scaled_error.csv", z_csv.finish())?;

    let per_regime: Vec<Value> = diffusion
        .per_regime
        .iter()
        .map(|p| {
            json!({
                "state": p.state,
                "samples": p.samples,
                "empirical_cov": p.empirical_cov.as_ref().map(matrix_json),
                "reference_cov": matrix_json(&p.reference_cov),
            })
        })
        .collect();
    let body = json!({
        "kind": sys.kind(),
        "mu": s.mu(),
        "epsilon": s.epsilon(),
        "equilibrium": equilibrium,
        "field_at_equilibrium": field_at_equilibrium,
        "deviation": {
            "horizon": horizon,
            "dt_ode": dt_ode,
            "replications": dev.n_replications,
            "mu": pair.coarse.mu,
            "mu_half": pair.fine.mu,
            "mean_deviation_mu": pair.coarse.mean,
            "mean_deviation_mu_half": pair.fine.mean,
            "fraction_reduced": pair.fraction_reduced,
        },
        "diffusion": {
            "centering": centering,
            "replications": cfg.limits.diffusion_reps,
            "samples": diffusion.samples,
            "burn_in": s.burn_in(),
            "drift_matrix": diffusion.drift_matrix.as_ref().map(matrix_json),
            "sigma_tilde": matrix_json(&diffusion.sigma_tilde),
            "empirical_cov": matrix_json(&diffusion.empirical_cov),
            "reference_cov": matrix_json(&diffusion.reference_cov),
            "rel_discrepancy": diffusion.rel_discrepancy,
            "per_regime": per_regime,
        },
    });
    ctx.write(&mut written, Format::Json, "limits.json", json_document(&ctx.prov("limits"), body))?;
    Ok(written)
}

pub fn cumavg(cfg: &RunConfig) -> Result<Vec<PathBuf>, CommandError> {
    let ctx = Ctx::new(cfg)?;
    let s = &ctx.scenario;
    let r = s.regime.dim();
    let n = s.n_steps;
    let trajectories = run_replication(s, &cfg.algorithms, 0)?;
    let alphas: Vec<DVector<f64>> = trajectories[0].chain.indices[..n]
        .iter()
        .map(|&i| s.regime.state(i).clone())
        .collect();
    let avg_alpha = cumulative_average(&alphas);
    let avg_theta: Vec<Vec<DVector<f64>>> =
        trajectories.iter().map(|t| cumulative_average(&t.thetas[..n])).collect();

    let mut header = vec!["n".to_string()];
    header.extend(vector_columns("cumavg_alpha", r));
    for t in &trajectories {
        header.extend(vector_columns(&format!("cumavg_theta_{}", t.algorithm.short_name()), r));
    }
    let mut csv = Csv::new(&ctx.prov("cumavg"), &[("mu", num(s.mu())), ("epsilon", num(s.epsilon()))], &header);
    for k in 0..n {
        let mut row = vec![k.to_string()];
        row.extend(vector_cells(&avg_alpha[k]));
        for a in &avg_theta {
            row.extend(vector_cells(&a[k]));
        }
        csv.row(&row);
    }
    let mut written = Vec::new();
    ctx.write(&mut written, Format::Csv, "cumavg.csv", csv.finish())?;
    Ok(written)
}

/// Law of `α_n` by summing over every path of length `n`.
pub fn enumerate_law(model: &RegimeModel, n: usize) -> Vec<f64> {
    let m = model.num_states();
    let p = model.transition_matrix();
    let p0 = model.initial_dist();
    let mut law = vec![0.0; m];
    let mut path = vec![0usize; n + 1];
    for code in 0..m.pow(n as u32 + 1) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let mut prob = p0[path[0]];
        for k in 0..n {
            prob *= p[(path[k], path[k + 1])];
        }
        law[path[n]] += prob;
    }
    law
}

#[derive(Clone, Copy)]
enum Rule {
    Absolute,
    Relative,
    /// `value <= reference`.
    AtMost,
}

struct Check {
    name: &'static str,
    value: f64,
    reference: f64,
    tolerance: f64,
    rule: Rule,
}

impl Check {
    fn passed(&self) -> bool {
        let err = (self.value - self.reference).abs();
        match self.rule {
            Rule::Absolute => err <= self.tolerance,
            Rule::Relative => err <= self.tolerance * self.reference.abs(),
            Rule::AtMost => self.value <= self.reference,
        }
    }

    fn rule_name(&self) -> &'static str {
        match self.rule {
            Rule::Absolute => "absolute",
            Rule::Relative => "relative",
            Rule::AtMost => "at_most",
        }
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Quick consistency checks on the three-state scalar setup; the MSE check
/// uses the configured seed.
pub fn selftest(cfg: &RunConfig) -> Result<Vec<PathBuf>, CommandError> {
    let ctx = Ctx::new(cfg)?;
    let base = RunConfig::preset("e_eq_mu")?;
    let mut checks = Vec::new();

    let gen = GeneratorMatrix::from_rows(&base.regime.generator)?;
    let nu = stationary_distribution(&gen)?;
    checks.push(Check {
        name: "stationary_distribution",
        value: max_gap(nu.as_slice(), &[1.0 / 3.0; 3]),
        reference: 0.0,
        tolerance: 1e-10,
        rule: Rule::Absolute,
    });

    let base_scenario = base.scenario()?;
    let states = base_scenario.regime.states();
    checks.push(Check {
        name: "initial_mean",
        value: mean_parameter(states, base_scenario.regime.initial_dist())[0],
        reference: -0.625,
        tolerance: 0.0,
        rule: Rule::Absolute,
    });
    checks.push(Check {
        name: "stationary_mean",
        value: mean_parameter(states, &DVector::from_element(3, 1.0 / 3.0))[0],
        reference: 0.0,
        tolerance: 0.0,
        rule: Rule::Absolute,
    });

    let closed = effective_matrix(&base_scenario.signal, EffectiveMatrixMethod::ClosedFormGaussian)?;
    let mc = effective_matrix_monte_carlo(&base_scenario.signal, 2_000_000, 0.01, cfg.master_seed)?;
    checks.push(Check {
        name: "effective_matrix_monte_carlo",
        value: mc.matrix[(0, 0)],
        reference: closed[(0, 0)],
        tolerance: 0.03,
        rule: Rule::Relative,
    });

    for (preset, name, reference) in [("e_ll_mu", "slow_equilibrium", -0.625), ("e_gg_mu", "fast_equilibrium", 0.0)] {
        let sys = RunConfig::preset(preset)?.scenario()?.limit_system()?;
        let eq = sys.equilibrium()?;
        checks.push(Check {
            name,
            value: eq[0],
            reference,
            tolerance: 1e-12,
            rule: Rule::Absolute,
        });
        checks.push(Check {
            name: if reference == 0.0 { "fast_field_at_equilibrium" } else { "slow_field_at_equilibrium" },
            value: sys.field(0, &DVector::from_element(1, reference))?[0],
            reference: 0.0,
            tolerance: 1e-12,
            rule: Rule::Absolute,
        });
    }

    let two = RegimeModel::new(
        vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)],
        GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![3.0, -3.0]])?,
        0.1,
        DVector::from_row_slice(&[0.9, 0.1]),
    )?;
    let worst = (0..=12)
        .map(|n| max_gap(&enumerate_law(&two, n), marginal_distribution(&two, n).as_slice()))
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "enumeration_oracle",
        value: worst,
        reference: 0.0,
        tolerance: 1e-12,
        rule: Rule::Absolute,
    });

    let a = closed[(0, 0)];
    let lyap = lyapunov_solve(&closed, &base_scenario.noise_covariance()?)?;
    checks.push(Check {
        name: "lyapunov_scalar",
        value: lyap[(0, 0)],
        reference: 1.0 / (2.0 * a),
        tolerance: 1e-12,
        rule: Rule::Relative,
    });

    let mut quick = base_scenario.clone();
    quick.master_seed = cfg.master_seed;
    quick.n_replications = 50;
    let curve = mse_curve(&quick, &[Algorithm::SignError], None)?.remove(0);
    let steady = curve.steady_state(quick.burn_in())?;
    let bound = mse_bound(quick.mu(), quick.epsilon());
    checks.push(Check {
        name: "tracking_mse_within_five_bounds",
        value: steady,
        reference: 5.0 * bound,
        tolerance: 0.0,
        rule: Rule::AtMost,
    });

    let failed = checks.iter().filter(|c| !c.passed()).count();
    let mut csv = Csv::new(
        &ctx.prov("selftest"),
        &[],
        &["check", "value", "reference", "tolerance", "rule", "pass"].map(String::from),
    );
    for c in &checks {
        csv.row(&[
            c.name.to_string(),
            num(c.value),
            num(c.reference),
            num(c.tolerance),
            c.rule_name().to_string(),
            c.passed().to_string(),
        ]);
    }
    let rows: Vec<Value> = checks
        .iter()
        .map(|c| {
            json!({
                "check": c.name,
                "value": c.value,
                "reference": c.reference,
                "tolerance": c.tolerance,
                "rule": c.rule_name(),
                "pass": c.passed(),
            })
        })
        .collect();
    let body = json!({ "checks": rows, "failed": failed });
    let mut written = Vec::new();
    ctx.write(&mut written, Format::Csv, "selftest.csv", csv.finish())?;
    ctx.write(&mut written, Format::Json, "selftest.json", json_document(&ctx.prov("selftest"), body))?;
    for c in &checks {
        eprintln!("{} {}", if c.passed() { "PASS" } else { "FAIL" }, c.name);
    }
    if failed > 0 {
        return Err(CommandError::SelftestFailed {
            failed,
            total: checks.len(),
        });
    }
    Ok(written)
}
