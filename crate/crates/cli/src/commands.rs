//! The six commands. Each returns its checks; `execute` writes the artifacts
//! and `summary.json`.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use translab::chains::{
    breiman_average, breiman_rate, empirical_stationarity, step_phi, support_probe, Ball,
    ChainState,
};
use translab::coupling::{coupling_cost_series, fit_polynomial_decay, CostWeight, DecayFit};
use translab::error::LabError;
use translab::limits::{
    center_observable, correlation_series, default_t_grid, fclt_test, simulate_fclt_paths,
    solve_poisson, variance_estimate, PoissonConfig,
};
use translab::observable::Observable;
use translab::oracle::{oracle_grid, CylinderSpace, OracleSystem};
use translab::potential::{ModulusOfContinuity, Potential};
use translab::rng::{derive_seed, substream};
use translab::space::{Alphabet, AprioriMeasure, Config};
use translab::stats::ks_statistic;
use translab::systems::{IfsMap, IfsSystem, IndexWitness, WeightedShiftSystem, WitnessOutcome};
use translab::transfer::{normalize, KernelSpec, NormalizedSystem};

use crate::config::{FinitePotential, ModelConfig, NormalizeMethod, RunConfig, EXACT_MAX_STATES};
use crate::output::{num, Artifacts};
use crate::Command;

#[derive(Debug)]
pub enum CliError {
    /// Invalid or incomplete configuration.
    Config(String),
    Io(String),
    /// A computation violated its own preconditions or gave up.
    Run(LabError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Run(e)
    }
}

/// One acceptance check; `value` is NaN when the quantity could not be formed.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {limit}"),
            passed: value <= limit,
        }
    }

    fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("in [{lo}, {hi}]"),
            passed: value >= lo && value <= hi,
        }
    }

    fn holds(name: impl Into<String>, value: f64, passed: bool, bound: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            bound: bound.into(),
            passed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub schema: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub verdict: String,
    pub checks: Vec<Check>,
    /// Every file written by the run, `summary.json` last.
    pub artifacts: Vec<String>,
}

impl Summary {
    pub fn accepted(&self) -> bool {
        self.verdict == "accept"
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    hash: &'a str,
    out: Artifacts,
}

impl Ctx<'_> {
    fn sub(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }

    fn json<T: Serialize>(&mut self, name: &str, kind: &str, data: &T) -> Result<(), CliError> {
        self.out.json(name, kind, self.hash, self.seed, data)
    }
}

/// Runs `command` and writes its artifacts and `summary.json` into `out`.
pub fn execute(
    command: Command,
    cfg: &RunConfig,
    seed: u64,
    config_hash: &str,
    out: &Path,
) -> Result<Summary, CliError> {
    let mut ctx = Ctx {
        cfg,
        seed,
        hash: config_hash,
        out: Artifacts::new(out)?,
    };
    let result = match command {
        Command::Normalize => cmd_normalize(&mut ctx),
        Command::Decay => cmd_decay(&mut ctx),
        Command::Fclt => cmd_fclt(&mut ctx),
        Command::Breiman => cmd_breiman(&mut ctx),
        Command::Support => cmd_support(&mut ctx),
        Command::OracleCheck => cmd_oracle_check(&mut ctx),
    };
    let checks = match result {
        Ok(c) => c,
        // A refused hypothesis is a verdict, not a usage error.
        Err(CliError::Run(LabError::Refused(m))) => vec![Check::holds(
            format!("refused: {m}"),
            f64::NAN,
            false,
            "hypothesis holds",
        )],
        Err(e) => return Err(e),
    };
    let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
    let mut artifacts = ctx.out.files().to_vec();
    artifacts.push("summary.json".into());
    let summary = Summary {
        schema: "translab.summary/1".into(),
        command: command.name().into(),
        config_hash: config_hash.into(),
        seed,
        verdict: if passed { "accept" } else { "fail" }.into(),
        checks,
        artifacts,
    };
    ctx.out.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn model(cfg: &RunConfig) -> Result<&ModelConfig, CliError> {
    cfg.model
        .as_ref()
        .ok_or_else(|| CliError::Config("missing key `model`".into()))
}

fn shift_model(cfg: &RunConfig) -> Result<(KernelSpec, Potential), CliError> {
    match model(cfg)? {
        ModelConfig::FullShiftFinite {
            points,
            weights,
            potential,
        } => {
            let measure = match weights {
                Some(w) => AprioriMeasure::finite(points.clone(), w.clone())?,
                None => AprioriMeasure::uniform_finite(points.clone())?,
            };
            let f = match potential {
                FinitePotential::Constant { value } => Potential::Constant(*value),
                FinitePotential::Linear { beta } => {
                    let b = *beta;
                    Potential::finite_range(points.clone(), 1, move |w| b * w[0])?
                }
                FinitePotential::Pair { coupling } => {
                    let j = *coupling;
                    Potential::finite_range(points.clone(), 2, move |w| j * w[0] * w[1])?
                }
                FinitePotential::Table { range, values } => {
                    let size = points.len().checked_pow(*range as u32);
                    if *range == 0 || size != Some(values.len()) {
                        return Err(CliError::Config(format!(
                            "model.potential.values needs {}^{range} entries, got {}",
                            points.len(),
                            values.len()
                        )));
                    }
                    Potential::FiniteRange {
                        points: points.clone(),
                        range: *range,
                        table: values.clone(),
                    }
                }
            };
            Ok((KernelSpec::FullShift(measure), f))
        }
        ModelConfig::DysonSphere { eps, ambient } => Ok((
            KernelSpec::FullShift(AprioriMeasure::sphere(*ambient)?),
            Potential::dyson_sphere(*eps, *ambient)?,
        )),
        ModelConfig::DysonHalfline { eps } => Ok((
            KernelSpec::FullShift(AprioriMeasure::exponential()),
            Potential::dyson_half_line(*eps)?,
        )),
        _ => Err(CliError::Config(
            "this command needs a full-shift model (full-shift-finite, dyson-sphere, dyson-halfline)".into(),
        )),
    }
}

fn build_system(ctx: &Ctx<'_>) -> Result<NormalizedSystem, CliError> {
    let (kernel, f) = shift_model(ctx.cfg)?;
    let section = &ctx.cfg.normalize;
    let nc = section.to_config(ctx.sub("normalize"), ctx.cfg.depth);
    if section.method != NormalizeMethod::Estimated {
        if let Some(space) = exact_space(ctx.cfg, &f)? {
            let oracle = OracleSystem::new(&space, &f)?;
            return Ok(oracle.normalized_system(ctx.cfg.depth, &nc)?);
        }
        if section.method == NormalizeMethod::Exact {
            return Err(CliError::Config(format!(
                "normalize.method = \"exact\" needs a finite-range potential on at most {EXACT_MAX_STATES} cylinders"
            )));
        }
    }
    Ok(normalize(&kernel, &f, &nc)?)
}

/// Cylinder space carrying an exact transfer matrix for `f`, when small enough.
fn exact_space(cfg: &RunConfig, f: &Potential) -> Result<Option<CylinderSpace>, CliError> {
    let Some(ModelConfig::FullShiftFinite {
        points, weights, ..
    }) = &cfg.model
    else {
        return Ok(None);
    };
    let Some(range) = f.locality() else {
        return Ok(None);
    };
    let k = range.max(1);
    let fits = points
        .len()
        .checked_pow(k as u32)
        .is_some_and(|n| n <= EXACT_MAX_STATES);
    if !fits || cfg.depth < k + 1 {
        return Ok(None);
    }
    let w = weights
        .clone()
        .unwrap_or_else(|| vec![1.0 / points.len() as f64; points.len()]);
    Ok(Some(CylinderSpace::new(points.clone(), w, k)?))
}

/// First component of `x_n`, squashed into `[0, 1)` on the half-line.
fn coordinate(kernel: &KernelSpec, n: usize) -> Observable {
    let dim = kernel.point_dim();
    let at = (n - 1) * dim;
    match kernel {
        KernelSpec::FullShift(m) => match m.alphabet() {
            Alphabet::Finite(points) => {
                let bound = points.iter().fold(0.0f64, |a, p| a.max(p.abs()));
                Observable::coordinate(n, 0, dim, bound)
            }
            Alphabet::HalfLine => {
                Observable::new(format!("x_{n}/(1+x_{n})"), 1.0, Some(n), move |x| {
                    x[at] / (1.0 + x[at])
                })
            }
            _ => Observable::coordinate(n, 0, dim, 1.0),
        },
        _ => Observable::coordinate(n, 0, dim, 1.0),
    }
}

/// `tanh(x_1)`, `tanh(x_1)·tanh(x_2)` and `cos(x_1 + 2x_3)` on first components.
fn breiman_functions(kernel: &KernelSpec) -> Vec<Observable> {
    let dim = kernel.point_dim();
    vec![
        Observable::new("tanh(x_1)", 1.0, Some(1), |x| x[0].tanh()),
        Observable::new("tanh(x_1)tanh(x_2)", 1.0, Some(2), move |x| {
            x[0].tanh() * x[dim].tanh()
        }),
        Observable::new("cos(x_1+2x_3)", 1.0, Some(3), move |x| {
            (x[0] + 2.0 * x[2 * dim]).cos()
        }),
    ]
}

fn fit_check(name: &str, fit: &Result<DecayFit, LabError>, threshold: f64) -> Check {
    match fit {
        Ok(f) => Check::at_most(name, f.exponent, threshold),
        Err(e) => Check::holds(name, f64::NAN, false, format!("<= {threshold} ({e})")),
    }
}

#[derive(Serialize)]
struct NormalizeReport<'a> {
    lambda: f64,
    depth: usize,
    accepted: bool,
    flatness: Option<f64>,
    spectral: Option<&'a translab::transfer::SpectralEstimate>,
    diagnostics: &'a translab::transfer::NormalizationDiagnostics,
}

fn cmd_normalize(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    let sys = build_system(ctx)?;
    let d = sys.diagnostics();
    let id = &ctx.hash[..16];
    let rows: Vec<Vec<String>> = (0..d.probe_values.len())
        .map(|i| {
            vec![
                id.to_string(),
                i.to_string(),
                num(d.probe_values[i]),
                num(d.probe_std_errors[i]),
                num(d.probe_h.get(i).copied().unwrap_or(f64::NAN)),
                num(d.probe_drift.get(i).copied().unwrap_or(f64::NAN)),
            ]
        })
        .collect();
    ctx.out.csv(
        "probes.csv",
        &[
            "config_id",
            "probe",
            "l_one",
            "std_error",
            "h",
            "f_bar_drift",
        ],
        &rows,
    )?;
    let report = NormalizeReport {
        lambda: sys.lambda(),
        depth: sys.depth(),
        accepted: sys.accepted(),
        flatness: sys.flatness(),
        spectral: sys.spectral(),
        diagnostics: d,
    };
    ctx.json("normalize.json", "normalize", &report)?;
    Ok(vec![Check::holds(
        "sup |L_fbar 1 - 1|",
        d.sup_deviation,
        d.accepted,
        format!("<= {}", d.tolerance),
    )])
}

#[derive(Serialize)]
struct DecayReport<'a> {
    omega_eps: f64,
    samples: usize,
    centering_mean: f64,
    centering_std_error: f64,
    cost_fit: Option<&'a DecayFit>,
    cost_fit_error: Option<String>,
    correlation_fit: Option<&'a DecayFit>,
    correlation_fit_error: Option<String>,
    threshold: f64,
}

fn cmd_decay(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    let sys = build_system(ctx)?;
    let d = ctx.cfg.decay.clone();
    let kernel = sys.kernel().clone();
    let mut rng = substream(ctx.seed, "decay-pair");
    let x = kernel.random_state(d.depth, &mut rng);
    let y = kernel.random_state(d.depth, &mut rng);
    let omega = ModulusOfContinuity::log_config(d.omega_eps)?;
    let ns: Vec<usize> = (2..=d.n_max).collect();
    let cost = coupling_cost_series(
        &kernel,
        CostWeight::Normalized(&sys),
        &omega,
        &x,
        &y,
        &ns,
        d.samples,
        ctx.sub("decay-cost"),
    )?;
    let cost_fit = fit_polynomial_decay(&cost.iter().map(|p| (p.n, p.value)).collect::<Vec<_>>());

    let phi = coordinate(&kernel, 1);
    let centered = center_observable(
        &sys,
        &phi,
        d.center_steps,
        d.burn_in,
        ctx.sub("decay-center"),
    )?;
    let cs = correlation_series(
        &sys,
        &centered.observable,
        d.correlation_n_max,
        d.correlation_steps,
        d.burn_in,
        ctx.sub("decay-correlation"),
    )?;
    let corr_fit = cs.decay_fit(d.significance);
    let kept: Vec<usize> = cs.significant(d.significance).iter().map(|p| p.0).collect();

    let rows: Vec<Vec<String>> = cost
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                num(p.value),
                num(p.std_error),
                num(p.mean_distance),
            ]
        })
        .collect();
    ctx.out.csv(
        "decay.csv",
        &["n", "cost", "stderr", "mean_distance"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = cs
        .points
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                num(p.value),
                num(p.std_error),
                kept.contains(&p.n).to_string(),
            ]
        })
        .collect();
    ctx.out.csv(
        "correlations.csv",
        &["n", "value", "stderr", "fitted"],
        &rows,
    )?;
    let report = DecayReport {
        omega_eps: d.omega_eps,
        samples: d.samples,
        centering_mean: centered.mean,
        centering_std_error: centered.std_error,
        cost_fit: cost_fit.as_ref().ok(),
        cost_fit_error: cost_fit.as_ref().err().map(|e| e.to_string()),
        correlation_fit: corr_fit.as_ref().ok(),
        correlation_fit_error: corr_fit.as_ref().err().map(|e| e.to_string()),
        threshold: d.threshold,
    };
    ctx.json("fit.json", "decay", &report)?;
    Ok(vec![
        fit_check("coupling cost exponent", &cost_fit, d.threshold),
        fit_check("correlation exponent", &corr_fit, d.threshold),
    ])
}

#[derive(Serialize)]
struct FcltJson<'a> {
    centering_mean: f64,
    centering_std_error: f64,
    correlation_fit: Option<&'a DecayFit>,
    poisson_terms: usize,
    poisson_exact_terms: usize,
    poisson_residual_bound: f64,
    poisson_probes: &'a [translab::limits::ResidualProbe],
    variance: &'a translab::limits::VarianceReport,
    report: Option<&'a translab::limits::FcltReport>,
}

fn cmd_fclt(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    let sys = build_system(ctx)?;
    let f = ctx.cfg.fclt.clone();
    let phi = coordinate(sys.kernel(), 1);
    let centered = center_observable(
        &sys,
        &phi,
        f.center_steps,
        f.burn_in,
        ctx.sub("fclt-center"),
    )?;
    let cs = correlation_series(
        &sys,
        &centered.observable,
        f.correlation_n_max,
        f.correlation_steps,
        f.burn_in,
        ctx.sub("fclt-correlation"),
    )?;
    let fit = match (cs.decay_fit(f.significance), f.poisson_terms) {
        (Ok(fit), _) => Some(fit),
        (Err(_), Some(_)) => None,
        (Err(e), None) => return Err(e.into()),
    };
    let pc = PoissonConfig {
        chains: f.poisson_chains,
        probes: f.poisson_probes,
        burn_in: f.burn_in,
        center_std_error: centered.std_error,
        seed: ctx.sub("fclt-poisson"),
        ..PoissonConfig::default()
    };
    let sol = solve_poisson(
        &sys,
        &centered.observable,
        fit.as_ref(),
        f.poisson_terms,
        &pc,
    )?;
    let var = variance_estimate(
        &sol,
        f.variance_states,
        f.gk_steps,
        f.burn_in,
        ctx.sub("fclt-variance"),
    )?;
    let mut checks = vec![
        Check::holds(
            "poisson residual probes",
            sol.probes.iter().filter(|p| p.ok).count() as f64,
            sol.accepted(),
            format!("= {}", sol.probes.len()),
        ),
        Check::holds("sigma2 > 0", var.sigma2, var.accepted, "> 0"),
    ];
    let report = if var.accepted {
        let paths = simulate_fclt_paths(
            &sys,
            &centered.observable,
            var.sigma2.sqrt(),
            f.n,
            f.replicates,
            &default_t_grid(),
            f.burn_in,
            ctx.sub("fclt-paths"),
        )?;
        let report = fclt_test(&paths, Some(var.sigma2_gk))?;
        let mut header = vec!["replicate".to_string()];
        header.extend(paths.t_grid.iter().map(|t| format!("y_{t}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = paths
            .values
            .iter()
            .enumerate()
            .map(|(r, v)| {
                std::iter::once(r.to_string())
                    .chain(v.iter().map(|y| num(*y)))
                    .collect()
            })
            .collect();
        ctx.out.csv("endpoints.csv", &header, &rows)?;
        for (t, ks) in &report.ks {
            checks.push(Check::at_most(
                format!("ks t={t}"),
                *ks,
                report.ks_threshold,
            ));
        }
        checks.push(Check::at_most(
            "variance linearity",
            report.linearity,
            report.linearity_threshold,
        ));
        checks.push(Check::at_most(
            "|increment correlation|",
            report.increment_correlation.abs(),
            report.correlation_band,
        ));
        Some(report)
    } else {
        None
    };
    let doc = FcltJson {
        centering_mean: centered.mean,
        centering_std_error: centered.std_error,
        correlation_fit: fit.as_ref(),
        poisson_terms: sol.terms,
        poisson_exact_terms: sol.exact_terms,
        poisson_residual_bound: sol.residual_bound,
        poisson_probes: &sol.probes,
        variance: &var,
        report: report.as_ref(),
    };
    ctx.json("fclt.json", "fclt", &doc)?;
    Ok(checks)
}

#[derive(Serialize)]
struct BreimanJson {
    functions: Vec<BreimanFunction>,
    stationarity: translab::chains::StationarityReport,
}

#[derive(Serialize)]
struct BreimanFunction {
    name: String,
    last: f64,
    tolerance: f64,
    max_transfer_se: f64,
    slope: f64,
    slope_se: f64,
}

/// About `count` log-spaced indices in `1..=n`, always including `n`.
fn checkpoints(n: usize, count: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..count.max(2))
        .map(|i| {
            let t = i as f64 / (count.max(2) - 1) as f64;
            ((n as f64).powf(t).round() as usize).clamp(1, n)
        })
        .collect();
    v.dedup();
    v
}

fn cmd_breiman(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    let sys = build_system(ctx)?;
    let b = ctx.cfg.breiman.clone();
    let funcs = breiman_functions(sys.kernel());
    let marks = checkpoints(b.n, b.checkpoints);
    let mut conv = Vec::new();
    let mut rate_rows = Vec::new();
    let mut summary = Vec::new();
    let mut checks = Vec::new();
    for (i, phi) in funcs.iter().enumerate() {
        let path = breiman_average(
            &sys,
            phi,
            b.n,
            b.letters,
            b.burn_in,
            derive_seed(ctx.seed, "breiman-path", i as u64),
        )?;
        for &m in &marks {
            conv.push(vec![
                phi.name().to_string(),
                m.to_string(),
                num(path.averages[m - 1]),
            ]);
        }
        let rate = breiman_rate(
            &sys,
            phi,
            &b.rate_ns,
            b.rate_seeds,
            b.letters,
            b.burn_in,
            derive_seed(ctx.seed, "breiman-rate", i as u64),
        )?;
        for (n, v) in rate.ns.iter().zip(&rate.variances) {
            rate_rows.push(vec![phi.name().to_string(), n.to_string(), num(*v)]);
        }
        checks.push(Check::at_most(
            format!("|A_n| {}", phi.name()),
            path.last().abs(),
            b.tolerance,
        ));
        checks.push(Check::within(
            format!("log-variance slope {}", phi.name()),
            rate.fit.slope,
            b.slope_band[0],
            b.slope_band[1],
        ));
        summary.push(BreimanFunction {
            name: phi.name().to_string(),
            last: path.last(),
            tolerance: path.tolerance,
            max_transfer_se: path.max_transfer_se,
            slope: rate.fit.slope,
            slope_se: rate.fit.slope_se,
        });
    }
    let stat = empirical_stationarity(
        &sys,
        &funcs,
        b.stationarity_n,
        b.letters,
        b.burn_in,
        ctx.sub("breiman-stationarity"),
    )?;
    checks.push(Check::holds(
        "stationarity discrepancies",
        stat.entries
            .iter()
            .map(|e| e.discrepancy)
            .fold(0.0, f64::max),
        stat.accepted,
        "<= per-function tolerance",
    ));
    ctx.out
        .csv("convergence.csv", &["function", "n", "average"], &conv)?;
    ctx.out
        .csv("rate.csv", &["function", "n", "variance"], &rate_rows)?;
    let rows: Vec<Vec<String>> = stat
        .entries
        .iter()
        .map(|e| {
            vec![
                e.name.clone(),
                stat.n.to_string(),
                num(e.nu_p_phi),
                num(e.nu_phi),
                num(e.discrepancy),
                num(e.tolerance),
            ]
        })
        .collect();
    ctx.out.csv(
        "stationarity.csv",
        &[
            "function",
            "n",
            "nu_p_phi",
            "nu_phi",
            "discrepancy",
            "tolerance",
        ],
        &rows,
    )?;
    ctx.json(
        "breiman.json",
        "breiman",
        &BreimanJson {
            functions: summary,
            stationarity: stat,
        },
    )?;
    Ok(checks)
}

fn cmd_support(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    match model(ctx.cfg)? {
        ModelConfig::WeightedShift {
            constant,
            weights,
            dim,
            p,
            c_lo,
            c_hi,
        } => {
            let sys =
                match (constant, weights) {
                    (Some(a), None) => {
                        let dim =
                            dim.ok_or_else(|| CliError::Config("missing key `model.dim`".into()))?;
                        WeightedShiftSystem::constant(*a, dim, *p)?
                    }
                    (None, Some(w)) => {
                        let lo = c_lo
                            .ok_or_else(|| CliError::Config("missing key `model.c_lo`".into()))?;
                        let hi = c_hi
                            .ok_or_else(|| CliError::Config("missing key `model.c_hi`".into()))?;
                        WeightedShiftSystem::new(w.clone(), lo, hi, *p)?
                    }
                    _ => return Err(CliError::Config(
                        "weighted-shift needs exactly one of `model.constant` and `model.weights`"
                            .into(),
                    )),
                };
            support_weighted(ctx, sys, *constant)
        }
        ModelConfig::Ifs { maps } => {
            let sys = match maps {
                None => IfsSystem::dyadic(),
                Some(m) => {
                    let k = m.len();
                    let maps = m.iter().map(|[s, o]| IfsMap::affine(*s, *o)).collect();
                    IfsSystem::new(maps, move |_| vec![1.0 / k as f64; k], vec![0.0], vec![1.0])?
                }
            };
            support_ifs(ctx, sys)
        }
        _ => Err(CliError::Config(
            "support needs a weighted-shift or ifs model".into(),
        )),
    }
}

#[derive(Serialize)]
struct WeightedSupportJson<'a> {
    summability: &'a translab::systems::SummabilityReport,
    geometric_limit: Option<f64>,
    balls: &'a [Ball],
    witness: &'a WitnessOutcome,
}

fn support_weighted(
    ctx: &mut Ctx<'_>,
    sys: WeightedShiftSystem,
    constant: Option<f64>,
) -> Result<Vec<Check>, CliError> {
    let s = ctx.cfg.support.clone();
    let d = sys.dim();
    let kernel = KernelSpec::WeightedShift(sys.clone());
    let big_n = s.summability_n.min(d);
    let summ = sys.summability_check(1.0, big_n)?;
    let mut checks = vec![Check::holds(
        "summability ratio",
        summ.ratio_estimate,
        summ.summable,
        "< 1",
    )];
    // Constant weights `a` give Σ a^{-n} = 1/(a−1) with tail a^{-N}/(a−1).
    let limit = constant.map(|a| 1.0 / (a - 1.0));
    if let (Some(a), Some(l)) = (constant, limit) {
        let gap = (summ.partial_sums[big_n - 1] - l).abs();
        checks.push(Check::at_most(
            "partial sum gap",
            gap,
            a.powi(-(big_n as i32)) / (a - 1.0) * (1.0 + 1e-9),
        ));
    }

    let zero = || Config::new(&Alphabet::RealLine, vec![0.0; d]);
    let mut centers = ChainState::new(zero()?, ctx.sub("support-centers"), 0);
    for _ in 0..s.burn_in {
        step_phi(&kernel, &mut centers)?;
    }
    let mut balls = Vec::with_capacity(s.balls);
    for _ in 0..s.balls {
        for _ in 0..97 {
            step_phi(&kernel, &mut centers)?;
        }
        balls.push(Ball {
            center: centers.current().coords().to_vec(),
            radius: s.radius,
        });
    }
    let mut rows = Vec::new();
    let mut all = 0usize;
    for k in 0..s.seeds {
        let mut state =
            ChainState::new(zero()?, derive_seed(ctx.seed, "support-probe", k as u64), 0);
        let rep = support_probe(
            &mut state,
            |st| step_phi(&kernel, st),
            &balls,
            |a, b| sys.lp_distance(a, b),
            s.steps,
        )?;
        all += usize::from(rep.all_hit);
        for (i, h) in rep.hits.iter().enumerate() {
            let first = rep.first_hit[i].map(|t| t.to_string()).unwrap_or_default();
            rows.push(vec![k.to_string(), i.to_string(), h.to_string(), first]);
        }
    }
    checks.push(Check::holds(
        "seeds hitting every ball",
        all as f64,
        all == s.seeds,
        format!("= {}", s.seeds),
    ));
    let mut x = vec![0.0; d];
    x[0] = 1.0;
    let witness =
        sys.strong_transitivity_witness(&x, &vec![0.0; d], s.witness_radius, s.witness_n_max)?;
    let n = match &witness {
        WitnessOutcome::Found { n, .. } => *n as f64,
        WitnessOutcome::Failed { .. } => f64::NAN,
    };
    checks.push(Check::holds(
        "transitivity witness n",
        n,
        n.is_finite(),
        format!("<= {}", s.witness_n_max),
    ));
    ctx.out
        .csv("hits.csv", &["seed", "ball", "hits", "first_hit"], &rows)?;
    ctx.json(
        "witness.json",
        "support",
        &WeightedSupportJson {
            summability: &summ,
            geometric_limit: limit,
            balls: &balls,
            witness: &witness,
        },
    )?;
    Ok(checks)
}

#[derive(Serialize)]
struct IfsSupportJson<'a> {
    steps: usize,
    ks_uniform: f64,
    center: f64,
    radius: f64,
    witness: &'a IndexWitness,
}

fn support_ifs(ctx: &mut Ctx<'_>, sys: IfsSystem) -> Result<Vec<Check>, CliError> {
    let s = ctx.cfg.support.clone();
    if sys.dim() != 1 {
        return Err(CliError::Config(
            "support on an IFS needs a one-dimensional domain".into(),
        ));
    }
    let kernel = KernelSpec::Ifs(sys.clone());
    let start = Config::new(&Alphabet::RealLine, vec![s.ifs_start])?;
    let mut state = ChainState::new(start, ctx.sub("support-ifs"), 0);
    for _ in 0..s.burn_in {
        step_phi(&kernel, &mut state)?;
    }
    let mut sample = Vec::with_capacity(s.steps);
    for _ in 0..s.steps {
        step_phi(&kernel, &mut state)?;
        sample.push(state.current().coords()[0]);
    }
    let (lo, hi) = sys.domain();
    let (lo, hi) = (lo[0], hi[0]);
    let ks = ks_statistic(&sample, |v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
    let bins = s.histogram_bins.max(1);
    let mut counts = vec![0usize; bins];
    for v in &sample {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let w = (hi - lo) / bins as f64;
            vec![
                i.to_string(),
                num(lo + w * i as f64),
                num(lo + w * (i + 1) as f64),
                c.to_string(),
            ]
        })
        .collect();
    let witness =
        sys.irreducibility_witness(&[s.ifs_start], &[s.ifs_center], s.ifs_radius, s.ifs_k_max);
    let len = match &witness {
        IndexWitness::Found { index, .. } => index.len() as f64,
        IndexWitness::Failed { .. } => f64::NAN,
    };
    ctx.out
        .csv("hits.csv", &["bin", "lo", "hi", "count"], &rows)?;
    ctx.json(
        "witness.json",
        "support",
        &IfsSupportJson {
            steps: s.steps,
            ks_uniform: ks,
            center: s.ifs_center,
            radius: s.ifs_radius,
            witness: &witness,
        },
    )?;
    Ok(vec![
        Check::at_most("ks vs uniform", ks, s.ks_threshold),
        Check::holds(
            "irreducibility witness |J|",
            len,
            len.is_finite(),
            format!("<= {}", s.ifs_k_max),
        ),
    ])
}

fn cmd_oracle_check(ctx: &mut Ctx<'_>) -> Result<Vec<Check>, CliError> {
    let gc = ctx.cfg.oracle.to_config(ctx.sub("oracle-grid"));
    let report = oracle_grid(&gc)?;
    let rows: Vec<Vec<String>> = report
        .cases
        .iter()
        .map(|c| {
            vec![
                c.index.to_string(),
                c.system.clone(),
                format!("{:?}", c.quantity),
                c.parameter.to_string(),
                num(c.estimate),
                num(c.std_error),
                num(c.exact),
                num(c.z),
                c.within.to_string(),
            ]
        })
        .collect();
    ctx.out.csv(
        "discrepancies.csv",
        &[
            "case",
            "system",
            "quantity",
            "parameter",
            "estimate",
            "std_error",
            "exact",
            "z",
            "within",
        ],
        &rows,
    )?;
    ctx.json("oracle.json", "oracle", &report)?;
    Ok(vec![Check::holds(
        "within-sigma rate",
        report.rate,
        report.accepted,
        format!(">= {}", report.required_rate),
    )])
}
