//! Centering, the Poisson equation `(I − P)υ = φ`, the limiting variance,
//! correlation series and the functional CLT for the normalized chain `Ψ`.
//!
//! `P = ℒ_f̄` is the transition operator of `Ψ`, so `Pⁿφ(x) = E[φ(Ψ_n) | Ψ_0 = x]`
//! and `υ = Σ_{n≥0} Pⁿφ`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::chains::{stationary_start, ChainState, PsiStepper};
use crate::coupling::{fit_polynomial_decay, DecayFit};
use crate::error::{contract, LabError, Result};
use crate::observable::Observable;
use crate::rng::{derive_seed, substream};
use crate::space::{Config, PathBuffer};
use crate::stats::{correlation, ks_standard_normal, mean, variance};
use crate::transfer::{KernelSpec, NormalizedSystem};

/// Leaves enumerated exactly per Poisson evaluation on finite alphabets.
pub const POISSON_EXACT_LEAVES: usize = 1 << 16;
/// Independent `Ψ` chains used by the long-run averages.
const CHAINS: usize = 8;
const BATCHES_PER_CHAIN: usize = 16;
/// Longest truncation the decay rule may choose.
const MAX_TERMS: usize = 4096;

fn state_of(sys: &NormalizedSystem, x: &[f64]) -> Config {
    Config::from_raw(sys.kernel().tag(), x.to_vec())
}

/// Runs `CHAINS` stationary `Ψ` chains with `ceil(steps/CHAINS)` recorded
/// states each and hands every state to `visit(chain, coords)`.
fn for_each_state<T: Send>(
    sys: &NormalizedSystem,
    steps: usize,
    burn_in: usize,
    seed: u64,
    label: &str,
    init: impl Fn() -> T + Sync,
    visit: impl Fn(&mut T, &[f64]) + Sync,
) -> Result<Vec<T>> {
    PsiStepper::new(sys)?;
    let per = steps.div_ceil(CHAINS);
    (0..CHAINS)
        .into_par_iter()
        .map(|c| -> Result<T> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, label, c as u64);
            let mut state = stationary_start(&mut stepper, sys.depth(), burn_in, s, 0)?;
            let mut acc = init();
            for _ in 0..per {
                stepper.step(&mut state)?;
                visit(&mut acc, state.current().coords());
            }
            Ok(acc)
        })
        .collect()
}

/// Mean and batch-means standard error of per-chain series.
fn pooled_batch_means(series: &[Vec<f64>]) -> (f64, f64) {
    let mut batch = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for s in series {
        total += s.iter().sum::<f64>();
        count += s.len();
        let size = (s.len() / BATCHES_PER_CHAIN).max(1);
        for chunk in s.chunks(size) {
            if chunk.len() == size {
                batch.push(mean(chunk));
            }
        }
    }
    let m = total / count.max(1) as f64;
    let se = if batch.len() > 1 {
        (variance(&batch) / batch.len() as f64).sqrt()
    } else {
        f64::INFINITY
    };
    (m, se)
}

#[derive(Clone, Debug)]
pub struct CenteredObservable {
    /// `φ − μ̂(φ)`.
    pub observable: Observable,
    pub mean: f64,
    /// Batch-means standard error of `μ̂(φ)`.
    pub std_error: f64,
    /// `4‖φ‖_∞/√n_est`.
    pub error_bound: f64,
    pub steps: usize,
}

/// `φ − μ̂(φ)` with `μ̂(φ)` the long-run `Ψ` average over `n_est` states.
pub fn center_observable(
    sys: &NormalizedSystem,
    phi: &Observable,
    n_est: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CenteredObservable> {
    if n_est == 0 {
        return contract("centering needs n_est ≥ 1");
    }
    let error_bound = 4.0 * phi.sup_norm() / (n_est as f64).sqrt();
    if let Some(c) = phi.as_constant() {
        return Ok(CenteredObservable {
            observable: phi.centered(c),
            mean: c,
            std_error: 0.0,
            error_bound,
            steps: 0,
        });
    }
    let series = for_each_state(
        sys,
        n_est,
        burn_in,
        seed,
        "center",
        Vec::new,
        |acc: &mut Vec<f64>, x| acc.push(phi.eval(x)),
    )?;
    let (m, se) = pooled_batch_means(&series);
    Ok(CenteredObservable {
        observable: phi.centered(m),
        mean: m,
        std_error: se,
        error_bound,
        steps: series.iter().map(Vec::len).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorrelationPoint {
    pub n: usize,
    /// `μ̂(φ·Pⁿφ)`.
    pub value: f64,
    pub std_error: f64,
}

/// Lagged products along stationary `Ψ` chains, kept as batch sums so that
/// both lag correlations and Green–Kubo partial sums get batch-means errors.
#[derive(Clone, Debug, Serialize)]
pub struct CorrelationSeries {
    pub points: Vec<CorrelationPoint>,
    pub steps: usize,
    /// `batch_sums[b][n]`: mean of `φ_t φ_{t+n}` over batch `b`.
    batch_means: Vec<Vec<f64>>,
}

impl CorrelationSeries {
    /// `μ̂(φ²) + 2 Σ_{n=1}^{N} μ̂(φ·Pⁿφ)` and its standard error.
    pub fn green_kubo(&self, terms: usize) -> (f64, f64) {
        let terms = terms.min(self.points.len() - 1);
        let per: Vec<f64> = self
            .batch_means
            .iter()
            .map(|b| b[0] + 2.0 * b[1..=terms].iter().sum::<f64>())
            .collect();
        let se = if per.len() > 1 {
            (variance(&per) / per.len() as f64).sqrt()
        } else {
            f64::INFINITY
        };
        (mean(&per), se)
    }

    /// `(n, C(n))` for `n ≥ 2` where `C(n)` exceeds `sigmas` standard errors.
    pub fn significant(&self, sigmas: f64) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.n >= 2 && p.value > sigmas * p.std_error)
            .map(|p| (p.n, p.value))
            .collect()
    }

    /// Polynomial fit on the significant part of the series.
    pub fn decay_fit(&self, sigmas: f64) -> Result<DecayFit> {
        let mut fit = fit_polynomial_decay(&self.significant(sigmas))?;
        let kept: Vec<usize> = self.significant(sigmas).iter().map(|p| p.0).collect();
        fit.dropped = self
            .points
            .iter()
            .filter(|p| p.n >= 2 && !kept.contains(&p.n))
            .map(|p| p.n)
            .collect();
        Ok(fit)
    }
}

/// `C(n) = μ(φ·Pⁿφ)` for `n = 0..=n_max` from `steps` stationary `Ψ` states.
pub fn correlation_series(
    sys: &NormalizedSystem,
    phi: &Observable,
    n_max: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<CorrelationSeries> {
    let per = steps.div_ceil(CHAINS);
    if per < BATCHES_PER_CHAIN {
        return contract("correlation series needs at least 16 states per chain");
    }
    let batch = per / BATCHES_PER_CHAIN;
    let lags = n_max + 1;
    PsiStepper::new(sys)?;
    let per_chain = (0..CHAINS)
        .into_par_iter()
        .map(|c| -> Result<Vec<Vec<f64>>> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, "correlation", c as u64);
            let mut state = stationary_start(&mut stepper, sys.depth(), burn_in, s, 0)?;
            let total = batch * BATCHES_PER_CHAIN + n_max;
            let mut vals = Vec::with_capacity(total);
            vals.push(phi.eval(state.current().coords()));
            for _ in 1..total {
                stepper.step(&mut state)?;
                vals.push(phi.eval(state.current().coords()));
            }
            Ok((0..BATCHES_PER_CHAIN)
                .map(|b| {
                    let mut sums = vec![0.0; lags];
                    for t in b * batch..(b + 1) * batch {
                        for (n, s) in sums.iter_mut().enumerate() {
                            *s += vals[t] * vals[t + n];
                        }
                    }
                    sums.iter().map(|s| s / batch as f64).collect()
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let batch_means: Vec<Vec<f64>> = per_chain.into_iter().flatten().collect();
    let nb = batch_means.len() as f64;
    let points = (0..lags)
        .map(|n| {
            let v: Vec<f64> = batch_means.iter().map(|b| b[n]).collect();
            CorrelationPoint {
                n,
                value: mean(&v),
                std_error: (variance(&v) / nb).sqrt(),
            }
        })
        .collect();
    Ok(CorrelationSeries {
        points,
        steps: batch * BATCHES_PER_CHAIN * CHAINS,
        batch_means,
    })
}

/// Truncation `N` and tail bound `Σ_{n>N} Ĉ n^p ≤ Ĉ N^{p+1}/(−p−1)` chosen so
/// the tail is at most `ratio` times the fitted partial sum.
pub fn truncation_from_decay(fit: &DecayFit, ratio: f64) -> Result<(usize, f64)> {
    let p = fit.exponent;
    if !(p < -1.0) {
        return Err(LabError::Refused(format!(
            "correlation exponent {p:.3} ≥ −1: the Poisson series is not summable"
        )));
    }
    let tail = |n: usize| fit.constant * (n as f64).powf(p + 1.0) / (-p - 1.0);
    let mut partial = 0.0;
    for n in 1..=MAX_TERMS {
        partial += fit.constant * (n as f64).powf(p);
        if tail(n) <= ratio * partial {
            return Ok((n, tail(n)));
        }
    }
    Ok((MAX_TERMS, tail(MAX_TERMS)))
}

#[derive(Clone, Copy, Debug)]
pub struct PoissonConfig {
    /// `Ψ` chains per evaluation point for the Monte Carlo terms.
    pub chains: usize,
    /// Stationary probe states for the residual check.
    pub probes: usize,
    pub burn_in: usize,
    /// Tail-to-partial-sum ratio used when `N` comes from a decay fit.
    pub tail_ratio: f64,
    /// Standard error of the centring mean; `Pⁿ(φ − μ̂) → μ − μ̂`, so the
    /// residual carries it whatever `N` is.
    pub center_std_error: f64,
    pub seed: u64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            chains: 256,
            probes: 16,
            burn_in: 64,
            tail_ratio: 0.05,
            center_std_error: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoissonValue {
    pub upsilon: f64,
    pub upsilon_se: f64,
    /// `Pυ_N = Σ_{n=1}^{N+1} Pⁿφ`.
    pub p_upsilon: f64,
    pub p_upsilon_se: f64,
    /// `υ_N − Pυ_N − φ = −P^{N+1}φ`.
    pub residual: f64,
    pub residual_se: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResidualProbe {
    pub residual: f64,
    pub std_error: f64,
    pub ok: bool,
}

/// `υ_N = Σ_{n=0}^{N} Pⁿφ`. Terms are summed exactly over all words while the
/// word tree has at most [`POISSON_EXACT_LEAVES`] leaves and estimated from
/// `Ψ` chains (common random numbers across points) beyond; with finite
/// locality a later term is `E[Pʲφ(Ψ_{n−j})]` with `Pʲφ` exact. Values are
/// memoized on the leading points when `υ` has finite locality.
pub struct PoissonSolution<'a> {
    sys: &'a NormalizedSystem,
    phi: Observable,
    pub terms: usize,
    /// Terms `1..=exact_terms` are exact.
    pub exact_terms: usize,
    pub residual_bound: f64,
    pub decay: Option<DecayFit>,
    pub probes: Vec<ResidualProbe>,
    chains: usize,
    seed: u64,
    key_len: Option<usize>,
    cache: Mutex<HashMap<Vec<u64>, PoissonValue>>,
    levels: Mutex<HashMap<Vec<u64>, f64>>,
}

impl std::fmt::Debug for PoissonSolution<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSolution")
            .field("terms", &self.terms)
            .field("exact_terms", &self.exact_terms)
            .field("residual_bound", &self.residual_bound)
            .field("probes", &self.probes)
            .finish()
    }
}

impl PoissonSolution<'_> {
    pub fn observable(&self) -> &Observable {
        &self.phi
    }

    pub fn system(&self) -> &NormalizedSystem {
        self.sys
    }

    pub fn accepted(&self) -> bool {
        self.probes.iter().all(|p| p.ok)
    }

    pub fn eval(&self, x: &[f64]) -> Result<PoissonValue> {
        let key = self
            .key_len
            .map(|l| x[..l].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if let Some(k) = &key {
            if let Some(v) = self.cache.lock().expect("cache lock").get(k) {
                return Ok(*v);
            }
        }
        let v = self.compute(x)?;
        if let Some(k) = key {
            self.cache.lock().expect("cache lock").insert(k, v);
        }
        Ok(v)
    }

    /// Exact `Pʲφ(y)` at the enumeration horizon `j`, memoized by prefix.
    fn level(&self, y: &[f64]) -> f64 {
        let j = self.exact_terms;
        let key: Vec<u64> = y[..self.key_len.unwrap_or(y.len())]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        if let Some(v) = self.levels.lock().expect("cache lock").get(&key) {
            return *v;
        }
        let v = exact_terms(self.sys, &self.phi, y, j)[j - 1];
        self.levels.lock().expect("cache lock").insert(key, v);
        v
    }

    fn compute(&self, x: &[f64]) -> Result<PoissonValue> {
        let n = self.terms;
        let j = self.exact_terms.min(n + 1);
        let exact = exact_terms(self.sys, &self.phi, x, j);
        let phi_x = self.phi.eval(x);
        let mut ups = phi_x + exact.iter().take(j.min(n)).sum::<f64>();
        let mut pups = exact.iter().sum::<f64>();
        let mut res = if j == n + 1 { -exact[n] } else { 0.0 };
        let (mut ups_se, mut pups_se, mut res_se) = (0.0, 0.0, 0.0);
        if j < n + 1 {
            let mut stepper = PsiStepper::new(self.sys)?;
            let start = state_of(self.sys, x);
            let mut a = Vec::with_capacity(self.chains);
            let mut b = Vec::with_capacity(self.chains);
            let mut c = Vec::with_capacity(self.chains);
            // With finite locality the chain only has to reach Ψ_{n−j}, where
            // the exact (and memoized) Pʲφ takes over.
            let conditioned = j > 0 && self.key_len.is_some();
            let skip = if conditioned { 0 } else { j };
            let steps = if conditioned { n + 1 - j } else { n + 1 };
            for i in 0..self.chains {
                let mut state = ChainState::new(start.clone(), self.seed, i as u64);
                let (mut sa, mut sb, mut last) = (0.0, 0.0, 0.0);
                for step in 1..=steps {
                    stepper.step(&mut state)?;
                    if step <= skip {
                        continue;
                    }
                    let y = state.current().coords();
                    let (term, v) = if conditioned {
                        (step + j, self.level(y))
                    } else {
                        (step, self.phi.eval(y))
                    };
                    if term <= n {
                        sa += v;
                    }
                    sb += v;
                    last = v;
                }
                a.push(sa);
                b.push(sb);
                c.push(last);
            }
            let k = self.chains as f64;
            ups += mean(&a);
            pups += mean(&b);
            res = -mean(&c);
            ups_se = (variance(&a) / k).sqrt();
            pups_se = (variance(&b) / k).sqrt();
            res_se = (variance(&c) / k).sqrt();
        }
        Ok(PoissonValue {
            upsilon: ups,
            upsilon_se: ups_se,
            p_upsilon: pups,
            p_upsilon_se: pups_se,
            residual: res,
            residual_se: res_se,
        })
    }
}

/// `ℒ̄ⁿφ(x)` for `n = 1..=j` by enumerating every word on a finite full shift,
/// using `f̄ⁿ = fⁿ + ln ĥ(x_n) − ln ĥ(x) − n ln λ̂`.
fn exact_terms(sys: &NormalizedSystem, phi: &Observable, x: &[f64], j: usize) -> Vec<f64> {
    let mut out = vec![0.0; j];
    if j == 0 {
        return out;
    }
    let KernelSpec::FullShift(m) = sys.kernel() else {
        return out;
    };
    let letters: Vec<(f64, f64)> = m.atoms().map(|(a, w)| (a, w.ln())).collect();
    let mut buf = PathBuffer::new(1, sys.depth(), j);
    buf.reset(x);
    let mut walk = WordWalk {
        buf,
        sums: &mut out,
        letters: &letters,
        sys,
        phi,
        log_h_x: sys.h(x).ln(),
        log_lambda: sys.lambda().ln(),
    };
    walk.descend(0, 0.0);
    out
}

/// Depth-first enumeration state for `exact_terms`.
struct WordWalk<'a> {
    buf: PathBuffer,
    sums: &'a mut Vec<f64>,
    /// `(letter, ln weight)`.
    letters: &'a [(f64, f64)],
    sys: &'a NormalizedSystem,
    phi: &'a Observable,
    log_h_x: f64,
    log_lambda: f64,
}

impl WordWalk<'_> {
    /// `acc` is `Σ ln μ(w_i) + fⁿ` along the current word of length `level`.
    fn descend(&mut self, level: usize, acc: f64) {
        let j = self.sums.len();
        for &(a, lw) in self.letters {
            self.buf.prepend(&[a]);
            let child = self.buf.current();
            let acc2 = acc + lw + self.sys.potential().eval_coords(child);
            let n = level + 1;
            let w =
                (acc2 + self.sys.h(child).ln() - self.log_h_x - n as f64 * self.log_lambda).exp();
            self.sums[level] += w * self.phi.eval(child);
            if n < j {
                self.descend(n, acc2);
            }
            self.buf.rewind_to(level);
        }
    }
}

/// Solves `(I − P)υ = φ` by the truncated series `υ_N = Σ_{n=0}^{N} Pⁿφ`.
///
/// `N` is `terms` when given, otherwise the smallest `N` whose fitted
/// correlation tail is at most `tail_ratio` of the partial sum. Without a
/// decay fit the residual bound is zero and only Monte Carlo noise, including
/// that of the centring mean, is allowed.
pub fn solve_poisson<'a>(
    sys: &'a NormalizedSystem,
    phi: &Observable,
    decay: Option<&DecayFit>,
    terms: Option<usize>,
    cfg: &PoissonConfig,
) -> Result<PoissonSolution<'a>> {
    PsiStepper::new(sys)?;
    if cfg.chains < 2 {
        return contract("Poisson solver needs at least two chains per point");
    }
    let (auto_terms, bound) = match decay {
        Some(fit) => {
            let (n, b) = truncation_from_decay(fit, cfg.tail_ratio)?;
            (Some(n), b)
        }
        None => (None, 0.0),
    };
    let n = match (terms, auto_terms) {
        (Some(t), _) => t,
        (None, Some(t)) => t,
        (None, None) => return contract("Poisson solver needs a truncation or a decay fit"),
    };
    let residual_bound = match decay {
        Some(fit) if terms.is_some() => {
            let p = fit.exponent;
            fit.constant * (n.max(1) as f64).powf(p + 1.0) / (-p - 1.0)
        }
        _ => bound,
    };
    let exact = match (sys.kernel(), sys.kernel().branching()) {
        (KernelSpec::FullShift(_), Some(s)) if s > 1 => {
            let mut j = 0;
            let mut leaves = 1usize;
            while leaves.saturating_mul(s) <= POISSON_EXACT_LEAVES && j < n + 1 {
                leaves *= s;
                j += 1;
            }
            j
        }
        (KernelSpec::FullShift(_), Some(_)) => n + 1,
        _ => 0,
    };
    let key_len = match (sys.locality(), phi.locality()) {
        (Some(a), Some(b)) => Some(a.max(b).max(1) * sys.kernel().point_dim()),
        _ => None,
    };
    let mut sol = PoissonSolution {
        sys,
        phi: phi.clone(),
        terms: n,
        exact_terms: exact,
        residual_bound,
        decay: decay.cloned(),
        probes: Vec::new(),
        chains: cfg.chains,
        seed: derive_seed(cfg.seed, "poisson-chains", 0),
        key_len,
        cache: Mutex::new(HashMap::new()),
        levels: Mutex::new(HashMap::new()),
    };
    let states = probe_states(sys, cfg.probes, cfg.burn_in, cfg.seed)?;
    sol.probes = states
        .par_iter()
        .map(|x| -> Result<ResidualProbe> {
            let v = sol.eval(x)?;
            Ok(ResidualProbe {
                residual: v.residual,
                std_error: v.residual_se,
                ok: v.residual.abs()
                    <= sol.residual_bound + 3.0 * v.residual_se.hypot(cfg.center_std_error) + 1e-12,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sol)
}

fn probe_states(
    sys: &NormalizedSystem,
    probes: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..probes)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, "poisson-probe", i as u64);
            let state = stationary_start(&mut stepper, sys.depth(), burn_in, s, 0)?;
            Ok(state.current().coords().to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    /// `μ̂(υ²) − μ̂((Pυ)²)`.
    pub sigma2: f64,
    pub sigma2_se: f64,
    /// `μ̂(φ²) + 2 Σ_{n=1}^{N} μ̂(φ·Pⁿφ)`.
    pub sigma2_gk: f64,
    pub sigma2_gk_se: f64,
    /// `μ̂(υ²) − (μ̂(Pυ))²`, the other reading of the squared term.
    pub sigma2_alt: f64,
    pub states: usize,
    /// `|σ̂² − σ̂²_gk| ≤ 3·√(se² + se_gk²)`.
    pub consistent: bool,
    /// `σ̂² > 0`.
    pub accepted: bool,
}

/// Limiting variance from the Poisson solution, cross-checked by Green–Kubo
/// with the same truncation. Squared Monte Carlo estimates are debiased by
/// their own variance.
pub fn variance_estimate(
    sol: &PoissonSolution<'_>,
    n_est: usize,
    gk_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let sys = sol.system();
    let series = for_each_state(
        sys,
        n_est,
        burn_in,
        seed,
        "variance",
        || Ok((Vec::new(), Vec::new(), Vec::new())),
        |acc: &mut Result<(Vec<f64>, Vec<f64>, Vec<f64>)>, x| {
            if let Ok((d, u2, pu)) = acc {
                match sol.eval(x) {
                    Ok(v) => {
                        let a = v.upsilon * v.upsilon - v.upsilon_se * v.upsilon_se;
                        let b = v.p_upsilon * v.p_upsilon - v.p_upsilon_se * v.p_upsilon_se;
                        d.push(a - b);
                        u2.push(a);
                        pu.push(v.p_upsilon);
                    }
                    Err(e) => *acc = Err(e),
                }
            }
        },
    )?;
    let mut diffs = Vec::new();
    let mut u2 = Vec::new();
    let mut pu = Vec::new();
    for s in series {
        let (d, a, b) = s?;
        diffs.push(d);
        u2.extend(a);
        pu.extend(b);
    }
    let (sigma2, sigma2_se) = pooled_batch_means(&diffs);
    let sigma2_alt = mean(&u2) - mean(&pu).powi(2);
    log::info!("variance: μ(υ²) − μ((Pυ)²) = {sigma2:.6}, μ(υ²) − μ(Pυ)² = {sigma2_alt:.6}");
    let (sigma2_gk, sigma2_gk_se) = if let Some(c) = sol.observable().as_constant() {
        (c * c, 0.0)
    } else {
        let cs = correlation_series(sys, sol.observable(), sol.terms, gk_steps, burn_in, seed)?;
        cs.green_kubo(sol.terms)
    };
    let tol = 3.0 * (sigma2_se * sigma2_se + sigma2_gk_se * sigma2_gk_se).sqrt() + 1e-12;
    Ok(VarianceReport {
        sigma2,
        sigma2_se,
        sigma2_gk,
        sigma2_gk_se,
        sigma2_alt,
        states: diffs.iter().map(Vec::len).sum(),
        consistent: (sigma2 - sigma2_gk).abs() <= tol,
        accepted: sigma2 > 0.0 && sigma2.is_finite(),
    })
}

/// `Y_n(t)` at the grid times for `R` independent replicates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FcltPaths {
    pub n: usize,
    pub sigma: f64,
    pub t_grid: Vec<f64>,
    /// `values[r][i] = Y_n(t_grid[i])` for replicate `r`.
    pub values: Vec<Vec<f64>>,
}

impl FcltPaths {
    pub fn replicates(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, t: f64) -> Option<Vec<f64>> {
        let i = self.t_grid.iter().position(|&s| (s - t).abs() < 1e-12)?;
        Some(self.values.iter().map(|r| r[i]).collect())
    }
}

/// Default observation times.
pub fn default_t_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn grid_indices(n: usize, t_grid: &[f64]) -> Result<Vec<usize>> {
    t_grid
        .iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                contract("path times must lie in [0, 1]")
            } else {
                Ok((n as f64 * t).floor() as usize)
            }
        })
        .collect()
}

/// `Y_n(t) = (1/(σ̂√n)) Σ_{j=0}^{⌊nt⌋} φ(Ψ_j)` along `R` stationary `Ψ` runs,
/// which have the law of the Birkhoff sums of `φ` under `μ`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fclt_paths(
    sys: &NormalizedSystem,
    phi: &Observable,
    sigma: f64,
    n: usize,
    replicates: usize,
    t_grid: &[f64],
    burn_in: usize,
    seed: u64,
) -> Result<FcltPaths> {
    if !(sigma > 0.0) {
        return contract("path normalization needs σ̂ > 0");
    }
    if n == 0 || replicates == 0 {
        return contract("paths need n ≥ 1 and at least one replicate");
    }
    let idx = grid_indices(n, t_grid)?;
    PsiStepper::new(sys)?;
    let scale = 1.0 / (sigma * (n as f64).sqrt());
    let values = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, "fclt", r as u64);
            let mut state = stationary_start(&mut stepper, sys.depth(), burn_in, s, 0)?;
            let mut sums = Vec::with_capacity(n + 1);
            let mut acc = phi.eval(state.current().coords());
            sums.push(acc);
            for _ in 0..n {
                stepper.step(&mut state)?;
                acc += phi.eval(state.current().coords());
                sums.push(acc);
            }
            Ok(idx.iter().map(|&m| sums[m] * scale).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FcltPaths {
        n,
        sigma,
        t_grid: t_grid.to_vec(),
        values,
    })
}

fn paths_from_increments(
    n: usize,
    replicates: usize,
    t_grid: &[f64],
    seed: u64,
    label: &str,
    mut draw: impl FnMut(&mut crate::rng::LabRng) -> f64,
    scale: Option<f64>,
) -> Result<FcltPaths> {
    let idx = grid_indices(n, t_grid)?;
    let mut rng = substream(seed, label);
    let incs: Vec<Vec<f64>> = (0..replicates)
        .map(|_| (0..=n).map(|_| draw(&mut rng)).collect())
        .collect();
    let sigma = match scale {
        Some(s) => s,
        None => {
            let all: Vec<f64> = incs.iter().flatten().copied().collect();
            variance(&all).sqrt()
        }
    };
    let norm = 1.0 / (sigma * (n as f64).sqrt());
    let values = incs
        .iter()
        .map(|inc| {
            let mut sums = Vec::with_capacity(n + 1);
            let mut acc = 0.0;
            for v in inc {
                acc += v;
                sums.push(acc);
            }
            idx.iter().map(|&m| sums[m] * norm).collect()
        })
        .collect();
    Ok(FcltPaths {
        n,
        sigma,
        t_grid: t_grid.to_vec(),
        values,
    })
}

/// Partial sums of iid standard normal increments.
pub fn brownian_paths(n: usize, replicates: usize, t_grid: &[f64], seed: u64) -> Result<FcltPaths> {
    paths_from_increments(
        n,
        replicates,
        t_grid,
        seed,
        "synthetic-brownian",
        |r| r.sample(StandardNormal),
        Some(1.0),
    )
}

/// Paths identically equal to `value`.
pub fn constant_paths(value: f64, n: usize, replicates: usize, t_grid: &[f64]) -> FcltPaths {
    FcltPaths {
        n,
        sigma: 1.0,
        t_grid: t_grid.to_vec(),
        values: vec![vec![value; t_grid.len()]; replicates],
    }
}

/// Symmetric `α`-stable variate by the Chambers–Mallows–Stuck formula.
pub fn symmetric_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    (alpha * v).sin() / v.cos().powf(1.0 / alpha)
        * ((v - alpha * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Partial sums of symmetric `α`-stable increments, normalized by the pooled
/// sample standard deviation as a practitioner would.
pub fn stable_paths(
    alpha: f64,
    n: usize,
    replicates: usize,
    t_grid: &[f64],
    seed: u64,
) -> Result<FcltPaths> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return contract("stable index must lie in (0, 2]");
    }
    paths_from_increments(
        n,
        replicates,
        t_grid,
        seed,
        "synthetic-stable",
        |r| symmetric_stable(alpha, r),
        None,
    )
}

/// One-sided binomial test of "acceptance probability ≥ `p`": false only when
/// `P(X ≤ accepted) < level` for `X ~ Bin(trials, p)`.
pub fn acceptance_rate_consistent(accepted: usize, trials: usize, p: f64, level: f64) -> bool {
    if accepted >= trials {
        return true;
    }
    match Binomial::new(p, trials as u64) {
        Ok(b) => b.cdf(accepted as u64) >= level,
        Err(_) => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FcltReport {
    pub sigma2: f64,
    pub sigma2_gk: Option<f64>,
    /// `(t, KS(Y(t)/√t, N(0,1)))` for `t ∈ {0.25, 0.5, 1}`.
    pub ks: Vec<(f64, f64)>,
    pub ks_threshold: f64,
    /// `|Var Y(1/2) / (0.5·Var Y(1)) − 1|`.
    pub linearity: f64,
    pub linearity_threshold: f64,
    /// Correlation of `Y(1/2) − Y(1/4)` and `Y(1) − Y(3/4)`.
    pub increment_correlation: f64,
    pub correlation_band: f64,
    pub replicates: usize,
    pub n: usize,
    pub accepted: bool,
}

/// Marginal, variance-linearity and increment tests of the Wiener limit.
pub fn fclt_test(paths: &FcltPaths, sigma2_gk: Option<f64>) -> Result<FcltReport> {
    let r = paths.replicates();
    if r < 200 {
        return contract(format!("FCLT test needs R ≥ 200, got {r}"));
    }
    let col = |t: f64| {
        paths
            .column(t)
            .ok_or_else(|| LabError::Contract(format!("path grid lacks t = {t}")))
    };
    let (q1, q2, q3, q4) = (col(0.25)?, col(0.5)?, col(0.75)?, col(1.0)?);
    let ks: Vec<(f64, f64)> = [(0.25f64, &q1), (0.5, &q2), (1.0, &q4)]
        .iter()
        .map(|(t, v)| {
            let s: Vec<f64> = v.iter().map(|y| y / t.sqrt()).collect();
            (*t, ks_standard_normal(&s))
        })
        .collect();
    let v1 = variance(&q4);
    let linearity = if v1 > 0.0 {
        (variance(&q2) / (0.5 * v1) - 1.0).abs()
    } else {
        f64::INFINITY
    };
    let a: Vec<f64> = q2.iter().zip(&q1).map(|(x, y)| x - y).collect();
    let b: Vec<f64> = q4.iter().zip(&q3).map(|(x, y)| x - y).collect();
    let increment_correlation = correlation(&a, &b);
    let rf = r as f64;
    let ks_threshold = 1.63 / rf.sqrt();
    let correlation_band = 3.0 * 2.0 / rf.sqrt();
    let linearity_threshold = 0.15;
    let accepted = ks.iter().all(|(_, k)| *k <= ks_threshold)
        && linearity <= linearity_threshold
        && increment_correlation.abs() <= correlation_band;
    Ok(FcltReport {
        sigma2: paths.sigma * paths.sigma,
        sigma2_gk,
        ks,
        ks_threshold,
        linearity,
        linearity_threshold,
        increment_correlation,
        correlation_band,
        replicates: r,
        n: paths.n,
        accepted,
    })
}
