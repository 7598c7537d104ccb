//! Transfer operators `ℒφ(x) = ∫ e^{f(y)} φ(y) dm_x(y)`, their iterates,
//! spectral radius, Cesàro eigenfunction and the normalized potential.
//!
//! Iterates use the path form `ℒⁿφ(x) = E_w[e^{fⁿ(x̄)} φ(x_n)]` with one
//! backward path per sampled word.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{contract, LabError, Result};
use crate::observable::Observable;
use crate::potential::{flatness_estimate, ModulusOfContinuity, Potential};
use crate::rng::{derive_seed, latin_hypercube, shifted_grid, substream, substream_indexed};
use crate::space::{AlphabetTag, AprioriMeasure, Config, PathBuffer};
use crate::stats::slope_weights;
use crate::systems::{IfsSystem, WeightedShiftSystem};

/// Largest number of leaf words summed exactly.
pub const EXACT_LEAVES: usize = 1 << 20;
const BLOCK: usize = 256;
const VON_MISES_BINS: usize = 4096;
/// Prepends a walk buffer holds before it is recentred.
const WALK_CAPACITY: usize = 16;

/// Backward-walk kernel `(m_x)`.
#[derive(Clone, Debug)]
pub enum KernelSpec {
    /// `m_x = μ × δ_x`: prepend a letter drawn from `μ`.
    FullShift(AprioriMeasure),
    /// `m_x = δ_{S(x)} × μ` with `μ` standard normal.
    WeightedShift(WeightedShiftSystem),
    /// `m_x = Σ_i p_i(x) δ_{T_i x}`.
    Ifs(IfsSystem),
}

impl KernelSpec {
    pub fn tag(&self) -> AlphabetTag {
        match self {
            KernelSpec::FullShift(m) => m.tag(),
            _ => AlphabetTag::RealLine,
        }
    }

    pub fn point_dim(&self) -> usize {
        self.tag().point_dim()
    }

    /// Depth of the states this kernel acts on.
    pub fn state_depth(&self, requested: usize) -> usize {
        match self {
            KernelSpec::FullShift(_) => requested,
            KernelSpec::WeightedShift(s) => s.dim(),
            KernelSpec::Ifs(s) => s.dim(),
        }
    }

    /// Number of branches when `m_x` is finitely supported.
    pub fn branching(&self) -> Option<usize> {
        match self {
            KernelSpec::FullShift(m) if m.is_finite() => Some(m.weights().len()),
            KernelSpec::Ifs(s) => Some(s.len()),
            _ => None,
        }
    }

    pub fn check(&self, f: &Potential, x: &Config) -> Result<()> {
        f.check_alphabet(self.tag())?;
        if x.tag() != self.tag() {
            return contract(format!(
                "configuration alphabet {:?} ≠ kernel alphabet {:?}",
                x.tag(),
                self.tag()
            ));
        }
        match self {
            KernelSpec::FullShift(_) if x.depth() < f.min_depth() => contract(format!(
                "potential needs depth ≥ {}, got {}",
                f.min_depth(),
                x.depth()
            )),
            KernelSpec::WeightedShift(_) | KernelSpec::Ifs(_)
                if x.depth() != self.state_depth(0) =>
            {
                contract(format!(
                    "state length {} ≠ system dimension {}",
                    x.depth(),
                    self.state_depth(0)
                ))
            }
            _ => Ok(()),
        }
    }

    /// A probe state: `μ`-random configuration, geometrically damped Gaussian
    /// vector, or uniform point of the IFS domain.
    pub fn random_state<R: Rng + ?Sized>(&self, depth: usize, rng: &mut R) -> Config {
        match self {
            KernelSpec::FullShift(m) => Config::random(m, depth, rng),
            KernelSpec::WeightedShift(s) => {
                let normal = Normal::standard();
                let coords = (0..s.dim())
                    .map(|k| {
                        normal.inverse_cdf(rng.random::<f64>().max(1e-300)) * 0.5f64.powi(k as i32)
                    })
                    .collect();
                Config::from_raw(AlphabetTag::RealLine, coords)
            }
            KernelSpec::Ifs(s) => {
                let (lo, hi) = s.domain();
                let coords = lo
                    .iter()
                    .zip(hi)
                    .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                    .collect();
                Config::from_raw(AlphabetTag::RealLine, coords)
            }
        }
    }
}

/// Tabulated von Mises offset law `∝ e^{κ cos δ}` on `[−π, π)`, sampled by
/// inverse transform with piecewise-constant density per bin.
#[derive(Clone, Debug)]
pub struct VonMisesTable {
    kappa: f64,
    cdf: Vec<f64>,
    /// `ln dμ/dq` on each bin, with `μ` uniform.
    log_ratio: Vec<f64>,
    width: f64,
    /// `sup_δ κ cos δ + ln dμ/dq(δ)`.
    sup_shifted: f64,
}

impl VonMisesTable {
    pub fn new(kappa: f64, bins: usize) -> Self {
        let width = TAU / bins as f64;
        let sub = 16;
        let h = width / sub as f64;
        let density = |d: f64| (kappa * d.cos()).exp();
        let mut masses: Vec<f64> = (0..bins)
            .map(|i| {
                let lo = -PI + i as f64 * width;
                // Composite Simpson rule.
                let mut acc = density(lo) + density(lo + width);
                for s in 1..sub {
                    acc += density(lo + s as f64 * h) * if s % 2 == 1 { 4.0 } else { 2.0 };
                }
                acc * h / 3.0
            })
            .collect();
        let total: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= total);
        let mut cdf = Vec::with_capacity(bins + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for m in &masses {
            acc += m;
            cdf.push(acc);
        }
        cdf[bins] = 1.0;
        let log_ratio: Vec<f64> = masses.iter().map(|m| -(bins as f64 * m).ln()).collect();
        let sup_shifted = (0..bins)
            .map(|i| {
                let lo = -PI + i as f64 * width;
                let hi = lo + width;
                let max_cos = if lo <= 0.0 && hi >= 0.0 {
                    1.0
                } else {
                    lo.cos().max(hi.cos())
                };
                kappa * max_cos + log_ratio[i]
            })
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            kappa,
            cdf,
            log_ratio,
            width,
            sup_shifted,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Offset `δ` for the uniform `u` and `ln dμ/dq(δ)`.
    #[inline]
    pub fn sample(&self, u: f64) -> (f64, f64) {
        let bins = self.log_ratio.len();
        let i = (self.cdf.partition_point(|&c| c <= u).max(1) - 1).min(bins - 1);
        let span = self.cdf[i + 1] - self.cdf[i];
        let frac = if span > 0.0 {
            ((u - self.cdf[i]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
        (-PI + (i as f64 + frac) * self.width, self.log_ratio[i])
    }
}

/// Letter proposal used by the word samplers.
#[derive(Clone, Debug)]
pub enum Proposal {
    /// Letters drawn from the kernel's own law.
    Apriori,
    /// Circle letters rotated from the previous first letter by a von Mises
    /// offset; the density ratio is carried in the weights.
    VonMises(Arc<VonMisesTable>),
    /// Finite alphabets: letters drawn `∝ μ(a) e^{f(a·x)}`, so the weight of
    /// each step is the exact one-step sum `ℒ1(x)`.
    Adapted(Arc<Potential>),
}

const ADAPTED_MAX_LETTERS: usize = 16;

/// Kernel plus letter proposal; drives backward paths from uniforms.
#[derive(Clone, Debug)]
pub struct Sampler {
    kernel: KernelSpec,
    proposal: Proposal,
}

/// Mutable state of one backward path.
#[derive(Clone, Debug)]
pub(crate) enum Walk {
    Shift(PathBuffer),
    Flat { cur: Vec<f64>, tmp: Vec<f64> },
}

impl Walk {
    pub(crate) fn new(kernel: &KernelSpec, depth: usize, steps: usize) -> Self {
        match kernel {
            KernelSpec::FullShift(_) => Walk::Shift(PathBuffer::new(
                kernel.point_dim(),
                depth,
                steps.clamp(1, WALK_CAPACITY),
            )),
            _ => Walk::Flat {
                cur: vec![0.0; depth],
                tmp: vec![0.0; depth],
            },
        }
    }

    #[inline]
    pub(crate) fn reset(&mut self, x: &[f64]) {
        match self {
            Walk::Shift(b) => b.reset(x),
            Walk::Flat { cur, .. } => {
                let len = cur.len();
                cur.copy_from_slice(&x[..len]);
            }
        }
    }

    #[inline]
    pub(crate) fn current(&self) -> &[f64] {
        match self {
            Walk::Shift(b) => b.current(),
            Walk::Flat { cur, .. } => cur,
        }
    }

    pub(crate) fn copy_from(&mut self, other: &Walk) {
        self.reset(other.current());
    }
}

impl Sampler {
    /// Picks the von Mises proposal for the Dyson circle model and the kernel's
    /// own law otherwise.
    pub fn new(kernel: &KernelSpec, f: &Potential) -> Self {
        let proposal = match (kernel, f) {
            (
                KernelSpec::FullShift(m),
                Potential::DysonSphere {
                    ambient: 2,
                    couplings,
                    ..
                },
            ) if m.tag() == AlphabetTag::Sphere(2) => {
                Proposal::VonMises(Arc::new(VonMisesTable::new(couplings[1], VON_MISES_BINS)))
            }
            _ => Proposal::Apriori,
        };
        Self {
            kernel: kernel.clone(),
            proposal,
        }
    }

    /// Proposal used by the eigenfunction particle systems: fully adapted on
    /// small finite alphabets, as in [`Self::new`] otherwise.
    pub fn for_eigenfunction(kernel: &KernelSpec, f: &Potential) -> Self {
        match kernel {
            KernelSpec::FullShift(m)
                if m.is_finite() && m.weights().len() <= ADAPTED_MAX_LETTERS =>
            {
                Self {
                    kernel: kernel.clone(),
                    proposal: Proposal::Adapted(Arc::new(f.clone())),
                }
            }
            _ => Self::new(kernel, f),
        }
    }

    pub fn plain(kernel: &KernelSpec) -> Self {
        Self {
            kernel: kernel.clone(),
            proposal: Proposal::Apriori,
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn proposal(&self) -> &Proposal {
        &self.proposal
    }

    pub fn uniforms_per_step(&self) -> usize {
        match (&self.kernel, &self.proposal) {
            (KernelSpec::FullShift(m), Proposal::Apriori) => m.uniforms_per_letter(),
            _ => 1,
        }
    }

    /// Upper bound on `f(y) + ln dm_x/dq(y)` over all steps.
    pub fn log_weight_bound(&self, f: &Potential) -> f64 {
        match &self.proposal {
            Proposal::Apriori | Proposal::Adapted(_) => f.sup_bound(),
            Proposal::VonMises(t) => f.sup_bound() - t.kappa + t.sup_shifted,
        }
    }

    /// Advances one step driven by `u`; returns `ln dm_x/dq` at the successor.
    #[inline]
    pub(crate) fn step(&self, walk: &mut Walk, u: &[f64]) -> f64 {
        match (&self.kernel, walk) {
            (KernelSpec::FullShift(m), Walk::Shift(buf)) => {
                if buf.is_full() {
                    buf.recenter();
                }
                match &self.proposal {
                    Proposal::Apriori => {
                        m.letter_from_uniforms(u, buf.prepend_slot());
                        0.0
                    }
                    Proposal::VonMises(t) => {
                        let (x, y) = {
                            let c = buf.current();
                            (c[0], c[1])
                        };
                        let (delta, lr) = t.sample(u[0]);
                        let (s, c) = delta.sin_cos();
                        let (a, b) = (c * x - s * y, s * x + c * y);
                        let norm = a.hypot(b);
                        let slot = buf.prepend_slot();
                        slot[0] = a / norm;
                        slot[1] = b / norm;
                        lr
                    }
                    Proposal::Adapted(g) => {
                        let mut w = [0.0; ADAPTED_MAX_LETTERS];
                        let level = buf.prepends();
                        let mut total = 0.0;
                        for (slot, (a, mu)) in w.iter_mut().zip(m.atoms()) {
                            buf.prepend(&[a]);
                            *slot = mu * g.eval_coords(buf.current()).exp();
                            total += *slot;
                            buf.rewind_to(level);
                        }
                        let s = m.weights().len();
                        let i = pick_scaled(&w[..s], u[0] * total);
                        let a = m.atoms().nth(i).map(|(a, _)| a).unwrap_or_default();
                        buf.prepend(&[a]);
                        total.ln() - g.eval_coords(buf.current())
                    }
                }
            }
            (KernelSpec::WeightedShift(s), Walk::Flat { cur, tmp }) => {
                let r = Normal::standard().inverse_cdf(u[0].clamp(1e-300, 1.0 - 1e-16));
                s.preimage_step(r, cur, tmp);
                std::mem::swap(cur, tmp);
                0.0
            }
            (KernelSpec::Ifs(s), Walk::Flat { cur, tmp }) => {
                let p = s.probabilities(cur);
                let i = pick(&p, u[0]);
                tmp.copy_from_slice(&s.map(i, cur));
                std::mem::swap(cur, tmp);
                0.0
            }
            _ => unreachable!("walk layout matches the kernel"),
        }
    }

    /// Cumulative `ln(e^{f^j(x̄)} Π dm/dq)` for `j = 1..=out.len()`.
    #[inline]
    pub(crate) fn drive(&self, f: &Potential, walk: &mut Walk, u: &[f64], out: &mut [f64]) {
        let upl = self.uniforms_per_step();
        let mut acc = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            acc += self.step(walk, &u[j * upl..(j + 1) * upl]);
            acc += f.eval_coords(walk.current());
            *o = acc;
        }
    }
}

#[inline]
fn pick(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[inline]
fn pick_scaled(w: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, v) in w.iter().enumerate() {
        acc += v;
        if target < acc {
            return i;
        }
    }
    w.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Evaluation {
    /// Exact sums when the word tree has at most [`EXACT_LEAVES`] leaves.
    Auto,
    /// Always Monte Carlo.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransferEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
    pub exact: bool,
}

fn enumerable(kernel: &KernelSpec, n: usize) -> bool {
    kernel
        .branching()
        .and_then(|s| s.checked_pow(n as u32))
        .is_some_and(|leaves| leaves <= EXACT_LEAVES)
}

/// Exact `ℒʲφ(x)` for `j = 0..=n` by summing over the word tree.
fn enumerate_levels(
    kernel: &KernelSpec,
    f: &Potential,
    phi: Option<&Observable>,
    x: &Config,
    n: usize,
) -> Vec<f64> {
    let mut sums = vec![0.0; n + 1];
    sums[0] = phi.map_or(1.0, |p| p.eval(x.coords()));
    match kernel {
        KernelSpec::FullShift(m) => {
            let atoms: Vec<(f64, f64)> = m.atoms().collect();
            let mut buf = PathBuffer::new(1, x.depth(), n);
            buf.reset(x.coords());
            shift_tree(&atoms, f, phi, &mut buf, 0, n, 0.0, &mut sums);
        }
        KernelSpec::Ifs(s) => ifs_tree(s, f, phi, x.coords(), 0, n, 1.0, &mut sums),
        KernelSpec::WeightedShift(_) => unreachable!("weighted shifts are not enumerable"),
    }
    sums
}

#[allow(clippy::too_many_arguments)]
fn shift_tree(
    atoms: &[(f64, f64)],
    f: &Potential,
    phi: Option<&Observable>,
    buf: &mut PathBuffer,
    level: usize,
    n: usize,
    log_w: f64,
    sums: &mut [f64],
) {
    for &(a, w) in atoms {
        buf.prepend(&[a]);
        let lw = log_w + w.ln() + f.eval_coords(buf.current());
        sums[level + 1] += lw.exp() * phi.map_or(1.0, |p| p.eval(buf.current()));
        if level + 1 < n {
            shift_tree(atoms, f, phi, buf, level + 1, n, lw, sums);
        }
        buf.rewind_to(level);
    }
}

#[allow(clippy::too_many_arguments)]
fn ifs_tree(
    s: &IfsSystem,
    f: &Potential,
    phi: Option<&Observable>,
    x: &[f64],
    level: usize,
    n: usize,
    weight: f64,
    sums: &mut [f64],
) {
    for (i, p) in s.probabilities(x).into_iter().enumerate() {
        let y = s.map(i, x);
        let w = weight * p * f.eval_coords(&y).exp();
        sums[level + 1] += w * phi.map_or(1.0, |o| o.eval(&y));
        if level + 1 < n {
            ifs_tree(s, f, phi, &y, level + 1, n, w, sums);
        }
    }
}

/// Per-word cumulative log weights (`k × n`, row-major) and `φ` at the endpoint.
struct PathSamples {
    n: usize,
    logs: Vec<f64>,
    phi: Vec<f64>,
}

fn sample_paths(
    sampler: &Sampler,
    f: &Potential,
    phi: Option<&Observable>,
    x: &Config,
    n: usize,
    k: usize,
    seed: u64,
) -> PathSamples {
    let upl = sampler.uniforms_per_step();
    let blocks = k.div_ceil(BLOCK);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream_indexed(seed, "transfer-paths", b as u64);
            let count = BLOCK.min(k - b * BLOCK);
            let mut walk = Walk::new(sampler.kernel(), x.depth(), n);
            let mut u = vec![0.0; n * upl];
            let mut logs = vec![0.0; count * n];
            let mut phis = vec![1.0; count];
            for i in 0..count {
                walk.reset(x.coords());
                u.iter_mut().for_each(|v| *v = rng.random());
                sampler.drive(f, &mut walk, &u, &mut logs[i * n..(i + 1) * n]);
                if let Some(p) = phi {
                    phis[i] = p.eval(walk.current());
                }
            }
            (logs, phis)
        })
        .collect();
    let mut logs = Vec::with_capacity(k * n);
    let mut phi_out = Vec::with_capacity(k);
    for (l, p) in parts {
        logs.extend(l);
        phi_out.extend(p);
    }
    PathSamples {
        n,
        logs,
        phi: phi_out,
    }
}

impl PathSamples {
    fn k(&self) -> usize {
        self.phi.len()
    }

    fn log_at(&self, i: usize, j: usize) -> f64 {
        self.logs[i * self.n + j - 1]
    }

    /// Max over samples of the level-`j` log weight.
    fn level_max(&self, j: usize) -> f64 {
        (0..self.k())
            .map(|i| self.log_at(i, j))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Mean and standard error of `e^{L_i} φ_i`, computed with the exact shift by `max L`.
fn weighted_mean(samples: &PathSamples, j: usize, with_phi: bool) -> TransferEstimate {
    let k = samples.k();
    let m = samples.level_max(j);
    let vals: Vec<f64> = (0..k)
        .map(|i| (samples.log_at(i, j) - m).exp() * if with_phi { samples.phi[i] } else { 1.0 })
        .collect();
    let mean = vals.iter().sum::<f64>() / k as f64;
    let var = if k > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0)
    } else {
        0.0
    };
    let scale = m.exp();
    TransferEstimate {
        value: scale * mean,
        std_error: scale * (var / k as f64).sqrt(),
        samples: k,
        exact: false,
    }
}

/// `ℒφ(x)`.
pub fn apply_transfer<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    f: &Potential,
    phi: &Observable,
    x: &Config,
    k: usize,
    rng: &mut R,
) -> Result<TransferEstimate> {
    transfer_n_with(kernel, f, phi, x, 1, k, Evaluation::Auto, rng.random())
}

/// `ℒⁿφ(x)`.
pub fn apply_transfer_n<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    f: &Potential,
    phi: &Observable,
    x: &Config,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<TransferEstimate> {
    transfer_n_with(kernel, f, phi, x, n, k, Evaluation::Auto, rng.random())
}

#[allow(clippy::too_many_arguments)]
pub fn transfer_n_with(
    kernel: &KernelSpec,
    f: &Potential,
    phi: &Observable,
    x: &Config,
    n: usize,
    k: usize,
    mode: Evaluation,
    seed: u64,
) -> Result<TransferEstimate> {
    kernel.check(f, x)?;
    if k == 0 || n == 0 {
        return contract("transfer needs n ≥ 1 and K ≥ 1");
    }
    if mode == Evaluation::Auto && enumerable(kernel, n) {
        let sums = enumerate_levels(kernel, f, Some(phi), x, n);
        return Ok(TransferEstimate {
            value: sums[n],
            std_error: 0.0,
            samples: kernel.branching().unwrap_or(1).pow(n as u32),
            exact: true,
        });
    }
    let sampler = Sampler::new(kernel, f);
    let samples = sample_paths(&sampler, f, Some(phi), x, n, k, seed);
    Ok(weighted_mean(&samples, n, true))
}

/// `ln ℒʲ1(x)` for `j = 1..=n` with standard errors of the logs.
#[derive(Clone, Debug, Serialize)]
pub struct LogPowers {
    pub log_values: Vec<f64>,
    pub log_std_errors: Vec<f64>,
    pub samples: usize,
    pub exact: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralEstimate {
    pub rho: f64,
    pub log_rho: f64,
    /// Delta-method standard error of `ln ρ̂`; zero when exact.
    pub log_rho_se: f64,
    /// `ρ̂·e^{±3 se}`.
    pub band: (f64, f64),
    pub powers: LogPowers,
    /// Regression window `[n_lo, n_hi]`.
    pub window: (usize, usize),
}

/// `ρ̂` from the slope of `ln ℒⁿ1(probe)` against `n` over `[⌈n_max/2⌉, n_max]`.
pub fn spectral_radius<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    f: &Potential,
    probe: &Config,
    n_max: usize,
    k: usize,
    rng: &mut R,
) -> Result<SpectralEstimate> {
    spectral_radius_with(kernel, f, probe, n_max, k, Evaluation::Auto, rng.random())
}

pub fn spectral_radius_with(
    kernel: &KernelSpec,
    f: &Potential,
    probe: &Config,
    n_max: usize,
    k: usize,
    mode: Evaluation,
    seed: u64,
) -> Result<SpectralEstimate> {
    kernel.check(f, probe)?;
    if n_max < 4 || k == 0 {
        return contract("spectral radius needs n_max ≥ 4 and K ≥ 1");
    }
    let lo = n_max.div_ceil(2);
    let ns: Vec<f64> = (lo..=n_max).map(|n| n as f64).collect();
    let c = slope_weights(&ns);
    if mode == Evaluation::Auto && enumerable(kernel, n_max) {
        let sums = enumerate_levels(kernel, f, None, probe, n_max);
        let log_values: Vec<f64> = sums[1..].iter().map(|v| v.ln()).collect();
        let log_rho: f64 = c
            .iter()
            .zip(lo..=n_max)
            .map(|(ci, n)| ci * log_values[n - 1])
            .sum();
        let rho = log_rho.exp();
        return Ok(SpectralEstimate {
            rho,
            log_rho,
            log_rho_se: 0.0,
            band: (rho, rho),
            powers: LogPowers {
                log_std_errors: vec![0.0; n_max],
                log_values,
                samples: kernel.branching().unwrap_or(1).pow(n_max as u32),
                exact: true,
            },
            window: (lo, n_max),
        });
    }
    let sampler = Sampler::new(kernel, f);
    let s = sample_paths(&sampler, f, None, probe, n_max, k, seed);
    let kf = k as f64;
    let maxes: Vec<f64> = (1..=n_max).map(|j| s.level_max(j)).collect();
    let scaled_means: Vec<f64> = (1..=n_max)
        .map(|j| {
            (0..k)
                .map(|i| (s.log_at(i, j) - maxes[j - 1]).exp())
                .sum::<f64>()
                / kf
        })
        .collect();
    let log_values: Vec<f64> = maxes
        .iter()
        .zip(&scaled_means)
        .map(|(m, v)| m + v.ln())
        .collect();
    let log_std_errors: Vec<f64> = (1..=n_max)
        .map(|j| {
            let mj = scaled_means[j - 1];
            let var = (0..k)
                .map(|i| ((s.log_at(i, j) - maxes[j - 1]).exp() / mj - 1.0).powi(2))
                .sum::<f64>()
                / (kf - 1.0).max(1.0);
            (var / kf).sqrt()
        })
        .collect();
    // Influence of each word on the regression slope.
    let influence: Vec<f64> = (0..k)
        .map(|i| {
            c.iter()
                .zip(lo..=n_max)
                .map(|(ci, j)| {
                    ci * ((s.log_at(i, j) - maxes[j - 1]).exp() / scaled_means[j - 1] - 1.0)
                })
                .sum()
        })
        .collect();
    let var = influence.iter().map(|z| z * z).sum::<f64>() / (kf - 1.0).max(1.0);
    let log_rho_se = (var / kf).sqrt();
    let log_rho: f64 = c
        .iter()
        .zip(lo..=n_max)
        .map(|(ci, n)| ci * log_values[n - 1])
        .sum();
    if !log_rho.is_finite() {
        return Err(LabError::Aborted(
            "non-finite spectral radius estimate".into(),
        ));
    }
    let rho = log_rho.exp();
    Ok(SpectralEstimate {
        rho,
        log_rho,
        log_rho_se,
        band: (
            rho * (-3.0 * log_rho_se).exp(),
            rho * (3.0 * log_rho_se).exp(),
        ),
        powers: LogPowers {
            log_values,
            log_std_errors,
            samples: k,
            exact: false,
        },
        window: (lo, n_max),
    })
}

/// Cesàro eigenfunction `h_n(x) = (1/n) Σ_{j=0}^{n} ρ̂^{-j} ℒʲ1(x)`.
///
/// Every `ℒʲ1` is estimated by one particle system driven by a frozen
/// stratified bank of uniforms, so `h_n` is a deterministic function of `x`
/// given the seed. Particles are resampled (systematically, with frozen
/// uniforms) when the effective sample size drops below half.
type PrefixCache = Mutex<HashMap<Vec<u64>, f64>>;

pub struct Eigenfunction {
    sampler: Sampler,
    f: Potential,
    rho: f64,
    n: usize,
    particles: usize,
    seed: u64,
    bank: Vec<f64>,
    resample_u: Vec<f64>,
    /// Cache keyed by the prefix `h_n` depends on, for potentials of finite range.
    cache: Option<(usize, PrefixCache)>,
}

impl fmt::Debug for Eigenfunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Eigenfunction(ρ̂ = {}, n = {}, K = {}, seed = {})",
            self.rho, self.n, self.particles, self.seed
        )
    }
}

impl Eigenfunction {
    pub fn new(
        kernel: &KernelSpec,
        f: &Potential,
        rho: f64,
        n: usize,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        f.check_alphabet(kernel.tag())?;
        if !(rho > 0.0 && rho.is_finite()) || n == 0 || particles == 0 {
            return contract("eigenfunction needs ρ̂ > 0, n ≥ 1 and K ≥ 1");
        }
        let sampler = Sampler::for_eigenfunction(kernel, f);
        let upl = sampler.uniforms_per_step();
        let bank = latin_hypercube(particles, n * upl, derive_seed(seed, "eigen-bank", 0));
        let mut rng = substream(seed, "eigen-resample");
        let resample_u = (0..n).map(|_| rng.random()).collect();
        let cache = match (kernel, f.locality()) {
            (KernelSpec::FullShift(_), Some(r)) => Some((
                r.saturating_sub(1) * kernel.point_dim(),
                Mutex::new(HashMap::new()),
            )),
            _ => None,
        };
        Ok(Self {
            sampler,
            f: f.clone(),
            rho,
            n,
            particles,
            seed,
            bank,
            resample_u,
            cache,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `h_n` at a flat state (any depth ≥ the potential's minimum).
    pub fn eval(&self, x: &[f64]) -> f64 {
        if let Some((len, cache)) = &self.cache {
            let key: Vec<u64> = x[..*len].iter().map(|v| v.to_bits()).collect();
            if let Some(v) = cache.lock().expect("cache lock").get(&key) {
                return *v;
            }
            let v = self.estimate(x);
            cache.lock().expect("cache lock").insert(key, v);
            return v;
        }
        self.estimate(x)
    }

    fn estimate(&self, x: &[f64]) -> f64 {
        let kernel = self.sampler.kernel();
        let depth = x.len() / kernel.point_dim();
        let (k, n) = (self.particles, self.n);
        let upl = self.sampler.uniforms_per_step();
        let fresh = || {
            let mut w = Walk::new(kernel, depth, n);
            w.reset(x);
            w
        };
        let mut walks: Vec<Walk> = (0..k).map(|_| fresh()).collect();
        let mut spare: Vec<Walk> = Vec::new();
        let mut lw = vec![0.0; k];
        let mut weights = vec![0.0; k];
        let mut log_base = 0.0;
        let mut total = 1.0;
        let log_rho = self.rho.ln();
        for j in 0..n {
            for (i, walk) in walks.iter_mut().enumerate() {
                let at = (i * n + j) * upl;
                lw[i] += self.sampler.step(walk, &self.bank[at..at + upl]);
                lw[i] += self.f.eval_coords(walk.current());
            }
            let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut s1, mut s2) = (0.0, 0.0);
            for (w, l) in weights.iter_mut().zip(&lw) {
                *w = (l - m).exp();
                s1 += *w;
                s2 += *w * *w;
            }
            let log_z = log_base + m + (s1 / k as f64).ln();
            total += (log_z - (j + 1) as f64 * log_rho).exp();
            if j + 1 < n && s1 * s1 < 0.5 * k as f64 * s2 {
                if spare.is_empty() {
                    spare = (0..k).map(|_| fresh()).collect();
                }
                let step = s1 / k as f64;
                let mut target = self.resample_u[j] * step;
                let mut acc = weights[0];
                let mut src = 0;
                for dst in spare.iter_mut() {
                    while acc <= target && src + 1 < k {
                        src += 1;
                        acc += weights[src];
                    }
                    dst.copy_from(&walks[src]);
                    target += step;
                }
                std::mem::swap(&mut walks, &mut spare);
                lw.iter_mut().for_each(|v| *v = 0.0);
                log_base = log_z;
            }
        }
        total / n as f64
    }
}

/// One-shot `h_n(x)`.
pub fn eigenfunction_eval(
    kernel: &KernelSpec,
    f: &Potential,
    rho: f64,
    x: &Config,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    kernel.check(f, x)?;
    Ok(Eigenfunction::new(kernel, f, rho, n, k, seed)?.eval(x.coords()))
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizeConfig {
    pub seed: u64,
    /// Truncation depth `D` of shift configurations.
    pub depth: usize,
    pub spectral_n_max: usize,
    pub spectral_samples: usize,
    pub eigen_n: usize,
    pub eigen_particles: usize,
    pub probes: usize,
    /// Letters per probe in the `ℒ_{f̄}1` check.
    pub check_samples: usize,
    pub tolerance: f64,
    /// Zero skips the flatness gate.
    pub flatness_trials: usize,
    pub flatness_n_max: usize,
    pub allow_flatness_override: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 64,
            spectral_n_max: 32,
            spectral_samples: 100_000,
            eigen_n: 16,
            eigen_particles: 256,
            probes: 32,
            check_samples: 1024,
            tolerance: 0.02,
            flatness_trials: 64,
            flatness_n_max: 32,
            allow_flatness_override: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizationDiagnostics {
    /// `ℒ_{f̄}1` at each probe.
    pub probe_values: Vec<f64>,
    pub probe_std_errors: Vec<f64>,
    /// `ĥ` at each probe.
    pub probe_h: Vec<f64>,
    /// `f̄ − f` at each probe; NaN where `f̄` is not a function of the state.
    pub probe_drift: Vec<f64>,
    pub sup_deviation: f64,
    pub tolerance: f64,
    pub accepted: bool,
    /// Smallest and largest `ĥ` seen on probes and their successors.
    pub h_min: f64,
    pub h_max: f64,
    pub check_samples: usize,
    pub exact: bool,
}

type StateFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Source of the eigenfunction of a normalized system.
#[derive(Clone)]
pub enum EigenSource {
    Estimated(Arc<Eigenfunction>),
    Exact(Arc<StateFn>),
}

/// `f̄ = f + ln ĥ − ln ĥ∘T − ln λ̂` with its diagnostics; immutable once built.
#[derive(Clone)]
pub struct NormalizedSystem {
    sampler: Sampler,
    f: Potential,
    lambda: f64,
    spectral: Option<SpectralEstimate>,
    h: EigenSource,
    /// Leading points `ĥ` depends on, when finite.
    h_locality: Option<usize>,
    depth: usize,
    flatness: Option<f64>,
    diagnostics: NormalizationDiagnostics,
}

impl fmt::Debug for NormalizedSystem {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            fm,
            "NormalizedSystem(f = {:?}, λ̂ = {}, D = {}, sup|ℒ_f̄1 − 1| = {:.3e})",
            self.f, self.lambda, self.depth, self.diagnostics.sup_deviation
        )
    }
}

impl NormalizedSystem {
    pub fn kernel(&self) -> &KernelSpec {
        self.sampler.kernel()
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn potential(&self) -> &Potential {
        &self.f
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn spectral(&self) -> Option<&SpectralEstimate> {
        self.spectral.as_ref()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn flatness(&self) -> Option<f64> {
        self.flatness
    }

    pub fn diagnostics(&self) -> &NormalizationDiagnostics {
        &self.diagnostics
    }

    pub fn accepted(&self) -> bool {
        self.diagnostics.accepted
    }

    pub fn eigen_source(&self) -> &EigenSource {
        &self.h
    }

    /// Number of leading points that determine `f̄`, `ĥ` and hence every
    /// `Pⁿφ` for `φ` of locality at most this value; `None` when unbounded.
    pub fn locality(&self) -> Option<usize> {
        match self.kernel() {
            KernelSpec::FullShift(_) => Some(self.f.locality()?.max(self.h_locality?)),
            _ => None,
        }
    }

    /// Number of leading coordinates `ĥ` reads: `D − 1` points on shifts so
    /// that `ĥ∘σ` of a depth-`D` child is `ĥ` of its parent.
    pub fn h_len(&self) -> usize {
        match self.kernel() {
            KernelSpec::FullShift(_) => (self.depth - 1) * self.kernel().point_dim(),
            _ => self.depth,
        }
    }

    /// `ĥ` at a state of depth ≥ `D − 1`.
    pub fn h(&self, x: &[f64]) -> f64 {
        let x = &x[..self.h_len()];
        match &self.h {
            EigenSource::Estimated(e) => e.eval(x),
            EigenSource::Exact(g) => g(x),
        }
    }

    /// `ln` of the transition density of `P` w.r.t. `m_x`:
    /// `f(y) + ln ĥ(y) − ln ĥ(x) − ln λ̂`.
    pub fn log_density(&self, parent: &[f64], child: &[f64]) -> f64 {
        self.f.eval_coords(child) + self.h(child).ln() - self.h(parent).ln() - self.lambda.ln()
    }

    /// `f̄(y)` for shift kernels, whose parent is `σ(y)` (or `L(y)`).
    pub fn f_bar(&self, y: &[f64]) -> Option<f64> {
        match self.kernel() {
            KernelSpec::FullShift(_) => {
                let dim = self.kernel().point_dim();
                Some(self.log_density(&y[dim..], y))
            }
            KernelSpec::WeightedShift(s) => {
                let parent = s.apply(y).ok()?;
                Some(self.log_density(&parent, y))
            }
            KernelSpec::Ifs(_) => None,
        }
    }

    /// `(A′, B′)`: the observed `ĥ` range widened by `0.25·ln(B/A) + 10⁻³` on the log scale.
    pub fn envelope(&self) -> (f64, f64) {
        let (a, b) = (self.diagnostics.h_min, self.diagnostics.h_max);
        let m = 0.25 * (b / a).ln() + 1e-3;
        (a * (-m).exp(), b * m.exp())
    }

    /// Bounds on `f̄` implied by the bounds of `f` and the `ĥ` envelope.
    pub fn f_bar_bounds(&self) -> (f64, f64) {
        let (a, b) = self.envelope();
        let spread = (b / a).ln();
        let ll = self.lambda.ln();
        (
            self.f.inf_bound() - spread - ll,
            self.f.sup_bound() + spread - ll,
        )
    }

    /// Wraps an externally computed eigenpair and runs the normalization check.
    pub fn from_exact(
        kernel: &KernelSpec,
        f: &Potential,
        lambda: f64,
        h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        h_locality: Option<usize>,
        depth: usize,
        cfg: &NormalizeConfig,
    ) -> Result<Self> {
        f.check_alphabet(kernel.tag())?;
        let sys = Self {
            sampler: Sampler::new(kernel, f),
            f: f.clone(),
            lambda,
            spectral: None,
            h: EigenSource::Exact(Arc::new(h)),
            h_locality,
            depth: kernel.state_depth(depth),
            flatness: None,
            diagnostics: placeholder_diagnostics(cfg.tolerance),
        };
        sys.checked(cfg)
    }

    /// `ℒ_{f̄}1(x)`.
    pub fn transfer_one(&self, x: &[f64], k: usize, seed: u64) -> (TransferEstimate, f64, f64) {
        self.transfer_with(None, x, k, seed)
    }

    /// `Pφ(x) = ℒ_{f̄}φ(x)`, exact on finitely branching kernels.
    pub fn apply(&self, phi: &Observable, x: &[f64], k: usize, seed: u64) -> TransferEstimate {
        self.transfer_with(Some(phi), x, k, seed).0
    }

    fn transfer_with(
        &self,
        phi: Option<&Observable>,
        x: &[f64],
        k: usize,
        seed: u64,
    ) -> (TransferEstimate, f64, f64) {
        let phi_at = |y: &[f64]| phi.map_or(1.0, |p| p.eval(y));
        let hx = self.h(x);
        let base = -hx.ln() - self.lambda.ln();
        let mut h_min = hx;
        let mut h_max = hx;
        let mut track = |v: f64| {
            h_min = h_min.min(v);
            h_max = h_max.max(v);
        };
        let kernel = self.kernel();
        if let Some(branches) = kernel.branching() {
            let mut total = 0.0;
            match kernel {
                KernelSpec::FullShift(m) => {
                    let mut buf = PathBuffer::new(1, self.depth, 1);
                    for (a, w) in m.atoms() {
                        buf.reset(x);
                        buf.prepend(&[a]);
                        let y = buf.current();
                        let hy = self.h(y);
                        track(hy);
                        total += w * (self.f.eval_coords(y) + hy.ln() + base).exp() * phi_at(y);
                    }
                }
                KernelSpec::Ifs(s) => {
                    for (i, p) in s.probabilities(x).into_iter().enumerate() {
                        let y = s.map(i, x);
                        let hy = self.h(&y);
                        track(hy);
                        total += p * (self.f.eval_coords(&y) + hy.ln() + base).exp() * phi_at(&y);
                    }
                }
                KernelSpec::WeightedShift(_) => unreachable!(),
            }
            let est = TransferEstimate {
                value: total,
                std_error: 0.0,
                samples: branches,
                exact: true,
            };
            return (est, h_min, h_max);
        }
        let plain = Sampler::plain(kernel);
        let upl = plain.uniforms_per_step();
        let u = if upl == 1 {
            shifted_grid(k, seed)
        } else {
            latin_hypercube(k, upl, seed)
        };
        let mut walk = Walk::new(kernel, self.depth, 1);
        let vals: Vec<f64> = (0..k)
            .map(|i| {
                walk.reset(x);
                plain.step(&mut walk, &u[i * upl..(i + 1) * upl]);
                let y = walk.current();
                let hy = self.h(y);
                track(hy);
                (self.f.eval_coords(y) + hy.ln() + base).exp() * phi_at(y)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / k as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0).max(1.0);
        let est = TransferEstimate {
            value: mean,
            std_error: (var / k as f64).sqrt(),
            samples: k,
            exact: false,
        };
        (est, h_min, h_max)
    }

    fn checked(mut self, cfg: &NormalizeConfig) -> Result<Self> {
        if cfg.probes == 0 || cfg.check_samples == 0 {
            return contract("normalization check needs probes and check samples");
        }
        let mut rng = substream(cfg.seed, "normalize-probes");
        let probes: Vec<Config> = (0..cfg.probes)
            .map(|_| self.kernel().random_state(self.depth, &mut rng))
            .collect();
        let results: Vec<(TransferEstimate, f64, f64)> = probes
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                self.transfer_one(
                    x.coords(),
                    cfg.check_samples,
                    derive_seed(cfg.seed, "normalize-check", i as u64),
                )
            })
            .collect();
        let sup_deviation = results
            .iter()
            .map(|r| (r.0.value - 1.0).abs())
            .fold(0.0, f64::max);
        self.diagnostics = NormalizationDiagnostics {
            probe_values: results.iter().map(|r| r.0.value).collect(),
            probe_std_errors: results.iter().map(|r| r.0.std_error).collect(),
            probe_h: probes.iter().map(|x| self.h(x.coords())).collect(),
            probe_drift: probes
                .iter()
                .map(|x| {
                    self.f_bar(x.coords())
                        .map_or(f64::NAN, |fb| fb - self.f.eval_coords(x.coords()))
                })
                .collect(),
            sup_deviation,
            tolerance: cfg.tolerance,
            accepted: sup_deviation <= cfg.tolerance,
            h_min: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
            h_max: results.iter().map(|r| r.2).fold(0.0, f64::max),
            check_samples: cfg.check_samples,
            exact: results.iter().all(|r| r.0.exact),
        };
        Ok(self)
    }
}

fn placeholder_diagnostics(tolerance: f64) -> NormalizationDiagnostics {
    NormalizationDiagnostics {
        probe_values: Vec::new(),
        probe_std_errors: Vec::new(),
        probe_h: Vec::new(),
        probe_drift: Vec::new(),
        sup_deviation: f64::INFINITY,
        tolerance,
        accepted: false,
        h_min: 1.0,
        h_max: 1.0,
        check_samples: 0,
        exact: false,
    }
}

/// Assembles `λ̂`, `ĥ` and `f̄` and checks `sup |ℒ_{f̄}1 − 1|` on random probes.
///
/// A system whose check exceeds the tolerance is returned flagged as not
/// accepted. Dyson potentials with `ε ≤ 2` are refused unless the flatness
/// override is set.
pub fn normalize(
    kernel: &KernelSpec,
    f: &Potential,
    cfg: &NormalizeConfig,
) -> Result<NormalizedSystem> {
    f.check_alphabet(kernel.tag())?;
    let depth = kernel.state_depth(cfg.depth);
    if depth < f.min_depth().max(2) {
        return contract("normalization needs depth ≥ max(2, potential minimum depth)");
    }
    let flatness = match kernel {
        KernelSpec::FullShift(m) if cfg.flatness_trials > 0 => {
            let target = match f {
                Potential::DysonSphere { eps, .. } | Potential::DysonHalfLine { eps, .. } => {
                    (eps - 1.0).max(0.5)
                }
                _ => 1.0,
            };
            let report = flatness_estimate(
                f,
                m,
                &ModulusOfContinuity::log_config(target)?,
                depth,
                cfg.flatness_n_max,
                cfg.flatness_trials,
                cfg.allow_flatness_override,
                &mut substream(cfg.seed, "normalize-flatness"),
            )?;
            report.flatness
        }
        _ => None,
    };
    let probe = kernel.random_state(depth, &mut substream(cfg.seed, "normalize-spectral-probe"));
    let spectral = spectral_radius_with(
        kernel,
        f,
        &probe,
        cfg.spectral_n_max,
        cfg.spectral_samples,
        Evaluation::Auto,
        derive_seed(cfg.seed, "normalize-spectral", 0),
    )?;
    let eigen = Eigenfunction::new(
        kernel,
        f,
        spectral.rho,
        cfg.eigen_n,
        cfg.eigen_particles,
        derive_seed(cfg.seed, "normalize-eigen", 0),
    )?;
    let sys = NormalizedSystem {
        sampler: Sampler::new(kernel, f),
        f: f.clone(),
        lambda: spectral.rho,
        spectral: Some(spectral),
        h: EigenSource::Estimated(Arc::new(eigen)),
        h_locality: match kernel {
            KernelSpec::FullShift(_) => f.locality().map(|r| r.saturating_sub(1)),
            _ => None,
        },
        depth,
        flatness,
        diagnostics: placeholder_diagnostics(cfg.tolerance),
    };
    sys.checked(cfg)
}
