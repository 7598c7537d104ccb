//! Exact ground truth for finite alphabets and finite-range potentials.
//!
//! A potential of range `≤ k` turns the transfer operator into a matrix on
//! the `s^k` cylinder words `w = (w_1, …, w_k)`: prepending `a` moves `w` to
//! `a·w = (a, w_1, …, w_{k−1})` and
//!
//! ```text
//! M[w → a·w] = μ(a)·e^{f(a·w)},    ℒφ = Mφ   for φ depending on k letters.
//! ```
//!
//! Word indices follow the potential table convention `Σ_i idx(w_i)·s^{k−i}`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{contract, LabError, Result};
use crate::limits::{correlation_series, solve_poisson, variance_estimate, PoissonConfig};
use crate::observable::Observable;
use crate::potential::Potential;
use crate::rng::{derive_seed, substream, substream_indexed};
use crate::space::{AlphabetTag, AprioriMeasure};
use crate::stats::{mean, variance};
use crate::transfer::{
    spectral_radius_with, transfer_n_with, Eigenfunction, Evaluation, KernelSpec, NormalizeConfig,
    NormalizedSystem,
};

/// Hard cap on the number of cylinder states.
pub const MAX_STATES: usize = 4096;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CylinderSpace {
    points: Vec<f64>,
    weights: Vec<f64>,
    k: usize,
    states: usize,
}

impl CylinderSpace {
    pub fn new(points: Vec<f64>, weights: Vec<f64>, k: usize) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() || k == 0 {
            return contract("cylinder space needs matching points/weights and k ≥ 1");
        }
        let states = points
            .len()
            .checked_pow(k as u32)
            .filter(|&n| n <= MAX_STATES);
        let Some(states) = states else {
            return Err(LabError::Refused(format!(
                "s^k exceeds the {MAX_STATES}-state cap"
            )));
        };
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return contract("a priori weights must be positive and sum to 1");
        }
        Ok(Self {
            points,
            weights,
            k,
            states,
        })
    }

    pub fn uniform(points: Vec<f64>, k: usize) -> Result<Self> {
        let s = points.len().max(1);
        Self::new(points, vec![1.0 / s as f64; s], k)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn alphabet_size(&self) -> usize {
        self.points.len()
    }

    pub fn range(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn measure(&self) -> Result<AprioriMeasure> {
        AprioriMeasure::finite(self.points.clone(), self.weights.clone())
    }

    /// Index of the word formed by the first `k` letters of `x`.
    pub fn index_of_coords(&self, x: &[f64]) -> usize {
        let s = self.points.len();
        x[..self.k].iter().fold(0, |idx, v| {
            idx * s + self.points.iter().position(|p| p == v).unwrap_or(0)
        })
    }

    /// Letters of word `idx`.
    pub fn word(&self, mut idx: usize) -> Vec<f64> {
        let s = self.points.len();
        let mut w = vec![0.0; self.k];
        for slot in w.iter_mut().rev() {
            *slot = self.points[idx % s];
            idx /= s;
        }
        w
    }

    /// Index of `a·w` for letter index `a`.
    pub fn successor(&self, w: usize, a: usize) -> usize {
        let top = self.states / self.points.len();
        a * top + w / self.points.len()
    }
}

/// Dense `s^k × s^k` matrix with the nonzero pattern of each row cached.
#[derive(Clone, Debug, Serialize)]
pub struct TransferMatrix {
    space: CylinderSpace,
    n: usize,
    entries: Vec<f64>,
    #[serde(skip)]
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransferMatrix {
    fn from_entries(space: CylinderSpace, entries: Vec<f64>) -> Self {
        let n = space.states();
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let v = entries[i * n + j];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self {
            space,
            n,
            entries,
            rows,
        }
    }

    pub fn space(&self) -> &CylinderSpace {
        &self.space
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// `(Mv)(i) = Σ_j M[i,j] v(j)`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, m)| m * v[j]).sum())
            .collect()
    }

    /// `(vM)(j) = Σ_i v(i) M[i,j]`.
    pub fn apply_left(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, vi) in self.rows.iter().zip(v) {
            for &(j, m) in row {
                out[j] += vi * m;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.apply(&vec![1.0; self.n])
    }

    /// Whether some power `M^p`, `p ≤ 2n`, has all entries positive.
    pub fn is_primitive(&self) -> bool {
        let n = self.n;
        // reach[i] = states reachable from i in exactly p steps.
        let mut reach: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                let mut r = vec![false; n];
                r[i] = true;
                r
            })
            .collect();
        for _ in 0..(2 * n).max(2) {
            for r in reach.iter_mut() {
                let mut next = vec![false; n];
                for (i, _) in r.iter().enumerate().filter(|(_, b)| **b) {
                    for &(j, _) in &self.rows[i] {
                        next[j] = true;
                    }
                }
                *r = next;
            }
            if reach.iter().all(|r| r.iter().all(|b| *b)) {
                return true;
            }
        }
        false
    }
}

/// `M[w → a·w] = μ(a)·e^{f(a·w)}`.
pub fn build_matrix(space: &CylinderSpace, f: &Potential) -> Result<TransferMatrix> {
    f.check_alphabet(AlphabetTag::Finite(space.alphabet_size()))?;
    match f.locality() {
        Some(r) if r <= space.range() && f.min_depth() <= space.range() => {}
        _ => return contract("potential range must not exceed the cylinder length k"),
    }
    let n = space.states();
    let mut entries = vec![0.0; n * n];
    for w in 0..n {
        for (a, mu) in space.weights().iter().enumerate() {
            let v = space.successor(w, a);
            entries[w * n + v] = mu * f.eval_coords(&space.word(v)).exp();
        }
    }
    Ok(TransferMatrix::from_entries(space.clone(), entries))
}

#[derive(Clone, Debug, Serialize)]
pub struct Perron {
    pub lambda: f64,
    /// Right eigenvector, `Mh = λh`.
    pub h: Vec<f64>,
    /// Left eigenvector, `νM = λν`, with `Σν = 1` and `ν·h = 1`.
    pub nu: Vec<f64>,
    pub iterations: usize,
}

fn normalize_sum(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    s
}

/// Power iteration until the relative change of the vector is below `1e−12`.
fn power(apply: impl Fn(&[f64]) -> Vec<f64>, n: usize) -> Result<(f64, Vec<f64>, usize)> {
    let mut v = vec![1.0 / n as f64; n];
    let mut lambda = 0.0;
    for it in 1..=POWER_MAX_ITER {
        let mut next = apply(&v);
        lambda = normalize_sum(&mut next);
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        v = next;
        if change < POWER_TOL {
            return Ok((lambda, v, it));
        }
    }
    Err(LabError::Aborted(format!(
        "power iteration did not converge (λ ≈ {lambda})"
    )))
}

pub fn perron(matrix: &TransferMatrix) -> Result<Perron> {
    if !matrix.is_primitive() {
        return Err(LabError::Refused("transfer matrix is not primitive".into()));
    }
    let n = matrix.size();
    let (lambda, mut h, it_r) = power(|v| matrix.apply(v), n)?;
    let (_, nu, it_l) = power(|v| matrix.apply_left(v), n)?;
    let nh: f64 = nu.iter().zip(&h).map(|(a, b)| a * b).sum();
    h.iter_mut().for_each(|x| *x /= nh);
    Ok(Perron {
        lambda,
        h,
        nu,
        iterations: it_r.max(it_l),
    })
}

/// Row-stochastic `P[w → w′] = M[w → w′]·h(w′)/(λ·h(w))`.
#[derive(Clone, Debug, Serialize)]
pub struct StochasticMatrix {
    inner: TransferMatrix,
}

impl StochasticMatrix {
    pub fn matrix(&self) -> &TransferMatrix {
        &self.inner
    }

    pub fn size(&self) -> usize {
        self.inner.size()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.inner.apply(v)
    }

    pub fn apply_left(&self, v: &[f64]) -> Vec<f64> {
        self.inner.apply_left(v)
    }

    /// Nonzero entries `(w′, P[w → w′])` of row `w`.
    pub fn row(&self, w: usize) -> &[(usize, f64)] {
        &self.inner.rows[w]
    }
}

pub fn exact_normalize(matrix: &TransferMatrix, lambda: f64, h: &[f64]) -> StochasticMatrix {
    let n = matrix.size();
    let mut entries = vec![0.0; n * n];
    for (i, row) in matrix.rows.iter().enumerate() {
        for &(j, m) in row {
            entries[i * n + j] = m * h[j] / (lambda * h[i]);
        }
    }
    StochasticMatrix {
        inner: TransferMatrix::from_entries(matrix.space.clone(), entries),
    }
}

/// `h ⊙ ν`, the stationary law of `P` on cylinder words.
pub fn stationary_vector(perron: &Perron) -> Vec<f64> {
    let mut pi: Vec<f64> = perron
        .h
        .iter()
        .zip(&perron.nu)
        .map(|(a, b)| a * b)
        .collect();
    normalize_sum(&mut pi);
    pi
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `Ax = b` by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[piv * n + col].abs() < 1e-300 {
            return Err(LabError::Aborted("singular linear system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / d;
            if factor != 0.0 {
                for k in col..n {
                    a[r * n + k] -= factor * a[col * n + k];
                }
                b[r] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

/// `υ` with `(I − P)υ = φ` and `π·υ = 0`, via `(I − P + 1πᵀ)υ = φ`.
pub fn exact_poisson(p: &StochasticMatrix, phi: &[f64], pi: &[f64]) -> Result<Vec<f64>> {
    let n = p.size();
    let scale = 1.0 + phi.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if dot(pi, phi).abs() > 1e-10 * scale {
        return Err(LabError::Refused(
            "Poisson equation needs a centred observable (π·φ = 0)".into(),
        ));
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = f64::from(u8::from(i == j)) - p.get(i, j) + pi[j];
        }
    }
    let upsilon = solve_dense(a, phi.to_vec())?;
    let residual = poisson_residual(p, &upsilon, phi);
    if residual > 1e-8 * scale {
        return Err(LabError::Aborted(format!(
            "Poisson residual {residual:.3e} above 1e-8"
        )));
    }
    Ok(upsilon)
}

/// `max_w |υ(w) − Pυ(w) − φ(w)|`.
pub fn poisson_residual(p: &StochasticMatrix, upsilon: &[f64], phi: &[f64]) -> f64 {
    let pu = p.apply(upsilon);
    upsilon
        .iter()
        .zip(&pu)
        .zip(phi)
        .map(|((u, q), f)| (u - q - f).abs())
        .fold(0.0, f64::max)
}

/// `π(υ²) − π((Pυ)²)`.
pub fn sigma2_from_poisson(p: &StochasticMatrix, pi: &[f64], upsilon: &[f64]) -> f64 {
    let pu = p.apply(upsilon);
    let a: f64 = pi.iter().zip(upsilon).map(|(w, u)| w * u * u).sum();
    let b: f64 = pi.iter().zip(&pu).map(|(w, u)| w * u * u).sum();
    a - b
}

/// `π(φ·Pⁿφ)` for `n = 0..=n_max`.
pub fn exact_correlations(p: &StochasticMatrix, phi: &[f64], pi: &[f64], n_max: usize) -> Vec<f64> {
    let mut v = phi.to_vec();
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            v = p.apply(&v);
        }
        out.push(
            pi.iter()
                .zip(phi)
                .zip(&v)
                .map(|((w, a), b)| w * a * b)
                .sum(),
        );
    }
    out
}

/// `π(φ²) + 2 Σ_{n=1}^{n_max} π(φ·Pⁿφ)` for centred `φ`.
pub fn autocovariance_sum(p: &StochasticMatrix, phi: &[f64], pi: &[f64], n_max: usize) -> f64 {
    let c = exact_correlations(p, phi, pi, n_max);
    c[0] + 2.0 * c[1..].iter().sum::<f64>()
}

/// `|λ₂|/λ₁` of the matrix behind `P` by power iteration on `P − 1πᵀ`.
pub fn second_eigenvalue_modulus(p: &StochasticMatrix, pi: &[f64]) -> f64 {
    let n = p.size();
    let deflate = |v: &[f64]| {
        let pv = p.apply(v);
        let m = dot(pi, v);
        pv.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = (0..n).map(|i| ((i + 1) as f64 * 0.7548).sin()).collect();
    let m = dot(pi, &v);
    v.iter_mut().for_each(|x| *x -= m);
    let (burn, span) = (200, 2000);
    let mut log_growth = 0.0;
    for it in 0..burn + span {
        let next = deflate(&v);
        let nn = norm(&next);
        if nn < 1e-290 {
            return 0.0;
        }
        let nv = norm(&v);
        if it >= burn {
            log_growth += (nn / nv).ln();
        }
        v = next.into_iter().map(|x| x / nn).collect();
    }
    (log_growth / span as f64).exp()
}

/// `Mʲ1` for `j = 0..=n`.
pub fn powers_of_one(matrix: &TransferMatrix, n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0; matrix.size()]];
    for j in 1..=n {
        let next = matrix.apply(&out[j - 1]);
        out.push(next);
    }
    out
}

/// Cesàro `h_n = (1/n) Σ_{j=0}^{n} ρ^{−j} Mʲ1`.
pub fn cesaro_eigenfunction(matrix: &TransferMatrix, rho: f64, n: usize) -> Vec<f64> {
    let pw = powers_of_one(matrix, n);
    (0..matrix.size())
        .map(|w| {
            (0..=n)
                .map(|j| pw[j][w] * rho.powi(-(j as i32)))
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Law of `Σ_{j=1}^{n} φ(Ψ_j)` for the chain `P` started from `start`
/// (a distribution on words), as sorted `(value, probability)` pairs.
/// Values are merged on a `10⁻⁹` grid.
pub fn path_sum_distribution(
    p: &StochasticMatrix,
    phi: &[f64],
    start: &[f64],
    n: usize,
) -> Vec<(f64, f64)> {
    let key = |v: f64| (v * 1e9).round() as i64;
    let mut layer: BTreeMap<(usize, i64), (f64, f64)> = BTreeMap::new();
    for (w, &pr) in start.iter().enumerate() {
        if pr > 0.0 {
            layer.insert((w, 0), (0.0, pr));
        }
    }
    for _ in 0..n {
        let mut next: BTreeMap<(usize, i64), (f64, f64)> = BTreeMap::new();
        for (&(w, _), &(val, pr)) in &layer {
            for &(v, q) in p.row(w) {
                let nv = val + phi[v];
                let e = next.entry((v, key(nv))).or_insert((nv, 0.0));
                e.1 += pr * q;
            }
        }
        layer = next;
    }
    let mut merged: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for (&(_, k), &(val, pr)) in &layer {
        let e = merged.entry(k).or_insert((val, 0.0));
        e.1 += pr;
    }
    merged.into_values().collect()
}

/// Values of a cylinder observable on every word.
pub fn observable_vector(space: &CylinderSpace, phi: &Observable) -> Vec<f64> {
    (0..space.states())
        .map(|w| phi.eval(&space.word(w)))
        .collect()
}

/// Everything the oracle knows about one finite-range system.
#[derive(Clone, Debug)]
pub struct OracleSystem {
    pub space: CylinderSpace,
    pub potential: Potential,
    pub matrix: TransferMatrix,
    pub perron: Perron,
    pub p: StochasticMatrix,
    pub pi: Vec<f64>,
}

impl OracleSystem {
    pub fn new(space: &CylinderSpace, f: &Potential) -> Result<Self> {
        let matrix = build_matrix(space, f)?;
        let perron = perron(&matrix)?;
        let p = exact_normalize(&matrix, perron.lambda, &perron.h);
        let pi = stationary_vector(&perron);
        Ok(Self {
            space: space.clone(),
            potential: f.clone(),
            matrix,
            perron,
            p,
            pi,
        })
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        Ok(KernelSpec::FullShift(self.space.measure()?))
    }

    /// `π(φ)` for an observable of locality `≤ k`.
    pub fn mean(&self, phi: &Observable) -> f64 {
        dot(&self.pi, &observable_vector(&self.space, phi))
    }

    /// The engine's normalized system with the exact eigenpair plugged in.
    pub fn normalized_system(
        &self,
        depth: usize,
        cfg: &NormalizeConfig,
    ) -> Result<NormalizedSystem> {
        if depth < self.space.range() + 1 {
            return contract("oracle system needs depth ≥ k + 1");
        }
        let space = Arc::new(self.space.clone());
        let h = Arc::new(self.perron.h.clone());
        NormalizedSystem::from_exact(
            &self.kernel()?,
            &self.potential,
            self.perron.lambda,
            move |x| h[space.index_of_coords(x)],
            Some(self.space.range()),
            depth,
            cfg,
        )
    }
}

/// Quantity compared in one oracle-grid case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GridQuantity {
    /// `ℒⁿ1(x)` by path sampling.
    TransferPower,
    /// `ln ρ̂` by regression.
    SpectralRadius,
    /// `ĥ(x)/ĥ(y)` against the exact Cesàro average with the same `n` and `ρ`.
    EigenRatio,
    /// `σ̂²` from the Poisson solution.
    Variance,
    /// `μ̂(φ·Pⁿφ)`.
    Correlation,
}

const GRID_QUANTITIES: [GridQuantity; 5] = [
    GridQuantity::TransferPower,
    GridQuantity::SpectralRadius,
    GridQuantity::EigenRatio,
    GridQuantity::Variance,
    GridQuantity::Correlation,
];

#[derive(Clone, Debug, Serialize)]
pub struct OracleGridConfig {
    pub cases: usize,
    pub seed: u64,
    pub depth: usize,
    pub transfer_samples: usize,
    pub transfer_n_max: usize,
    pub spectral_n_max: usize,
    pub spectral_samples: usize,
    pub eigen_n: usize,
    pub eigen_particles: usize,
    pub eigen_replicates: usize,
    pub chain_steps: usize,
    pub poisson_terms: usize,
    pub sigmas: f64,
    /// Required fraction of cases within `sigmas` standard errors.
    pub required_rate: f64,
}

impl Default for OracleGridConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            seed: 0,
            depth: 8,
            transfer_samples: 4000,
            transfer_n_max: 12,
            spectral_n_max: 16,
            spectral_samples: 4000,
            eigen_n: 32,
            eigen_particles: 256,
            eigen_replicates: 32,
            chain_steps: 40_000,
            poisson_terms: 30,
            sigmas: 3.0,
            required_rate: 0.99,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridCase {
    pub index: usize,
    pub system: String,
    pub quantity: GridQuantity,
    /// `n`, lag or word index, depending on the quantity.
    pub parameter: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
    /// `|estimate − exact| / std_error`.
    pub z: f64,
    pub within: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleGridReport {
    pub cases: Vec<GridCase>,
    pub within: usize,
    pub rate: f64,
    pub required_rate: f64,
    pub accepted: bool,
}

/// The twelve grid systems: alphabets of two and three letters, ranges one
/// and two, and three potential families (linear, coupled, random table).
pub fn grid_systems(seed: u64) -> Result<Vec<(String, OracleSystem)>> {
    let mut out = Vec::new();
    for (s, points) in [(2usize, vec![0.0, 1.0]), (3, vec![0.0, 0.5, 1.0])] {
        for k in [1usize, 2] {
            let space = CylinderSpace::uniform(points.clone(), k)?;
            let linear = Potential::finite_range(points.clone(), k, |v| 0.8 * v[0])?;
            let coupled = Potential::finite_range(points.clone(), k, |v| {
                let last = v[v.len() - 1];
                0.9 * v[0] * last - 0.3 * last
            })?;
            let mut rng = substream_indexed(seed, "grid-table", (10 * s + k) as u64);
            let table: Vec<f64> = (0..space.states())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let sp = space.clone();
            let random =
                Potential::finite_range(points.clone(), k, move |v| table[sp.index_of_coords(v)])?;
            for (name, f) in [("linear", linear), ("coupled", coupled), ("table", random)] {
                out.push((format!("s{s}-k{k}-{name}"), OracleSystem::new(&space, &f)?));
            }
        }
    }
    Ok(out)
}

fn grid_observable(o: &OracleSystem, seed: u64) -> Observable {
    let mut rng = substream(seed, "grid-observable");
    let table: Vec<f64> = (0..o.space.states())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let sp = o.space.clone();
    let raw = Observable::new("table", 1.0, Some(sp.range()), move |x| {
        table[sp.index_of_coords(x)]
    });
    raw.centered(o.mean(&raw))
}

fn grid_case(
    index: usize,
    name: &str,
    o: &OracleSystem,
    cfg: &OracleGridConfig,
) -> Result<GridCase> {
    let quantity = GRID_QUANTITIES[index % GRID_QUANTITIES.len()];
    let seed = derive_seed(cfg.seed, "oracle-case", index as u64);
    let mut rng = substream(seed, "parameters");
    let kernel = o.kernel()?;
    let f = &o.potential;
    let (parameter, estimate, std_error, exact) = match quantity {
        GridQuantity::TransferPower => {
            let n = rng.random_range(1..=cfg.transfer_n_max);
            let x = kernel.random_state(cfg.depth, &mut rng);
            let e = transfer_n_with(
                &kernel,
                f,
                &Observable::constant(1.0),
                &x,
                n,
                cfg.transfer_samples,
                Evaluation::Sampled,
                rng.random(),
            )?;
            let exact = powers_of_one(&o.matrix, n)[n][o.space.index_of_coords(x.coords())];
            (n, e.value, e.std_error, exact)
        }
        GridQuantity::SpectralRadius => {
            let x = kernel.random_state(cfg.depth, &mut rng);
            let e = spectral_radius_with(
                &kernel,
                f,
                &x,
                cfg.spectral_n_max,
                cfg.spectral_samples,
                Evaluation::Sampled,
                rng.random(),
            )?;
            (
                cfg.spectral_n_max,
                e.log_rho,
                e.log_rho_se,
                o.perron.lambda.ln(),
            )
        }
        GridQuantity::EigenRatio => {
            let states = o.space.states();
            let w = rng.random_range(0..states);
            let v = (w + rng.random_range(1..states)) % states;
            let pad = |idx: usize| {
                let mut c = o.space.word(idx);
                c.resize(cfg.depth, o.space.points()[0]);
                c
            };
            let (x, y) = (pad(w), pad(v));
            let lambda = o.perron.lambda;
            let ratios = (0..cfg.eigen_replicates)
                .map(|r| -> Result<f64> {
                    let h = Eigenfunction::new(
                        &kernel,
                        f,
                        lambda,
                        cfg.eigen_n,
                        cfg.eigen_particles,
                        derive_seed(seed, "eigen-replicate", r as u64),
                    )?;
                    Ok(h.eval(&x) / h.eval(&y))
                })
                .collect::<Result<Vec<_>>>()?;
            let ces = cesaro_eigenfunction(&o.matrix, lambda, cfg.eigen_n);
            let se = (variance(&ratios) / ratios.len() as f64).sqrt();
            (w, mean(&ratios), se, ces[w] / ces[v])
        }
        GridQuantity::Variance => {
            let phi = grid_observable(o, seed);
            let sys = o.normalized_system(cfg.depth, &NormalizeConfig::default())?;
            let pcfg = PoissonConfig {
                chains: 64,
                probes: 0,
                seed,
                ..PoissonConfig::default()
            };
            let sol = solve_poisson(&sys, &phi, None, Some(cfg.poisson_terms), &pcfg)?;
            let r = variance_estimate(&sol, cfg.chain_steps / 4, 128, 16, seed)?;
            let vec = observable_vector(&o.space, &phi);
            let ups = exact_poisson(&o.p, &vec, &o.pi)?;
            (
                cfg.poisson_terms,
                r.sigma2,
                r.sigma2_se,
                sigma2_from_poisson(&o.p, &o.pi, &ups),
            )
        }
        GridQuantity::Correlation => {
            let lag = rng.random_range(1..=3usize);
            let phi = grid_observable(o, seed);
            let sys = o.normalized_system(cfg.depth, &NormalizeConfig::default())?;
            let cs = correlation_series(&sys, &phi, lag, cfg.chain_steps, 16, seed)?;
            let vec = observable_vector(&o.space, &phi);
            let exact = exact_correlations(&o.p, &vec, &o.pi, lag)[lag];
            (lag, cs.points[lag].value, cs.points[lag].std_error, exact)
        }
    };
    let diff = (estimate - exact).abs();
    let (z, within) = if std_error > 0.0 {
        (diff / std_error, diff <= cfg.sigmas * std_error)
    } else {
        let ok = diff <= 1e-9 * exact.abs().max(1.0);
        (if ok { 0.0 } else { f64::INFINITY }, ok)
    };
    Ok(GridCase {
        index,
        system: name.to_string(),
        quantity,
        parameter,
        estimate,
        std_error,
        exact,
        z,
        within,
    })
}

/// Runs the oracle-versus-Monte-Carlo grid. Case `i` uses system `i mod 12`
/// and quantity `i mod 5`, so every pairing occurs; each case draws its own
/// parameters from an indexed substream.
pub fn oracle_grid(cfg: &OracleGridConfig) -> Result<OracleGridReport> {
    let systems = grid_systems(cfg.seed)?;
    let cases = (0..cfg.cases)
        .into_par_iter()
        .map(|i| {
            let (name, o) = &systems[i % systems.len()];
            grid_case(i, name, o, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let within = cases.iter().filter(|c| c.within).count();
    let rate = within as f64 / cases.len().max(1) as f64;
    Ok(OracleGridReport {
        within,
        rate,
        required_rate: cfg.required_rate,
        accepted: rate >= cfg.required_rate,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(k: usize) -> CylinderSpace {
        CylinderSpace::uniform(vec![0.0, 1.0], k).unwrap()
    }

    fn pair() -> Potential {
        Potential::finite_range(vec![0.0, 1.0], 2, |v| v[0] * v[1]).unwrap()
    }

    #[test]
    fn word_indexing_round_trips() {
        let sp = CylinderSpace::uniform(vec![0.0, 1.0, 2.0], 2).unwrap();
        for w in 0..sp.states() {
            assert_eq!(sp.index_of_coords(&sp.word(w)), w);
        }
        // a·(w_1, w_2) = (a, w_1).
        let w = sp.index_of_coords(&[1.0, 2.0]);
        assert_eq!(sp.word(sp.successor(w, 2)), vec![2.0, 1.0]);
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(
            CylinderSpace::uniform(vec![0.0, 1.0, 2.0], 8),
            Err(LabError::Refused(_))
        ));
    }

    #[test]
    fn constant_potential_matrix_and_perron() {
        let c = 0.4;
        let m = build_matrix(&bits(2), &Potential::Constant(c)).unwrap();
        for r in m.row_sums() {
            assert!((r - c.exp()).abs() < 1e-14);
        }
        let p = perron(&m).unwrap();
        assert!((p.lambda - c.exp()).abs() < 1e-12);
        for (h, nu) in p.h.iter().zip(&p.nu) {
            assert!((h - 1.0).abs() < 1e-10 && (nu - 0.25).abs() < 1e-12);
        }
        let pm = exact_normalize(&m, p.lambda, &p.h);
        for i in 0..4 {
            for j in 0..4 {
                assert!((pm.get(i, j) - m.get(i, j) / c.exp()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn field_potential_closed_form() {
        let beta = 1.0;
        let f = Potential::finite_range(vec![0.0, 1.0], 1, move |v| beta * v[0]).unwrap();
        let m = build_matrix(&bits(1), &f).unwrap();
        for i in 0..2 {
            assert!((m.get(i, 0) - 0.5).abs() < 1e-15);
            assert!((m.get(i, 1) - 0.5 * beta.exp()).abs() < 1e-15);
        }
        let p = perron(&m).unwrap();
        assert!((p.lambda - (1.0 + 1f64.exp()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn pair_potential_matrix_by_hand() {
        // Words (w1,w2) indexed 2·w1 + w2; a·w = (a, w1), entry ½·e^{a·w1}.
        let m = build_matrix(&bits(2), &pair()).unwrap();
        let e = 1f64.exp();
        let expected = [
            [0.5, 0.0, 0.5, 0.0],
            [0.5, 0.0, 0.5, 0.0],
            [0.0, 0.5, 0.0, 0.5 * e],
            [0.0, 0.5, 0.0, 0.5 * e],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((m.get(i, j) - v).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn potential_shift_scales_lambda_only() {
        let t = 0.37;
        let f = Potential::finite_range(vec![0.0, 1.0, 2.0], 2, |v| (v[0] - v[1]).cos()).unwrap();
        let g = Potential::finite_range(vec![0.0, 1.0, 2.0], 2, move |v| (v[0] - v[1]).cos() + t)
            .unwrap();
        let sp = CylinderSpace::uniform(vec![0.0, 1.0, 2.0], 2).unwrap();
        let a = perron(&build_matrix(&sp, &f).unwrap()).unwrap();
        let b = perron(&build_matrix(&sp, &g).unwrap()).unwrap();
        assert!((b.lambda / a.lambda - t.exp()).abs() < 1e-11);
        for (x, y) in a.h.iter().zip(&b.h) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_and_stationarity() {
        let o = OracleSystem::new(&bits(2), &pair()).unwrap();
        for r in o.p.matrix().row_sums() {
            assert!((r - 1.0).abs() < 1e-10);
        }
        let moved = o.p.apply_left(&o.pi);
        for (a, b) in moved.iter().zip(&o.pi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_primitive_is_refused() {
        let sp = bits(1);
        let m = TransferMatrix::from_entries(sp, vec![0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(perron(&m), Err(LabError::Refused(_))));
    }

    #[test]
    fn poisson_examples() {
        let o = OracleSystem::new(&bits(2), &pair()).unwrap();
        let zero = exact_poisson(&o.p, &[0.0; 4], &o.pi).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-15));
        let uncentred = exact_poisson(&o.p, &[1.0, 0.0, 0.0, 0.0], &o.pi);
        assert!(matches!(uncentred, Err(LabError::Refused(_))));

        // iid: every row of P equals π, so Pφ = 0 and υ = φ.
        let iid = OracleSystem::new(&bits(2), &Potential::Constant(0.0)).unwrap();
        let phi: Vec<f64> = (0..4).map(|w| iid.space.word(w)[0] - 0.5).collect();
        let u = exact_poisson(&iid.p, &phi, &iid.pi).unwrap();
        for (a, b) in u.iter().zip(&phi) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((sigma2_from_poisson(&iid.p, &iid.pi, &u) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigma2_formulas_agree_on_pair_system() {
        let o = OracleSystem::new(&bits(2), &pair()).unwrap();
        let raw: Vec<f64> = (0..4).map(|w| o.space.word(w)[0]).collect();
        let m = dot(&o.pi, &raw);
        let phi: Vec<f64> = raw.iter().map(|v| v - m).collect();
        let u = exact_poisson(&o.p, &phi, &o.pi).unwrap();
        assert!(poisson_residual(&o.p, &u, &phi) < 1e-12);
        let a = sigma2_from_poisson(&o.p, &o.pi, &u);
        let b = autocovariance_sum(&o.p, &phi, &o.pi, 200);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!(a > 0.0);
    }

    #[test]
    fn correlation_examples() {
        let iid = OracleSystem::new(&bits(2), &Potential::Constant(0.0)).unwrap();
        let phi: Vec<f64> = (0..4).map(|w| iid.space.word(w)[0] - 0.5).collect();
        let c = exact_correlations(&iid.p, &phi, &iid.pi, 5);
        assert!((c[0] - 0.25).abs() < 1e-15);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-15));

        let f =
            Potential::finite_range(vec![0.0, 1.0, 2.0], 2, |v| 0.8 * (v[0] - v[1]).abs()).unwrap();
        let o = OracleSystem::new(&CylinderSpace::uniform(vec![0.0, 1.0, 2.0], 2).unwrap(), &f)
            .unwrap();
        let raw: Vec<f64> = (0..9).map(|w| o.space.word(w)[0]).collect();
        let m = dot(&o.pi, &raw);
        let phi: Vec<f64> = raw.iter().map(|v| v - m).collect();
        let c = exact_correlations(&o.p, &phi, &o.pi, 61);
        let l2 = second_eigenvalue_modulus(&o.p, &o.pi);
        // Decay rate: successive ratios converge geometrically to |λ₂|/λ₁.
        assert!(
            ((c[61] / c[60]).abs() - l2).abs() < 1e-3,
            "{} vs {l2}",
            c[61] / c[60]
        );
        // The n-th root converges too, at rate O(1/n).
        assert!((c[60].abs().powf(1.0 / 60.0) - l2).abs() < 0.1);
    }

    #[test]
    fn cesaro_of_constant_potential() {
        let m = build_matrix(&bits(1), &Potential::Constant(0.0)).unwrap();
        let h = cesaro_eigenfunction(&m, 1.0, 10);
        assert!(h.iter().all(|v| (v - 1.1).abs() < 1e-14));
    }

    #[test]
    fn path_sum_law_of_iid_bits_is_binomial() {
        let iid = OracleSystem::new(&bits(1), &Potential::Constant(0.0)).unwrap();
        let phi = vec![0.0, 1.0];
        let law = path_sum_distribution(&iid.p, &phi, &iid.pi, 6);
        assert_eq!(law.len(), 7);
        let binom = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];
        for ((v, p), c) in law.iter().zip(binom) {
            assert!((p - c / 64.0).abs() < 1e-15, "{v}");
        }
    }

    proptest! {
        #[test]
        fn random_tables_normalize(seed in 0u64..200, s in 2usize..4, k in 1usize..3) {
            let pts: Vec<f64> = (0..s).map(|i| i as f64).collect();
            let salt = seed as f64;
            let f = Potential::finite_range(pts.clone(), k, move |v| {
                (v.iter().enumerate().map(|(i, a)| (i as f64 + 1.3) * a).sum::<f64>() + salt).sin()
            }).unwrap();
            let o = OracleSystem::new(&CylinderSpace::uniform(pts, k).unwrap(), &f).unwrap();
            let mh = o.matrix.apply(&o.perron.h);
            for (a, b) in mh.iter().zip(&o.perron.h) {
                prop_assert!((a - o.perron.lambda * b).abs() < 1e-9 * o.perron.lambda * b);
            }
            for r in o.p.matrix().row_sums() {
                prop_assert!((r - 1.0).abs() < 1e-10);
            }
            prop_assert!((o.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(o.perron.h.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn grid_covers_every_system_and_quantity() {
        let cfg = OracleGridConfig {
            cases: 60,
            ..OracleGridConfig::default()
        };
        let r = oracle_grid(&cfg).unwrap();
        let mut pairs: Vec<(String, String)> = r
            .cases
            .iter()
            .map(|c| (c.system.clone(), format!("{:?}", c.quantity)))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 60);
        assert!(r.rate >= 0.95, "{r:?}");
    }

    #[test]
    fn grid_is_deterministic() {
        let cfg = OracleGridConfig {
            cases: 10,
            seed: 3,
            ..OracleGridConfig::default()
        };
        let a = format!("{:?}", oracle_grid(&cfg).unwrap());
        let b = format!("{:?}", oracle_grid(&cfg).unwrap());
        assert_eq!(a, b);
    }
}
