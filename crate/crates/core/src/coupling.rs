//! The natural coupling on full shifts, weighted coupling costs,
//! `W_ω` between finite measures, particle pushforwards by `ℒ*` and
//! polynomial decay fits.
//!
//! Both orbits of a coupled pair are driven by the same prepended word, so
//! `x_n` and `y_n` share their first `n` points and
//! `d(x_n, y_n) ≤ 2^{-n} d(x, y) + 2^{-D}` holds sample by sample.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chains::EmpiricalMeasure;
use crate::error::{contract, LabError, Result};
use crate::potential::{ModulusOfContinuity, Potential};
use crate::rng::{substream, substream_indexed};
use crate::space::{distance_tail_bound, Config, PathBuffer};
use crate::stats::fit_line;
use crate::transfer::{KernelSpec, NormalizedSystem, Sampler, TransferEstimate, Walk};

/// Atom count up to which [`wasserstein_estimate`] solves the assignment exactly.
pub const EXACT_ASSIGNMENT_ATOMS: usize = 256;
/// Largest number of leaves [`exact_pushforward`] enumerates.
pub const MAX_PUSHFORWARD_ATOMS: usize = 4096;
const BLOCK: usize = 256;
/// Independent clouds averaged into the resampling noise floor.
const FLOOR_CLOUDS: usize = 4;

/// One draw of the natural coupling `Πⁿ_{x,y}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPath {
    /// Letters in the order drawn: `w_1` first.
    pub word: Vec<Vec<f64>>,
    pub x: Config,
    pub y: Config,
    pub x_n: Config,
    pub y_n: Config,
    pub n: usize,
}

impl CoupledPath {
    pub fn distance_before(&self) -> f64 {
        self.x
            .tag()
            .coords_distance(self.x.coords(), self.y.coords())
    }

    pub fn distance_after(&self) -> f64 {
        self.x
            .tag()
            .coords_distance(self.x_n.coords(), self.y_n.coords())
    }

    /// `2^{-n} d(x, y) + 2^{-D}`.
    pub fn contraction_bound(&self) -> f64 {
        0.5f64.powi(self.n as i32) * self.distance_before() + distance_tail_bound(self.x.depth())
    }

    pub fn satisfies_contraction(&self) -> bool {
        self.distance_after() <= self.contraction_bound()
    }

    /// True when `x_n` and `y_n` agree on their first `min(n, D)` points.
    pub fn shares_prefix(&self) -> bool {
        let dim = self.x.tag().point_dim();
        let len = self.n.min(self.x.depth()) * dim;
        self.x_n.coords()[..len] == self.y_n.coords()[..len]
    }
}

/// Draws `w ∼ μⁿ` and returns `(w·x, w·y)` truncated to depth `D`.
pub fn sample_coupled<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    x: &Config,
    y: &Config,
    n: usize,
    rng: &mut R,
) -> Result<CoupledPath> {
    let KernelSpec::FullShift(measure) = kernel else {
        return contract("the natural coupling is defined on full shifts");
    };
    if x.tag() != kernel.tag() || y.tag() != kernel.tag() {
        return contract("coupled configurations must live on the kernel's alphabet");
    }
    if x.depth() != y.depth() {
        return contract(format!("depth mismatch {} vs {}", x.depth(), y.depth()));
    }
    if n > x.depth() {
        return contract(format!("coupling length {n} exceeds depth {}", x.depth()));
    }
    let dim = kernel.point_dim();
    let mut word = Vec::with_capacity(n);
    let mut xb = PathBuffer::new(dim, x.depth(), n.max(1));
    let mut yb = PathBuffer::new(dim, y.depth(), n.max(1));
    xb.reset(x.coords());
    yb.reset(y.coords());
    let mut letter = vec![0.0; dim];
    for _ in 0..n {
        measure.sample_into(rng, &mut letter);
        xb.prepend(&letter);
        yb.prepend(&letter);
        word.push(letter.clone());
    }
    let x_n = Config::new(measure.alphabet(), xb.current().to_vec())?;
    let y_n = Config::new(measure.alphabet(), yb.current().to_vec())?;
    Ok(CoupledPath {
        word,
        x: x.clone(),
        y: y.clone(),
        x_n,
        y_n,
        n,
    })
}

/// Weights `e^{fⁿ(x̄)}` along the `x` orbit of a coupled pair.
#[derive(Clone, Copy, Debug)]
pub enum CostWeight<'a> {
    Raw(&'a Potential),
    /// `f̄ⁿ(x̄) = fⁿ(x̄) + ln ĥ(x_n) − ln ĥ(x) − n ln λ̂`.
    Normalized(&'a NormalizedSystem),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostPoint {
    pub n: usize,
    pub value: f64,
    pub std_error: f64,
    /// `d(x_n, y_n)` averaged over the words.
    pub mean_distance: f64,
}

/// `∫ ω(d(x_n, y_n)) e^{fⁿ(x̄)} dΠⁿ_{x,y}` for each `n` in `ns`, from `k`
/// shared words. Potentials read the leading `D_f` points, where `D_f` is
/// the normalized system's depth or the configuration depth.
#[allow(clippy::too_many_arguments)]
pub fn coupling_cost_series(
    kernel: &KernelSpec,
    weight: CostWeight<'_>,
    omega: &ModulusOfContinuity,
    x: &Config,
    y: &Config,
    ns: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<CostPoint>> {
    if !matches!(kernel, KernelSpec::FullShift(_)) {
        return contract("coupling costs are defined on full shifts");
    }
    if x.tag() != kernel.tag() || y.tag() != kernel.tag() || x.depth() != y.depth() {
        return contract("coupled configurations must share alphabet and depth");
    }
    if k == 0 || ns.is_empty() {
        return contract("coupling costs need k ≥ 1 and at least one n");
    }
    let n_max = *ns.iter().max().unwrap_or(&0);
    if n_max > x.depth() {
        return contract(format!(
            "coupling length {n_max} exceeds depth {}",
            x.depth()
        ));
    }
    let dim = kernel.point_dim();
    let (f, sampler, f_len) = match weight {
        CostWeight::Raw(f) => (f.clone(), Sampler::new(kernel, f), x.depth() * dim),
        CostWeight::Normalized(sys) => {
            if sys.depth() > x.depth() {
                return contract("configurations are shallower than the normalized system");
            }
            (
                sys.potential().clone(),
                sys.sampler().clone(),
                sys.depth() * dim,
            )
        }
    };
    f.check_alphabet(kernel.tag())?;
    let (log_hx, log_lambda) = match weight {
        CostWeight::Raw(_) => (0.0, 0.0),
        CostWeight::Normalized(sys) => (sys.h(x.coords()).ln(), sys.lambda().ln()),
    };
    let tag = kernel.tag();
    let upl = sampler.uniforms_per_step();
    let mut slot = vec![usize::MAX; n_max + 1];
    for (i, &n) in ns.iter().enumerate() {
        slot[n] = i;
    }
    let d0 = tag.coords_distance(x.coords(), y.coords());
    let blocks = k.div_ceil(BLOCK);
    let partial: Vec<Vec<[f64; 3]>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream_indexed(seed, "coupling-paths", b as u64);
            let mut acc = vec![[0.0; 3]; ns.len()];
            let mut walk = Walk::new(kernel, x.depth(), n_max);
            let mut yb = PathBuffer::new(dim, y.depth(), n_max.max(1));
            let mut u = vec![0.0; upl];
            let paths = BLOCK.min(k - b * BLOCK);
            for _ in 0..paths {
                walk.reset(x.coords());
                yb.reset(y.coords());
                let mut log_w = 0.0;
                if slot[0] != usize::MAX {
                    let s = &mut acc[slot[0]];
                    let v = omega.eval(d0);
                    s[0] += v;
                    s[1] += v * v;
                    s[2] += d0;
                }
                for j in 1..=n_max {
                    for v in u.iter_mut() {
                        *v = rng.random();
                    }
                    log_w += sampler.step(&mut walk, &u);
                    let cur = walk.current();
                    yb.prepend(&cur[..dim]);
                    log_w += f.eval_coords(&cur[..f_len]);
                    if slot[j] == usize::MAX {
                        continue;
                    }
                    let d = tag.coords_distance(cur, yb.current());
                    let w = match weight {
                        CostWeight::Raw(_) => log_w.exp(),
                        CostWeight::Normalized(sys) => {
                            (log_w + sys.h(cur).ln() - log_hx - j as f64 * log_lambda).exp()
                        }
                    };
                    let v = omega.eval(d) * w;
                    let s = &mut acc[slot[j]];
                    s[0] += v;
                    s[1] += v * v;
                    s[2] += d;
                }
            }
            acc
        })
        .collect();
    let kf = k as f64;
    Ok(ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let (mut s, mut s2, mut sd) = (0.0, 0.0, 0.0);
            for p in &partial {
                s += p[i][0];
                s2 += p[i][1];
                sd += p[i][2];
            }
            let mean = s / kf;
            let var = if k > 1 {
                ((s2 - kf * mean * mean) / (kf - 1.0)).max(0.0)
            } else {
                0.0
            };
            CostPoint {
                n,
                value: mean,
                std_error: (var / kf).sqrt(),
                mean_distance: sd / kf,
            }
        })
        .collect())
}

/// Single-`n` form of [`coupling_cost_series`].
#[allow(clippy::too_many_arguments)]
pub fn weighted_coupling_cost(
    kernel: &KernelSpec,
    weight: CostWeight<'_>,
    omega: &ModulusOfContinuity,
    x: &Config,
    y: &Config,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<TransferEstimate> {
    let p = coupling_cost_series(kernel, weight, omega, x, y, &[n], k, seed)?[0];
    Ok(TransferEstimate {
        value: p.value,
        std_error: p.std_error,
        samples: k,
        exact: false,
    })
}

/// `F(n, r) = B r / (n r^α + b)^{1/α}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayFunction {
    pub big_b: f64,
    pub small_b: f64,
    pub alpha: f64,
}

/// Worst observed value of each defining property on a grid; every entry is
/// `≤ 0` (up to rounding) for a decay function.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayLedger {
    /// `max F(n+1, r) − F(n, r)`.
    pub increase_in_n: f64,
    /// `max F(n, r) − F(n, r')` over `r < r'`.
    pub decrease_in_r: f64,
    /// `max` midpoint concavity defect in `r`.
    pub concavity_defect: f64,
    /// `max F(n, r)·n^{1/α}/B − 1`, certifying `F → 0` as `n → ∞`.
    pub tail_defect: f64,
    /// `max F(n, r)/(C r) − 1` with `C = B/b^{1/α}`.
    pub linear_defect: f64,
    /// `max F(k+n, r) − F(k, F(n, r))`.
    pub semigroup_defect: f64,
    pub linear_constant: f64,
    pub holds: bool,
}

impl DecayFunction {
    pub fn new(big_b: f64, small_b: f64, alpha: f64) -> Result<Self> {
        if !(big_b >= 1.0) || !(small_b > 0.0 && small_b < 1.0) || !(alpha > 0.0) {
            return contract("decay function needs B ≥ 1, b ∈ (0, 1), α > 0");
        }
        Ok(Self {
            big_b,
            small_b,
            alpha,
        })
    }

    #[inline]
    pub fn eval(&self, n: f64, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        self.big_b * r / (n * r.powf(self.alpha) + self.small_b).powf(1.0 / self.alpha)
    }

    /// `C = B / b^{1/α}` with `F(n, r) ≤ C r`.
    pub fn linear_constant(&self) -> f64 {
        self.big_b / self.small_b.powf(1.0 / self.alpha)
    }

    /// Checks the defining properties for `n ≤ n_max` and `r` on a log grid of
    /// `r_points` values in `[r_min, r_max]`.
    pub fn ledger(&self, n_max: usize, r_min: f64, r_max: f64, r_points: usize) -> DecayLedger {
        let rs: Vec<f64> = (0..r_points)
            .map(|i| {
                let t = i as f64 / (r_points.max(2) - 1) as f64;
                r_min * (r_max / r_min).powf(t)
            })
            .collect();
        let c = self.linear_constant();
        let mut l = DecayLedger {
            increase_in_n: f64::NEG_INFINITY,
            decrease_in_r: f64::NEG_INFINITY,
            concavity_defect: f64::NEG_INFINITY,
            tail_defect: f64::NEG_INFINITY,
            linear_defect: f64::NEG_INFINITY,
            semigroup_defect: f64::NEG_INFINITY,
            linear_constant: c,
            holds: false,
        };
        for n in 0..=n_max {
            let nf = n as f64;
            for (i, &r) in rs.iter().enumerate() {
                let v = self.eval(nf, r);
                l.increase_in_n = l.increase_in_n.max(self.eval(nf + 1.0, r) - v);
                if i + 1 < rs.len() {
                    let r2 = rs[i + 1];
                    l.decrease_in_r = l.decrease_in_r.max(v - self.eval(nf, r2));
                    let mid = self.eval(nf, 0.5 * (r + r2));
                    l.concavity_defect =
                        l.concavity_defect.max(0.5 * (v + self.eval(nf, r2)) - mid);
                }
                if n > 0 {
                    l.tail_defect = l
                        .tail_defect
                        .max(v * nf.powf(1.0 / self.alpha) / self.big_b - 1.0);
                }
                l.linear_defect = l.linear_defect.max(v / (c * r) - 1.0);
                for k in 0..=n_max {
                    let kf = k as f64;
                    l.semigroup_defect = l
                        .semigroup_defect
                        .max(self.eval(kf + nf, r) - self.eval(kf, v));
                }
            }
        }
        let tol = 1e-12;
        l.holds = l.increase_in_n <= tol
            && l.decrease_in_r <= tol
            && l.concavity_defect <= tol
            && l.tail_defect <= tol
            && l.linear_defect <= tol
            && l.semigroup_defect <= tol;
        l
    }
}

/// Least-squares power law `value ≈ constant · n^{exponent}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub exponent_se: f64,
    pub constant: f64,
    pub residual_rms: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub points: usize,
    /// `n` values dropped for `n < 2` or a nonpositive value.
    pub dropped: Vec<usize>,
}

/// Fits `ln value` against `ln n` on the points with `n ≥ 2` and a positive value.
pub fn fit_polynomial_decay(series: &[(usize, f64)]) -> Result<DecayFit> {
    let mut dropped = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ns = Vec::new();
    for &(n, v) in series {
        if n < 2 || !(v > 0.0) || !v.is_finite() {
            dropped.push(n);
            continue;
        }
        xs.push((n as f64).ln());
        ys.push(v.ln());
        ns.push(n);
    }
    if !dropped.is_empty() {
        log::warn!("decay fit dropped {} points: {:?}", dropped.len(), dropped);
    }
    if xs.len() < 5 {
        return Err(LabError::Refused(format!(
            "decay fit needs 5 usable points, {} remain",
            xs.len()
        )));
    }
    let fit = fit_line(&xs, &ys)
        .ok_or_else(|| LabError::Refused("decay fit needs two distinct n".into()))?;
    Ok(DecayFit {
        exponent: fit.slope,
        exponent_se: fit.slope_se,
        constant: fit.intercept.exp(),
        residual_rms: fit.residual_rms,
        n_min: *ns.iter().min().unwrap_or(&0),
        n_max: *ns.iter().max().unwrap_or(&0),
        points: xs.len(),
        dropped,
    })
}

/// A permutation `row i → column pairs[i]` and its total cost.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assignment {
    pub pairs: Vec<usize>,
    pub cost: f64,
}

fn assignment_cost(cost: &[f64], m: usize, pairs: &[usize]) -> f64 {
    let mut terms: Vec<f64> = pairs
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * m + j])
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Minimum-cost perfect matching on an `m × m` row-major cost matrix, by
/// shortest augmenting paths with dual potentials (`O(m³)`).
pub fn optimal_assignment(cost: &[f64], m: usize) -> Result<Assignment> {
    if cost.len() != m * m {
        return contract("cost matrix must be m × m");
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return contract("assignment costs must be finite");
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j]: row matched to column j (1-based, 0 = free).
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![0; m];
    for j in 1..=m {
        pairs[owner[j] - 1] = j - 1;
    }
    let cost = assignment_cost(cost, m, &pairs);
    Ok(Assignment { pairs, cost })
}

/// Matches the cheapest remaining pair first; an upper bound on the optimum.
pub fn greedy_assignment(cost: &[f64], m: usize) -> Result<Assignment> {
    if cost.len() != m * m {
        return contract("cost matrix must be m × m");
    }
    let mut order: Vec<usize> = (0..m * m).collect();
    order.sort_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(a.cmp(&b)));
    let mut row_done = vec![false; m];
    let mut col_done = vec![false; m];
    let mut pairs = vec![usize::MAX; m];
    let mut left = m;
    for idx in order {
        if left == 0 {
            break;
        }
        let (i, j) = (idx / m, idx % m);
        if row_done[i] || col_done[j] {
            continue;
        }
        row_done[i] = true;
        col_done[j] = true;
        pairs[i] = j;
        left -= 1;
    }
    let cost = assignment_cost(cost, m, &pairs);
    Ok(Assignment { pairs, cost })
}

/// Distance between flat states: the product metric on shifts, Euclidean
/// otherwise.
pub fn state_distance(kernel: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        KernelSpec::FullShift(_) => kernel.tag().coords_distance(a, b),
        _ => a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WassersteinEstimate {
    pub value: f64,
    /// False when the greedy bound was used.
    pub exact: bool,
    pub atoms: usize,
}

/// `W_ω` between two uniform empirical measures with cost `ω(d(·,·))`.
/// The larger measure is subsampled without replacement to the smaller size.
pub fn wasserstein_estimate(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    distance: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    omega: &ModulusOfContinuity,
    seed: u64,
) -> Result<WassersteinEstimate> {
    if a.is_empty() || b.is_empty() {
        return contract("Wasserstein distance between empty measures");
    }
    let m = a.len().min(b.len());
    let pick = |atoms: &[Vec<f64>], label: &str| -> Vec<usize> {
        if atoms.len() == m {
            (0..m).collect()
        } else {
            let mut idx = sample_indices(&mut substream(seed, label), atoms.len(), m).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let ia = pick(a.atoms(), "wasserstein-subsample");
    let ib = pick(b.atoms(), "wasserstein-subsample");
    let cost: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|t| omega.eval(distance(&a.atoms()[ia[t / m]], &b.atoms()[ib[t % m]])))
        .collect();
    let exact = m <= EXACT_ASSIGNMENT_ATOMS;
    let plan = if exact {
        optimal_assignment(&cost, m)?
    } else {
        greedy_assignment(&cost, m)?
    };
    Ok(WassersteinEstimate {
        value: plan.cost / m as f64,
        exact,
        atoms: m,
    })
}

/// Finitely supported probability measure on flat states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedMeasure {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedMeasure {
    pub fn dirac(x: &[f64]) -> Self {
        Self {
            atoms: vec![x.to_vec()],
            weights: vec![1.0],
        }
    }

    pub fn uniform(nu: &EmpiricalMeasure) -> Self {
        let m = nu.len() as f64;
        Self {
            atoms: nu.atoms().to_vec(),
            weights: vec![1.0 / m; nu.len()],
        }
    }
}

/// Optimal transport cost `min_Π Σ Π_ij c_ij` between two weighted measures,
/// by successive shortest paths with Dijkstra potentials on the dense
/// bipartite residual graph.
pub fn transport_cost(a: &[f64], b: &[f64], cost: &[f64]) -> Result<f64> {
    let (p, q) = (a.len(), b.len());
    if cost.len() != p * q || p == 0 || q == 0 {
        return contract("transport needs a p × q cost matrix and nonempty marginals");
    }
    if a.iter().chain(b).any(|w| !(*w >= 0.0)) || cost.iter().any(|c| !(*c >= 0.0)) {
        return contract("transport needs nonnegative masses and costs");
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if !(sa > 0.0) || (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return contract(format!("transport marginals have masses {sa} and {sb}"));
    }
    let eps = 1e-15 * sa;
    let mut supply: Vec<f64> = a.to_vec();
    let mut demand: Vec<f64> = b.iter().map(|w| w * sa / sb).collect();
    let mut flow = vec![0.0; p * q];
    // Potentials: supplies 0..p, demands p..p+q.
    let mut pot = vec![0.0; p + q];
    let mut remaining = sa;
    let mut rounds = 0usize;
    while remaining > 1e-12 * sa {
        rounds += 1;
        if rounds > 4 * (p + q) * (p + q) + 16 {
            return Err(LabError::Aborted(
                "transport solver did not converge".into(),
            ));
        }
        let nodes = p + q;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..p {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < bd {
                    bd = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < p {
                let i = best;
                for j in 0..q {
                    let v = p + j;
                    let rc = (cost[i * q + j] + pot[i] - pot[v]).max(0.0);
                    if bd + rc < dist[v] {
                        dist[v] = bd + rc;
                        prev[v] = i;
                    }
                }
            } else {
                let j = best - p;
                for i in 0..p {
                    if flow[i * q + j] > eps {
                        let rc = (-cost[i * q + j] + pot[best] - pot[i]).max(0.0);
                        if bd + rc < dist[i] {
                            dist[i] = bd + rc;
                            prev[i] = best;
                        }
                    }
                }
            }
        }
        let target = (0..q)
            .filter(|&j| demand[j] > eps && dist[p + j].is_finite())
            .min_by(|&x, &y| dist[p + x].total_cmp(&dist[p + y]).then(x.cmp(&y)));
        let Some(jt) = target else {
            return Err(LabError::Aborted(
                "transport residual graph disconnected".into(),
            ));
        };
        let reach = dist[p + jt];
        for v in 0..nodes {
            pot[v] += dist[v].min(reach);
        }
        let mut amount = demand[jt];
        let mut v = p + jt;
        loop {
            let u = prev[v];
            if v >= p {
                v = u;
                continue;
            }
            if u == usize::MAX {
                break;
            }
            amount = amount.min(flow[v * q + (u - p)]);
            v = u;
        }
        let source = v;
        amount = amount.min(supply[source]);
        let mut v = p + jt;
        loop {
            let u = prev[v];
            if v >= p {
                flow[u * q + (v - p)] += amount;
                v = u;
                continue;
            }
            if u == usize::MAX {
                break;
            }
            let f = &mut flow[v * q + (u - p)];
            *f = (*f - amount).max(0.0);
            v = u;
        }
        supply[source] -= amount;
        demand[jt] -= amount;
        remaining -= amount;
    }
    let mut terms: Vec<f64> = flow.iter().zip(cost).map(|(f, c)| f * c).collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / sa)
}

/// `W_ω` between two weighted measures, exactly.
pub fn weighted_wasserstein(
    a: &WeightedMeasure,
    b: &WeightedMeasure,
    distance: impl Fn(&[f64], &[f64]) -> f64,
    omega: &ModulusOfContinuity,
) -> Result<f64> {
    let q = b.atoms.len();
    let cost: Vec<f64> = (0..a.atoms.len() * q)
        .map(|t| omega.eval(distance(&a.atoms[t / q], &b.atoms[t % q])))
        .collect();
    transport_cost(&a.weights, &b.weights, &cost)
}

/// `ℒ̄*ⁿ δ_x` normalized to a probability, by enumerating every word of a
/// finitely branching full shift.
pub fn exact_pushforward(sys: &NormalizedSystem, x: &[f64], n: usize) -> Result<WeightedMeasure> {
    let KernelSpec::FullShift(m) = sys.kernel() else {
        return contract("exact pushforwards enumerate full-shift words");
    };
    let Some(s) = sys.kernel().branching() else {
        return contract("exact pushforwards need a finite alphabet");
    };
    let leaves = (s as f64).powi(n as i32);
    if leaves > MAX_PUSHFORWARD_ATOMS as f64 {
        return Err(LabError::Refused(format!(
            "{s}^{n} words exceed the enumeration limit {MAX_PUSHFORWARD_ATOMS}"
        )));
    }
    let len = sys.depth() * sys.kernel().point_dim();
    if x.len() < len {
        return contract("pushforward start is shallower than the system");
    }
    let mut level = WeightedMeasure {
        atoms: vec![x[..len].to_vec()],
        weights: vec![1.0],
    };
    let letters: Vec<(f64, f64)> = m.atoms().collect();
    for _ in 0..n {
        let mut next = WeightedMeasure {
            atoms: Vec::with_capacity(level.atoms.len() * s),
            weights: Vec::with_capacity(level.atoms.len() * s),
        };
        for (parent, w) in level.atoms.iter().zip(&level.weights) {
            for &(a, mu) in &letters {
                let mut child = Vec::with_capacity(len);
                child.push(a);
                child.extend_from_slice(&parent[..len - 1]);
                let p = mu * sys.log_density(parent, &child).exp();
                next.atoms.push(child);
                next.weights.push(w * p);
            }
        }
        let total: f64 = next.weights.iter().sum();
        for w in next.weights.iter_mut() {
            *w /= total;
        }
        level = next;
    }
    Ok(level)
}

/// One particle step: `k` proposals per atom weighted by
/// `e^{f̄(child)}·dm/dq`, then `m` multinomial draws by sorted uniforms.
fn push_cloud(
    sys: &NormalizedSystem,
    cloud: &[Vec<f64>],
    k: usize,
    uniforms: &[f64],
    picks: &[f64],
) -> Vec<Vec<f64>> {
    let sampler = sys.sampler();
    let upl = sampler.uniforms_per_step();
    let depth = cloud[0].len();
    let mut children = Vec::with_capacity(cloud.len() * k);
    let mut log_w = Vec::with_capacity(cloud.len() * k);
    let mut walk = Walk::new(sys.kernel(), depth, 1);
    for (i, atom) in cloud.iter().enumerate() {
        for c in 0..k {
            let t = (i * k + c) * upl;
            walk.reset(atom);
            let lr = sampler.step(&mut walk, &uniforms[t..t + upl]);
            let child = walk.current().to_vec();
            log_w.push(lr + sys.log_density(atom, &child));
            children.push(child);
        }
    }
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cum = Vec::with_capacity(log_w.len());
    let mut total = 0.0;
    for lw in &log_w {
        total += (lw - top).exp();
        cum.push(total);
    }
    let mut j = 0;
    picks
        .iter()
        .map(|&u| {
            let target = u * total;
            while j + 1 < cum.len() && cum[j] <= target {
                j += 1;
            }
            children[j].clone()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualPoint {
    pub n: usize,
    pub wasserstein: f64,
    /// Mean `W_ω` between the first cloud and independent pushforwards of its seed.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualContractionReport {
    pub series: Vec<DualPoint>,
    pub initial: f64,
    /// `max_n W_ω(n) / W_ω(0)`; infinite when `W_ω(0) = 0` and some `W_ω(n) > 0`.
    pub max_ratio: f64,
    pub fit: Option<DecayFit>,
    pub atoms: usize,
}

/// Pushes two atom clouds through `ℒ̄*` with shared proposal and resampling
/// uniforms and records `W_ω` after each step.
pub fn dual_contraction_probe(
    sys: &NormalizedSystem,
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    omega: &ModulusOfContinuity,
    n_max: usize,
    k: usize,
    seed: u64,
) -> Result<DualContractionReport> {
    if !sys.accepted() {
        return Err(LabError::Refused(
            "dual contraction probe needs an accepted normalization".into(),
        ));
    }
    if a.len() != b.len() || a.is_empty() || k == 0 {
        return contract("dual probe needs equal nonempty clouds and k ≥ 1");
    }
    let m = a.len();
    let len = sys.kernel().state_depth(sys.depth()) * sys.kernel().point_dim();
    let trim = |nu: &EmpiricalMeasure| -> Result<Vec<Vec<f64>>> {
        nu.atoms()
            .iter()
            .map(|x| {
                if x.len() < len {
                    contract("cloud atom is shallower than the system")
                } else {
                    Ok(x[..len].to_vec())
                }
            })
            .collect()
    };
    let kernel = sys.kernel();
    let dist = |p: &[f64], q: &[f64]| state_distance(kernel, p, q);
    let w_of = |p: &[Vec<f64>], q: &[Vec<f64>], n: usize| -> Result<f64> {
        let est = wasserstein_estimate(
            &EmpiricalMeasure::new(p.to_vec()),
            &EmpiricalMeasure::new(q.to_vec()),
            dist,
            omega,
            crate::rng::derive_seed(seed, "dual-subsample", n as u64),
        )?;
        Ok(est.value)
    };
    let mut ca = trim(a)?;
    let mut cb = trim(b)?;
    let mut floors = vec![ca.clone(); FLOOR_CLOUDS];
    let upl = sys.sampler().uniforms_per_step();
    let initial = w_of(&ca, &cb, 0)?;
    let mut series = vec![DualPoint {
        n: 0,
        wasserstein: initial,
        noise_floor: 0.0,
    }];
    let draw = |label: &str, n: usize| -> (Vec<f64>, Vec<f64>) {
        let mut rng = substream_indexed(seed, label, n as u64);
        let u: Vec<f64> = (0..m * k * upl).map(|_| rng.random()).collect();
        let mut picks: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        picks.sort_by(f64::total_cmp);
        (u, picks)
    };
    for n in 1..=n_max {
        let (u, picks) = draw("dual-shared", n);
        ca = push_cloud(sys, &ca, k, &u, &picks);
        cb = push_cloud(sys, &cb, k, &u, &picks);
        let mut floor = 0.0;
        for (r, cf) in floors.iter_mut().enumerate() {
            let (uf, pf) = draw(&format!("dual-floor-{r}"), n);
            *cf = push_cloud(sys, cf, k, &uf, &pf);
            floor += w_of(&ca, cf, n)?;
        }
        series.push(DualPoint {
            n,
            wasserstein: w_of(&ca, &cb, n)?,
            noise_floor: floor / FLOOR_CLOUDS as f64,
        });
    }
    let max_ratio = series.iter().skip(1).fold(0.0f64, |r, p| {
        if initial > 0.0 {
            r.max(p.wasserstein / initial)
        } else if p.wasserstein > 0.0 {
            f64::INFINITY
        } else {
            r
        }
    });
    let pts: Vec<(usize, f64)> = series.iter().map(|p| (p.n, p.wasserstein)).collect();
    let fit = fit_polynomial_decay(&pts).ok();
    Ok(DualContractionReport {
        series,
        initial,
        max_ratio,
        fit,
        atoms: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{CylinderSpace, OracleSystem};
    use crate::rng::substream;
    use crate::space::{Alphabet, AlphabetTag, AprioriMeasure};
    use crate::transfer::NormalizeConfig;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn bits() -> AprioriMeasure {
        AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap()
    }

    fn bit_config(bits: &[u8]) -> Config {
        Config::new(
            &Alphabet::Finite(vec![0.0, 1.0]),
            bits.iter().map(|&b| b as f64).collect(),
        )
        .unwrap()
    }

    fn zero_system(depth: usize) -> NormalizedSystem {
        let kernel = KernelSpec::FullShift(bits());
        NormalizedSystem::from_exact(
            &kernel,
            &Potential::Constant(0.0),
            1.0,
            |_| 1.0,
            Some(0),
            depth,
            &NormalizeConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn identical_start_has_zero_distance() {
        let k = KernelSpec::FullShift(bits());
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0]);
        let mut rng = substream(1, "t");
        let p = sample_coupled(&k, &x, &x, 5, &mut rng).unwrap();
        assert_eq!(p.distance_after(), 0.0);
    }

    #[test]
    fn zero_length_returns_the_pair() {
        let k = KernelSpec::FullShift(bits());
        let x = bit_config(&[1, 0, 1, 1]);
        let y = bit_config(&[0, 0, 1, 1]);
        let p = sample_coupled(&k, &x, &y, 0, &mut substream(2, "t")).unwrap();
        assert_eq!(p.x_n, x);
        assert_eq!(p.y_n, y);
    }

    #[test]
    fn first_coordinate_difference_moves_to_position_four() {
        let k = KernelSpec::FullShift(bits());
        let mut xb = [0u8; 10];
        xb[3] = 1;
        let mut yb = xb;
        yb[0] = 1;
        let (x, y) = (bit_config(&xb), bit_config(&yb));
        for s in 0..20 {
            let p = sample_coupled(&k, &x, &y, 3, &mut substream(s, "t")).unwrap();
            assert_eq!(p.distance_after(), 0.0625);
            assert!(p.shares_prefix());
            assert!(p.satisfies_contraction());
        }
    }

    #[test]
    fn coupled_length_beyond_depth_is_a_contract_error() {
        let k = KernelSpec::FullShift(bits());
        let x = bit_config(&[0, 1]);
        assert!(sample_coupled(&k, &x, &x, 3, &mut substream(0, "t")).is_err());
    }

    #[test]
    fn equal_pair_costs_nothing() {
        let k = KernelSpec::FullShift(bits());
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let f = Potential::Constant(0.3);
        let c = weighted_coupling_cost(&k, CostWeight::Raw(&f), &w, &x, &x, 4, 64, 1).unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.std_error, 0.0);
    }

    #[test]
    fn zero_potential_cost_is_bounded_by_contracted_distance() {
        let k = KernelSpec::FullShift(bits());
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0]);
        let y = bit_config(&[0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let sys = zero_system(12);
        let d = x.tag().coords_distance(x.coords(), y.coords());
        let ns: Vec<usize> = (0..=8).collect();
        let series =
            coupling_cost_series(&k, CostWeight::Normalized(&sys), &w, &x, &y, &ns, 200, 3)
                .unwrap();
        for p in series {
            let bound = w.eval(0.5f64.powi(p.n as i32) * d + distance_tail_bound(12));
            assert!(p.value <= bound * (1.0 + 1e-12), "{p:?} vs {bound}");
        }
    }

    #[test]
    fn raw_cost_matches_oracle_transfer_power() {
        // Cost = ω(d_n)·ℒⁿ1(x) because d(x_n, y_n) does not depend on the word.
        let space = CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap();
        let table = [0.3, -0.2, 0.1, 0.5];
        let f = Potential::finite_range(vec![0.0, 1.0], 2, |v| table[(2.0 * v[0] + v[1]) as usize])
            .unwrap();
        let oracle = OracleSystem::new(&space, &f).unwrap();
        let k = oracle.kernel().unwrap();
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let y = bit_config(&[1, 1, 0, 1, 0, 0, 1, 0, 0, 1]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let ns = [1, 2, 3, 5, 8];
        let series =
            coupling_cost_series(&k, CostWeight::Raw(&f), &w, &x, &y, &ns, 20_000, 4).unwrap();
        let idx = oracle.space.index_of_coords(x.coords());
        let powers = crate::oracle::powers_of_one(&oracle.matrix, 8);
        for p in series {
            let ln1 = powers[p.n][idx];
            let dn = x.tag().coords_distance(
                &[vec![0.0; p.n], x.coords()[..10 - p.n].to_vec()].concat(),
                &[vec![0.0; p.n], y.coords()[..10 - p.n].to_vec()].concat(),
            );
            let expect = w.eval(dn) * ln1;
            assert!(
                (p.value - expect).abs() <= 4.0 * p.std_error + 1e-12,
                "n={} {} vs {} ± {}",
                p.n,
                p.value,
                expect,
                p.std_error
            );
        }
    }

    #[test]
    fn power_law_fit_recovers_exponents() {
        let s: Vec<(usize, f64)> = (2..40).map(|n| (n, (n as f64).powi(-2))).collect();
        let f = fit_polynomial_decay(&s).unwrap();
        assert!((f.exponent + 2.0).abs() < 1e-12);
        assert!(f.residual_rms < 1e-12);
        let c: Vec<(usize, f64)> = (2..40).map(|n| (n, 0.7)).collect();
        assert!(fit_polynomial_decay(&c).unwrap().exponent.abs() < 1e-12);
    }

    #[test]
    fn fit_drops_bad_points_and_refuses_short_series() {
        let s = vec![
            (1, 1.0),
            (2, 0.5),
            (3, -1.0),
            (4, 0.25),
            (5, 0.2),
            (6, 0.0),
            (8, 0.1),
        ];
        assert!(matches!(
            fit_polynomial_decay(&s),
            Err(LabError::Refused(_))
        ));
        let mut s2 = s.clone();
        s2.push((9, 0.09));
        let f = fit_polynomial_decay(&s2).unwrap();
        assert_eq!(f.dropped, vec![1, 3, 6]);
        assert_eq!(f.points, 5);
    }

    #[test]
    fn decay_function_ledger_holds() {
        for &(bb, b, a) in &[(1.0, 0.5, 0.5), (3.0, 0.1, 1.0), (1.5, 0.9, 0.25)] {
            let f = DecayFunction::new(bb, b, a).unwrap();
            let l = f.ledger(24, 1e-6, 1.0, 40);
            assert!(l.holds, "{l:?}");
        }
        assert!(DecayFunction::new(0.5, 0.5, 1.0).is_err());
        assert!(DecayFunction::new(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn greedy_is_strictly_worse_on_crafted_instance() {
        let a: [f64; 4] = [0.0, 1.1, 10.0, 11.1];
        let b: [f64; 4] = [1.0, 2.2, 11.0, 12.2];
        let cost: Vec<f64> = (0..16).map(|t| (a[t / 4] - b[t % 4]).powi(2)).collect();
        let mut best = f64::INFINITY;
        let mut perm = [0usize, 1, 2, 3];
        // Heap's algorithm over all 24 permutations.
        let mut c = [0usize; 4];
        let eval = |p: &[usize; 4]| (0..4).map(|i| cost[i * 4 + p[i]]).sum::<f64>();
        best = best.min(eval(&perm));
        let mut i = 0;
        let mut seen = 1;
        while i < 4 {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(eval(&perm));
                seen += 1;
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        assert_eq!(seen, 24);
        let exact = optimal_assignment(&cost, 4).unwrap();
        let greedy = greedy_assignment(&cost, 4).unwrap();
        assert!((exact.cost - best).abs() < 1e-12);
        assert!(exact.cost < greedy.cost - 1.0);
    }

    #[test]
    fn wasserstein_single_atoms_and_identical_samples() {
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let tag = AlphabetTag::Finite(2);
        let d = |a: &[f64], b: &[f64]| tag.coords_distance(a, b);
        let x = vec![1.0, 0.0, 1.0, 1.0];
        let y = vec![1.0, 1.0, 0.0, 1.0];
        let a = EmpiricalMeasure::new(vec![x.clone()]);
        let b = EmpiricalMeasure::new(vec![y.clone()]);
        let e = wasserstein_estimate(&a, &b, d, &w, 0).unwrap();
        assert_eq!(e.value, w.eval(d(&x, &y)));
        let mut rng = substream(5, "atoms");
        let atoms: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.random_range(0..2) as f64).collect())
            .collect();
        let nu = EmpiricalMeasure::new(atoms);
        assert_eq!(wasserstein_estimate(&nu, &nu, d, &w, 0).unwrap().value, 0.0);
    }

    #[test]
    fn transport_reduces_to_assignment_on_uniform_weights() {
        let mut rng = substream(8, "transport");
        for m in [1usize, 3, 7, 12] {
            let cost: Vec<f64> = (0..m * m).map(|_| rng.random::<f64>()).collect();
            let a = vec![1.0 / m as f64; m];
            let t = transport_cost(&a, &a, &cost).unwrap();
            let h = optimal_assignment(&cost, m).unwrap().cost / m as f64;
            assert!((t - h).abs() < 1e-12, "m={m}: {t} vs {h}");
        }
    }

    #[test]
    fn transport_on_a_line_matches_quantile_coupling() {
        // On ℝ with cost |x − y| the optimum is ∫|F⁻¹ − G⁻¹|.
        let xa: [f64; 3] = [0.0, 1.0, 3.0];
        let wa = [0.2, 0.5, 0.3];
        let xb: [f64; 2] = [0.5, 2.0];
        let wb = [0.6, 0.4];
        let cost: Vec<f64> = (0..6).map(|t| (xa[t / 2] - xb[t % 2]).abs()).collect();
        let t = transport_cost(&wa, &wb, &cost).unwrap();
        // Quantile pieces: [0,.2] 0→.5, [.2,.6] 1→.5, [.6,.7] 1→2, [.7,1] 3→2.
        let expect = 0.2 * 0.5 + 0.4 * 0.5 + 0.1 * 1.0 + 0.3 * 1.0;
        assert!((t - expect).abs() < 1e-12, "{t} vs {expect}");
    }

    #[test]
    fn identical_clouds_stay_together() {
        let sys = zero_system(10);
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let nu = EmpiricalMeasure::new(vec![x.coords().to_vec(); 32]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let r = dual_contraction_probe(&sys, &nu, &nu, &w, 6, 1, 3).unwrap();
        for p in &r.series {
            assert_eq!(p.wasserstein, 0.0);
        }
    }

    #[test]
    fn dirac_clouds_contract_like_the_shared_word() {
        let sys = zero_system(10);
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let y = bit_config(&[0, 1, 1, 0, 1, 0, 0, 1, 1, 0]);
        let d = x.tag().coords_distance(x.coords(), y.coords());
        let a = EmpiricalMeasure::new(vec![x.coords().to_vec(); 32]);
        let b = EmpiricalMeasure::new(vec![y.coords().to_vec(); 32]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let r = dual_contraction_probe(&sys, &a, &b, &w, 8, 1, 4).unwrap();
        for p in &r.series {
            let bound = w.eval(0.5f64.powi(p.n as i32) * d + distance_tail_bound(10));
            assert!(p.wasserstein <= bound * (1.0 + 1e-12), "{p:?} vs {bound}");
        }
        assert!(r.max_ratio <= 1.0);
    }

    #[test]
    fn particle_pushforward_matches_exact_on_oracle_system() {
        let space = CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap();
        let table = [0.4, -0.3, 0.2, 0.6];
        let f = Potential::finite_range(vec![0.0, 1.0], 2, |v| table[(2.0 * v[0] + v[1]) as usize])
            .unwrap();
        let oracle = OracleSystem::new(&space, &f).unwrap();
        let depth = 10;
        let sys = oracle
            .normalized_system(depth, &NormalizeConfig::default())
            .unwrap();
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let y = bit_config(&[0, 1, 1, 0, 1, 0, 0, 1, 1, 0]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let tag = x.tag();
        let dist = |a: &[f64], b: &[f64]| tag.coords_distance(a, b);
        let m = 200;
        let a = EmpiricalMeasure::new(vec![x.coords().to_vec(); m]);
        let b = EmpiricalMeasure::new(vec![y.coords().to_vec(); m]);
        let r = dual_contraction_probe(&sys, &a, &b, &w, 8, 1, 6).unwrap();
        for p in r.series.iter().filter(|p| p.n >= 1) {
            let ea = exact_pushforward(&sys, x.coords(), p.n).unwrap();
            let eb = exact_pushforward(&sys, y.coords(), p.n).unwrap();
            let exact = weighted_wasserstein(&ea, &eb, dist, &w).unwrap();
            assert!(
                (p.wasserstein - exact).abs() <= 2.0 * p.noise_floor + 1e-12,
                "n={}: {} vs {} (floor {})",
                p.n,
                p.wasserstein,
                exact,
                p.noise_floor
            );
        }
    }

    #[test]
    fn particle_wasserstein_is_unbiased_at_small_n() {
        let space = CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap();
        let table = [0.4, -0.3, 0.2, 0.6];
        let f = Potential::finite_range(vec![0.0, 1.0], 2, |v| table[(2.0 * v[0] + v[1]) as usize])
            .unwrap();
        let oracle = OracleSystem::new(&space, &f).unwrap();
        let sys = oracle
            .normalized_system(10, &NormalizeConfig::default())
            .unwrap();
        let x = bit_config(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]);
        let y = bit_config(&[0, 1, 1, 0, 1, 0, 0, 1, 1, 0]);
        let w = ModulusOfContinuity::log_config(2.0).unwrap();
        let tag = x.tag();
        let dist = |a: &[f64], b: &[f64]| tag.coords_distance(a, b);
        let a = EmpiricalMeasure::new(vec![x.coords().to_vec(); 200]);
        let b = EmpiricalMeasure::new(vec![y.coords().to_vec(); 200]);
        let reps = 60;
        let runs: Vec<DualContractionReport> = (0..reps)
            .map(|s| dual_contraction_probe(&sys, &a, &b, &w, 1, 1, 100 + s).unwrap())
            .collect();
        let ea = exact_pushforward(&sys, x.coords(), 1).unwrap();
        let eb = exact_pushforward(&sys, y.coords(), 1).unwrap();
        let exact = weighted_wasserstein(&ea, &eb, dist, &w).unwrap();
        let v: Vec<f64> = runs.iter().map(|r| r.series[1].wasserstein).collect();
        let mean = crate::stats::mean(&v);
        let se = (crate::stats::variance(&v) / reps as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} ± {se} vs {exact}");
    }

    #[test]
    fn exact_pushforward_is_a_probability() {
        let space = CylinderSpace::uniform(vec![0.0, 1.0, 2.0], 2).unwrap();
        let f = Potential::finite_range(vec![0.0, 1.0, 2.0], 2, |v| {
            ((3.0 * v[0] + v[1]) * 0.37).sin()
        })
        .unwrap();
        let oracle = OracleSystem::new(&space, &f).unwrap();
        let sys = oracle
            .normalized_system(6, &NormalizeConfig::default())
            .unwrap();
        let x = vec![2.0, 0.0, 1.0, 1.0, 0.0, 2.0];
        let nu = exact_pushforward(&sys, &x, 4).unwrap();
        assert_eq!(nu.atoms.len(), 81);
        assert!((nu.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(exact_pushforward(&sys, &x, 8).is_err());
    }

    proptest! {
        #[test]
        fn coupled_paths_contract(
            xs in proptest::collection::vec(0u8..2, 12),
            ys in proptest::collection::vec(0u8..2, 12),
            n in 0usize..12,
            seed in 0u64..1000,
        ) {
            let k = KernelSpec::FullShift(bits());
            let p = sample_coupled(&k, &bit_config(&xs), &bit_config(&ys), n, &mut substream(seed, "p")).unwrap();
            prop_assert!(p.shares_prefix());
            prop_assert!(p.satisfies_contraction());
        }

        #[test]
        fn wasserstein_is_symmetric(seed in 0u64..200, m in 1usize..20) {
            let mut rng = substream(seed, "sym");
            let mk = |rng: &mut crate::rng::LabRng| -> EmpiricalMeasure {
                EmpiricalMeasure::new((0..m).map(|_| (0..6).map(|_| rng.random_range(0..2) as f64).collect()).collect())
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let w = ModulusOfContinuity::log_config(2.0).unwrap();
            let tag = AlphabetTag::Finite(2);
            let d = |p: &[f64], q: &[f64]| tag.coords_distance(p, q);
            let ab = wasserstein_estimate(&a, &b, d, &w, 0).unwrap().value;
            let ba = wasserstein_estimate(&b, &a, d, &w, 0).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn hungarian_never_loses_to_greedy(seed in 0u64..200, m in 1usize..12) {
            let mut rng = substream(seed, "h");
            let cost: Vec<f64> = (0..m * m).map(|_| rng.random::<f64>()).collect();
            let e = optimal_assignment(&cost, m).unwrap();
            let g = greedy_assignment(&cost, m).unwrap();
            prop_assert!(e.cost <= g.cost + 1e-12);
            let mut seen = e.pairs.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
        }
    }
}
