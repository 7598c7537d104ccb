//! Backward weighted shifts on truncated ℓᵖ and iterated function systems.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{contract, Result};
use crate::rng::substream;
use crate::space::AprioriMeasure;

/// Backward weighted shift `L(x) = (α_n x_{n+1})_n` on ℓᵖ truncated to
/// `dim` coordinates.
#[derive(Clone, Debug)]
pub struct WeightedShiftSystem {
    weights: Vec<f64>,
    c_lo: f64,
    c_hi: f64,
    p: f64,
    apriori: AprioriMeasure,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummabilityReport {
    pub exponent: f64,
    pub terms: Vec<f64>,
    pub partial_sums: Vec<f64>,
    /// Geometric-mean ratio of consecutive terms over the second half.
    pub ratio_estimate: f64,
    pub summable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub enum WitnessOutcome {
    /// `n` and the free block `(r_1, …, r_n)` of the preimage.
    Found {
        n: usize,
        word: Vec<f64>,
        distance_bound: f64,
    },
    Failed {
        n_max: usize,
        best_distance: f64,
    },
}

impl WeightedShiftSystem {
    pub fn new(weights: Vec<f64>, c_lo: f64, c_hi: f64, p: f64) -> Result<Self> {
        if !(c_lo > 0.0 && c_lo < c_hi && c_hi > 1.0) {
            return contract("weighted shift needs 0 < c < c' and c' > 1");
        }
        if !(p >= 1.0 && p.is_finite()) {
            return contract("ℓᵖ needs p ∈ [1, ∞)");
        }
        if weights.len() < 2 {
            return contract("weighted shift needs at least two coordinates");
        }
        if let Some(i) = weights.iter().position(|a| !(*a > c_lo && *a < c_hi)) {
            return contract(format!(
                "weight α_{} = {} outside (c, c')",
                i + 1,
                weights[i]
            ));
        }
        Ok(Self {
            weights,
            c_lo,
            c_hi,
            p,
            apriori: AprioriMeasure::gaussian(),
        })
    }

    /// Constant weights `α_n = a` for `n ≤ dim`.
    pub fn constant(a: f64, dim: usize, p: f64) -> Result<Self> {
        Self::new(vec![a; dim], a * 0.5, (a * 2.0).max(2.0), p)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.c_lo, self.c_hi)
    }

    pub fn apriori(&self) -> &AprioriMeasure {
        &self.apriori
    }

    pub fn lp_norm(&self, v: &[f64]) -> f64 {
        v.iter()
            .map(|x| x.abs().powf(self.p))
            .sum::<f64>()
            .powf(1.0 / self.p)
    }

    pub fn lp_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs().powf(self.p))
            .sum::<f64>()
            .powf(1.0 / self.p)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return contract(format!("vector length {} ≠ dim {}", x.len(), self.dim()));
        }
        Ok(())
    }

    /// `(α_1 x_2, …, α_{dim-1} x_dim, 0)`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let mut out: Vec<f64> = self
            .weights
            .iter()
            .zip(&x[1..])
            .map(|(a, v)| a * v)
            .collect();
        out.push(0.0);
        Ok(out)
    }

    /// `S(x) = (x_1/α_1, x_2/α_2, …)`.
    pub fn s_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        Ok(x.iter().zip(&self.weights).map(|(v, a)| v / a).collect())
    }

    /// `(r, x_1/α_1, …, x_{dim-1}/α_{dim-1})`: one step of the backward walk.
    pub fn preimage_step(&self, r: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for k in (1..d).rev() {
            out[k] = x[k - 1] / self.weights[k - 1];
        }
        out[0] = r;
    }

    /// `β_k^n = α_k ⋯ α_{k+n-1}` (1-based `k`).
    pub fn beta(&self, k: usize, n: usize) -> f64 {
        self.weights[k - 1..k - 1 + n].iter().product()
    }

    /// `d_n = min_k β_k^n` over the windows inside the truncation.
    pub fn d_n(&self, n: usize) -> f64 {
        (1..=self.dim() + 1 - n)
            .map(|k| self.beta(k, n))
            .fold(f64::INFINITY, f64::min)
    }

    /// Partial sums of `Σ d_n^{-α}` for `n ≤ big_n`.
    pub fn summability_check(&self, exponent: f64, big_n: usize) -> Result<SummabilityReport> {
        if big_n < 10 || big_n > self.dim() {
            return contract("summability check needs 10 ≤ N ≤ dim");
        }
        let terms: Vec<f64> = (1..=big_n).map(|n| self.d_n(n).powf(-exponent)).collect();
        let mut acc = 0.0;
        let partial_sums = terms
            .iter()
            .map(|t| {
                acc += t;
                acc
            })
            .collect();
        let half = big_n / 2;
        let ratio_estimate = (terms[big_n - 1] / terms[half - 1]).powf(1.0 / (big_n - half) as f64);
        Ok(SummabilityReport {
            exponent,
            terms,
            partial_sums,
            ratio_estimate,
            summable: ratio_estimate < 1.0 - 1e-9,
        })
    }

    /// Constructive search for `L^{-n}(x) ∩ B(u, ρ) ≠ ∅`.
    ///
    /// The `n`-th preimages are `(r_1, …, r_n, x_1/β_1^n, x_2/β_2^n, …)`; the free
    /// block is copied from `u`, so only the forced tail decides membership.
    /// Coordinates pushed past the truncation are bounded by `‖x_tail‖_p / c^n`.
    pub fn strong_transitivity_witness(
        &self,
        x: &[f64],
        center: &[f64],
        radius: f64,
        n_max: usize,
    ) -> Result<WitnessOutcome> {
        self.check_len(x)?;
        self.check_len(center)?;
        if x.iter().all(|v| *v == 0.0) || !(radius > 0.0) {
            return contract("witness needs x ≠ 0 and ρ > 0");
        }
        let d = self.dim();
        let mut best = f64::INFINITY;
        for n in 1..=n_max.min(d - 1) {
            let mut z = vec![0.0; d];
            z[..n].copy_from_slice(&center[..n]);
            for k in 1..=d - n {
                z[n + k - 1] = x[k - 1] / self.beta(k, n);
            }
            let dropped: Vec<f64> = x[d - n..].to_vec();
            let tail_bound = self.lp_norm(&dropped) / self.c_lo.powi(n as i32);
            let dist = self.lp_distance(&z, center) + tail_bound;
            best = best.min(dist);
            if dist < radius {
                return Ok(WitnessOutcome::Found {
                    n,
                    word: center[..n].to_vec(),
                    distance_bound: dist,
                });
            }
        }
        Ok(WitnessOutcome::Failed {
            n_max,
            best_distance: best,
        })
    }
}

type MapFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type ProbFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub struct IfsMap {
    pub name: String,
    pub apply: Arc<MapFn>,
}

impl IfsMap {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            apply: Arc::new(f),
        }
    }

    /// `x ↦ scale·x + offset` on the line.
    pub fn affine(scale: f64, offset: f64) -> Self {
        Self::new(format!("{scale}x+{offset}"), move |x| {
            vec![scale * x[0] + offset]
        })
    }
}

/// IFS `{T_i}` on a box of `ℝ^d` with place-dependent probabilities `p_i(x)`.
#[derive(Clone)]
pub struct IfsSystem {
    maps: Vec<IfsMap>,
    probabilities: Arc<ProbFn>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Estimated `sup_t α̂_T(t)/t` per map.
    contractivity: Vec<f64>,
}

impl fmt::Debug for IfsSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.maps.iter().map(|m| m.name.as_str()).collect();
        write!(
            f,
            "IfsSystem({names:?}, contractivity {:?})",
            self.contractivity
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttractorCloud {
    pub points: Vec<Vec<f64>>,
    /// Hausdorff distance between the cloud and `∪ T_i(cloud)`.
    pub invariance_gap: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub enum IndexWitness {
    Found { index: Vec<usize>, point: Vec<f64> },
    Failed { k_max: usize, nearest_distance: f64 },
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl IfsSystem {
    /// Validates `Σ p_i = 1` and positivity on a probe grid, and that at least
    /// one map is weakly contractive (`α̂_T(t) < t` on a grid of `t`).
    pub fn new(
        maps: Vec<IfsMap>,
        probabilities: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self> {
        if maps.is_empty() || lo.len() != hi.len() || lo.is_empty() {
            return contract("IFS needs maps and a nondegenerate domain box");
        }
        let probabilities: Arc<ProbFn> = Arc::new(probabilities);
        let mut rng = substream(0, "ifs-validate");
        let d = lo.len();
        let sample = |rng: &mut crate::rng::LabRng| -> Vec<f64> {
            (0..d)
                .map(|i| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>())
                .collect()
        };
        for _ in 0..256 {
            let x = sample(&mut rng);
            let p = probabilities(&x);
            if p.len() != maps.len() || p.iter().any(|v| !(*v > 0.0)) {
                return contract("IFS probabilities must be positive, one per map");
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return contract("IFS probabilities must sum to 1");
            }
        }
        let diam = euclid(&lo, &hi);
        let contractivity: Vec<f64> = maps
            .iter()
            .map(|m| {
                let mut worst: f64 = 0.0;
                for g in 1..=20 {
                    let t = diam * g as f64 / 20.0;
                    for _ in 0..200 {
                        let x = sample(&mut rng);
                        let y = sample(&mut rng);
                        let dxy = euclid(&x, &y);
                        if dxy == 0.0 || dxy > t {
                            continue;
                        }
                        worst = worst.max(euclid(&(m.apply)(&x), &(m.apply)(&y)) / t);
                    }
                }
                worst
            })
            .collect();
        if contractivity.iter().all(|c| *c >= 1.0) {
            return contract("no IFS map is weakly contractive on the probe grid");
        }
        Ok(Self {
            maps,
            probabilities,
            lo,
            hi,
            contractivity,
        })
    }

    /// `T_1 = x/2`, `T_2 = x/2 + 1/2` with equal weights on `[0,1]`.
    pub fn dyadic() -> Self {
        Self::new(
            vec![IfsMap::affine(0.5, 0.0), IfsMap::affine(0.5, 0.5)],
            |_| vec![0.5, 0.5],
            vec![0.0],
            vec![1.0],
        )
        .expect("dyadic IFS is valid")
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Lower and upper corners of the domain box.
    pub fn domain(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn contractivity(&self) -> &[f64] {
        &self.contractivity
    }

    pub fn diameter(&self) -> f64 {
        euclid(&self.lo, &self.hi)
    }

    pub fn map(&self, i: usize, x: &[f64]) -> Vec<f64> {
        (self.maps[i].apply)(x)
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        (self.probabilities)(x)
    }

    /// `Σ_i p_i(x) φ(T_i x)`.
    pub fn transfer(&self, phi: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
        self.probabilities(x)
            .iter()
            .enumerate()
            .map(|(i, p)| p * phi(&self.map(i, x)))
            .sum()
    }

    /// `n`-fold iterate by recursion over the first step.
    pub fn transfer_n(&self, phi: &dyn Fn(&[f64]) -> f64, x: &[f64], n: usize) -> f64 {
        if n == 0 {
            return phi(x);
        }
        self.probabilities(x)
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.transfer_n(phi, &self.map(i, x), n - 1))
            .sum()
    }

    /// Draws `i ∼ p(x)` and returns `T_i(x)`.
    pub fn step<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let p = self.probabilities(x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = p.len() - 1;
        for (i, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.map(pick, x)
    }

    /// Hutchinson iteration from `seeds`, keeping at most `cap` points by
    /// uniform subsampling.
    pub fn attractor_iterate(
        &self,
        seeds: &[Vec<f64>],
        n: usize,
        cap: usize,
        seed: u64,
    ) -> Result<AttractorCloud> {
        if n == 0 || seeds.is_empty() {
            return contract("attractor iteration needs n ≥ 1 and seeds");
        }
        let mut rng = substream(seed, "attractor-subsample");
        let mut cloud: Vec<Vec<f64>> = seeds.to_vec();
        for _ in 0..n {
            cloud = self.hutchinson(&cloud);
            if cloud.len() > cap {
                // Partial Fisher–Yates keeps a uniform subset.
                for i in 0..cap {
                    let j = rng.random_range(i..cloud.len());
                    cloud.swap(i, j);
                }
                cloud.truncate(cap);
            }
        }
        let image = self.hutchinson(&cloud);
        let invariance_gap = hausdorff(&cloud, &image);
        Ok(AttractorCloud {
            points: cloud,
            invariance_gap,
            steps: n,
        })
    }

    fn hutchinson(&self, cloud: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.maps.len())
            .flat_map(|i| cloud.iter().map(move |x| self.map(i, x)))
            .collect()
    }

    /// Breadth-first search for a multi-index `J` with `T_J(x) ∈ B(center, radius)`,
    /// where `T_J = T_{j_1} ∘ ⋯ ∘ T_{j_k}`.
    pub fn irreducibility_witness(
        &self,
        x: &[f64],
        center: &[f64],
        radius: f64,
        k_max: usize,
    ) -> IndexWitness {
        let mut nearest = euclid(x, center);
        if nearest < radius {
            return IndexWitness::Found {
                index: Vec::new(),
                point: x.to_vec(),
            };
        }
        let mut frontier: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), x.to_vec())];
        for _ in 1..=k_max {
            let mut next = Vec::with_capacity(frontier.len() * self.maps.len());
            for (index, point) in &frontier {
                for i in 0..self.maps.len() {
                    let y = self.map(i, point);
                    let mut j = Vec::with_capacity(index.len() + 1);
                    j.push(i + 1);
                    j.extend_from_slice(index);
                    let dist = euclid(&y, center);
                    nearest = nearest.min(dist);
                    if dist < radius {
                        return IndexWitness::Found { index: j, point: y };
                    }
                    next.push((j, y));
                }
            }
            if next.len() > 1 << 22 {
                break;
            }
            frontier = next;
        }
        IndexWitness::Failed {
            k_max,
            nearest_distance: nearest,
        }
    }
}

/// Symmetric Hausdorff distance between two finite point sets.
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.first().map(|p| p.len()) == Some(1) {
        let sorted = |s: &[Vec<f64>]| {
            let mut v: Vec<f64> = s.iter().map(|p| p[0]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (sa, sb) = (sorted(a), sorted(b));
        return directed_1d(&sa, &sb).max(directed_1d(&sb, &sa));
    }
    let directed = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        s.iter()
            .map(|p| t.iter().map(|q| euclid(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn directed_1d(from: &[f64], to: &[f64]) -> f64 {
    from.iter()
        .map(|&x| {
            let i = to.partition_point(|&v| v < x);
            let mut d = f64::INFINITY;
            if i < to.len() {
                d = d.min((to[i] - x).abs());
            }
            if i > 0 {
                d = d.min((x - to[i - 1]).abs());
            }
            d
        })
        .fold(0.0, f64::max)
}
