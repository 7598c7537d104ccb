//! Potentials on configurations and empirical regularity estimators.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{contract, LabError, Result};
use crate::rng::substream_indexed;
use crate::space::{AlphabetTag, AprioriMeasure, Config, PathBuffer};

/// Number of couplings `J(n)` kept in a table; deeper terms are computed on demand.
const COUPLING_TABLE: usize = 1024;

type Evaluator = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A user supplied potential with declared bounds.
#[derive(Clone)]
pub struct CustomPotential {
    pub name: String,
    pub eval: Arc<Evaluator>,
    pub sup: f64,
    pub inf: f64,
    pub min_depth: usize,
    /// Number of leading points the value depends on, when finite.
    pub locality: Option<usize>,
}

#[derive(Clone)]
pub enum Potential {
    Constant(f64),
    /// `f(x) = table[x_1, …, x_k]` over a finite alphabet; entry index is
    /// `Σ_i idx(x_i)·s^{k-i}`.
    FiniteRange {
        points: Vec<f64>,
        range: usize,
        table: Vec<f64>,
    },
    /// `Σ_{n=1}^{D-1} n^{-2-ε} ⟨x_1, x_{n+1}⟩` on `(S^{N-1})^ℕ`.
    DysonSphere {
        eps: f64,
        ambient: usize,
        couplings: Arc<Vec<f64>>,
    },
    /// `(x_1/(1+x_1)) Σ_{n=1}^{D-1} n^{-2-ε} x_n/(1+x_n)` on `[0,∞)^ℕ`.
    DysonHalfLine {
        eps: f64,
        couplings: Arc<Vec<f64>>,
    },
    Custom(CustomPotential),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Constant(c) => write!(f, "Constant({c})"),
            Potential::FiniteRange { range, table, .. } => {
                write!(f, "FiniteRange(k={range}, {table:?})")
            }
            Potential::DysonSphere { eps, ambient, .. } => {
                write!(f, "DysonSphere(eps={eps}, N={ambient})")
            }
            Potential::DysonHalfLine { eps, .. } => write!(f, "DysonHalfLine(eps={eps})"),
            Potential::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

fn coupling_table(eps: f64) -> Arc<Vec<f64>> {
    let mut j = vec![0.0; COUPLING_TABLE];
    for (n, v) in j.iter_mut().enumerate().skip(1) {
        *v = (n as f64).powf(-2.0 - eps);
    }
    Arc::new(j)
}

/// Upper bound on `Σ_{n≥m} n^{-2-ε}`.
pub fn dyson_tail_sum_bound(eps: f64, m: usize) -> f64 {
    let m = m.max(1) as f64;
    m.powf(-2.0 - eps) + m.powf(-1.0 - eps) / (1.0 + eps)
}

/// `Σ_{n≥1} n^{-2-ε}` from below (exact partial sum) and above (plus tail bound).
fn dyson_total_bounds(eps: f64) -> (f64, f64) {
    let m = 20_000;
    let partial: f64 = (1..m).map(|n| (n as f64).powf(-2.0 - eps)).sum();
    (partial, partial + dyson_tail_sum_bound(eps, m))
}

impl Potential {
    pub fn finite_range(
        points: Vec<f64>,
        range: usize,
        rule: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if range == 0 || points.is_empty() {
            return contract("finite-range potential needs range ≥ 1 and a nonempty alphabet");
        }
        let s = points.len();
        let size = s.checked_pow(range as u32).filter(|&n| n <= 1 << 20);
        let Some(size) = size else {
            return contract("finite-range table too large");
        };
        let mut letters = vec![0.0; range];
        let table = (0..size)
            .map(|mut idx| {
                for slot in letters.iter_mut().rev() {
                    *slot = points[idx % s];
                    idx /= s;
                }
                rule(&letters)
            })
            .collect();
        Ok(Potential::FiniteRange {
            points,
            range,
            table,
        })
    }

    pub fn dyson_sphere(eps: f64, ambient: usize) -> Result<Self> {
        if !(eps > 0.0) || ambient < 2 {
            return contract("Dyson sphere potential needs ε > 0 and N ≥ 2");
        }
        Ok(Potential::DysonSphere {
            eps,
            ambient,
            couplings: coupling_table(eps),
        })
    }

    pub fn dyson_half_line(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return contract("Dyson half-line potential needs ε > 0");
        }
        Ok(Potential::DysonHalfLine {
            eps,
            couplings: coupling_table(eps),
        })
    }

    pub fn custom(
        name: impl Into<String>,
        inf: f64,
        sup: f64,
        min_depth: usize,
        locality: Option<usize>,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Potential::Custom(CustomPotential {
            name: name.into(),
            eval: Arc::new(eval),
            sup,
            inf,
            min_depth,
            locality,
        })
    }

    pub fn sup_bound(&self) -> f64 {
        match self {
            Potential::Constant(c) => *c,
            Potential::FiniteRange { table, .. } => {
                table.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
            Potential::DysonSphere { eps, .. } | Potential::DysonHalfLine { eps, .. } => {
                dyson_total_bounds(*eps).1
            }
            Potential::Custom(c) => c.sup,
        }
    }

    pub fn inf_bound(&self) -> f64 {
        match self {
            Potential::Constant(c) => *c,
            Potential::FiniteRange { table, .. } => {
                table.iter().copied().fold(f64::INFINITY, f64::min)
            }
            Potential::DysonSphere { eps, .. } => -dyson_total_bounds(*eps).1,
            Potential::DysonHalfLine { .. } => 0.0,
            Potential::Custom(c) => c.inf,
        }
    }

    /// Bound on `|f(x) − f(x truncated to depth)|`.
    pub fn tail_bound(&self, depth: usize) -> f64 {
        match self {
            Potential::DysonSphere { eps, .. } | Potential::DysonHalfLine { eps, .. } => {
                dyson_tail_sum_bound(*eps, depth)
            }
            _ => 0.0,
        }
    }

    pub fn min_depth(&self) -> usize {
        match self {
            Potential::Constant(_) => 1,
            Potential::FiniteRange { range, .. } => *range,
            Potential::DysonSphere { .. } | Potential::DysonHalfLine { .. } => 2,
            Potential::Custom(c) => c.min_depth,
        }
    }

    /// Number of leading points `f` depends on, if finite.
    pub fn locality(&self) -> Option<usize> {
        match self {
            Potential::Constant(_) => Some(0),
            Potential::FiniteRange { range, .. } => Some(*range),
            Potential::Custom(c) => c.locality,
            _ => None,
        }
    }

    /// Checks that the potential can be evaluated on configurations with this tag.
    pub fn check_alphabet(&self, tag: AlphabetTag) -> Result<()> {
        let ok = match self {
            Potential::Constant(_) | Potential::Custom(_) => true,
            Potential::FiniteRange { points, .. } => tag == AlphabetTag::Finite(points.len()),
            Potential::DysonSphere { ambient, .. } => tag == AlphabetTag::Sphere(*ambient),
            Potential::DysonHalfLine { .. } => tag == AlphabetTag::HalfLine,
        };
        if ok {
            Ok(())
        } else {
            contract(format!("{self:?} cannot be evaluated on alphabet {tag:?}"))
        }
    }

    /// Checked evaluation.
    pub fn eval(&self, x: &Config) -> Result<f64> {
        self.check_alphabet(x.tag())?;
        if x.depth() < self.min_depth() {
            return contract(format!(
                "potential needs depth ≥ {}, got {}",
                self.min_depth(),
                x.depth()
            ));
        }
        Ok(self.eval_coords(x.coords()))
    }

    /// Unchecked evaluation on a flat coordinate slice.
    #[inline]
    pub fn eval_coords(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Constant(c) => *c,
            Potential::FiniteRange {
                points,
                range,
                table,
            } => {
                let s = points.len();
                let mut idx = 0;
                for &v in &x[..*range] {
                    let i = points.iter().position(|&p| p == v).unwrap_or(0);
                    idx = idx * s + i;
                }
                table[idx]
            }
            Potential::DysonSphere {
                ambient, couplings, ..
            } => {
                let n_dim = *ambient;
                let depth = x.len() / n_dim;
                let first = &x[..n_dim];
                let mut total = 0.0;
                for (n, y) in x[n_dim..].chunks_exact(n_dim).enumerate() {
                    let dot: f64 = first.iter().zip(y).map(|(a, b)| a * b).sum();
                    total += coupling(couplings, self, n + 1) * dot;
                }
                debug_assert!(depth >= 2);
                total
            }
            Potential::DysonHalfLine { couplings, .. } => {
                let depth = x.len();
                let lead = x[0] / (1.0 + x[0]);
                let mut total = 0.0;
                for n in 1..depth {
                    total += coupling(couplings, self, n) * x[n - 1] / (1.0 + x[n - 1]);
                }
                lead * total
            }
            Potential::Custom(c) => (c.eval)(x),
        }
    }
}

#[inline]
fn coupling(table: &[f64], f: &Potential, n: usize) -> f64 {
    if n < table.len() {
        table[n]
    } else {
        let eps = match f {
            Potential::DysonSphere { eps, .. } | Potential::DysonHalfLine { eps, .. } => *eps,
            _ => unreachable!(),
        };
        (n as f64).powf(-2.0 - eps)
    }
}

/// `fⁿ = f(x_1) + … + f(x_n)` along a path of configurations.
pub fn birkhoff_sum(f: &Potential, path: &[Config]) -> Result<f64> {
    if path.is_empty() {
        return contract("Birkhoff sum over an empty path");
    }
    path.iter().map(|x| f.eval(x)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ModulusOfContinuity {
    /// `r^α`, `α ∈ (0, 1]`.
    Power { alpha: f64 },
    /// `(log(r0/r))^{-ε}`.
    Log { eps: f64, r0: f64 },
}

impl ModulusOfContinuity {
    pub fn power(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return contract("power modulus needs α ∈ (0, 1]");
        }
        Ok(Self::Power { alpha })
    }

    /// Log modulus with `r0 = e²·(1 + diameter)`, so `log(r0/r) ≥ 2` on the space.
    pub fn log(eps: f64, diameter: f64) -> Result<Self> {
        if !(eps > 0.0) || !(diameter > 0.0) {
            return contract("log modulus needs ε > 0 and a positive diameter");
        }
        Ok(Self::Log {
            eps,
            r0: std::f64::consts::E.powi(2) * (1.0 + diameter),
        })
    }

    /// Log modulus for the configuration space (diameter 1).
    pub fn log_config(eps: f64) -> Result<Self> {
        Self::log(eps, 1.0)
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match *self {
            Self::Power { alpha } => r.powf(alpha),
            Self::Log { eps, r0 } => (r0 / r).ln().powf(-eps),
        }
    }

    /// `D_ω = sup_{t ∈ (0,1]} t/ω(t)`, by a log-spaced grid plus local refinement.
    pub fn comparison_constant(&self) -> f64 {
        let g = |t: f64| t / self.eval(t);
        let mut best_t = 1.0;
        let mut best = g(1.0);
        let steps = 20_000;
        for i in 0..steps {
            let t = (-(i as f64) * 700.0 / steps as f64).exp();
            let v = g(t);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        let (mut lo, mut hi) = (best_t * 0.9, (best_t * 1.1).min(1.0));
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if g(m1) < g(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        best.max(g(0.5 * (lo + hi)))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub holder: Option<f64>,
    pub flatness: Option<f64>,
    pub samples: usize,
    /// Coordinates of the pair attaining the maximum.
    pub argmax: Option<(Vec<f64>, Vec<f64>)>,
}

/// Random pair with a shared prefix of random length, so small distances are probed.
fn sample_pair<R: Rng + ?Sized>(
    measure: &AprioriMeasure,
    depth: usize,
    rng: &mut R,
) -> (Config, Config) {
    let x = Config::random(measure, depth, rng);
    let y_fresh = Config::random(measure, depth, rng);
    let shared = rng.random_range(0..depth.div_ceil(2));
    let dim = measure.alphabet().point_dim();
    let mut yc = y_fresh.coords().to_vec();
    yc[..shared * dim].copy_from_slice(&x.coords()[..shared * dim]);
    (x, Config::from_raw(measure.tag(), yc))
}

/// Lower bound on `Hol_ω(f)` from random pairs.
pub fn estimate_holder<R: Rng + ?Sized>(
    f: &Potential,
    modulus: &ModulusOfContinuity,
    measure: &AprioriMeasure,
    depth: usize,
    pairs: usize,
    rng: &mut R,
) -> Result<RegularityReport> {
    f.check_alphabet(measure.tag())?;
    if pairs == 0 || depth < f.min_depth() {
        return contract("estimate_holder needs pairs ≥ 1 and depth ≥ min_depth");
    }
    let mut best = 0.0;
    let mut argmax = None;
    for _ in 0..pairs {
        let (x, y) = sample_pair(measure, depth, rng);
        let d = x.tag().coords_distance(x.coords(), y.coords());
        if d <= 0.0 {
            continue;
        }
        let ratio = (f.eval_coords(x.coords()) - f.eval_coords(y.coords())).abs() / modulus.eval(d);
        if ratio > best {
            best = ratio;
            argmax = Some((x.coords().to_vec(), y.coords().to_vec()));
        }
    }
    Ok(RegularityReport {
        holder: Some(best),
        flatness: None,
        samples: pairs,
        argmax,
    })
}

/// Empirical flatness constant along the natural coupling:
/// `max |fⁿ(x̄ʷ) − fⁿ(ȳʷ)| / ω̃(d(x,y))` over trials and `n ≤ n_max`.
///
/// Each trial draws its word letter by letter after the pair, so for a fixed
/// seed the estimate is nondecreasing in `n_max`.
#[allow(clippy::too_many_arguments)]
pub fn flatness_estimate<R: Rng + ?Sized>(
    f: &Potential,
    measure: &AprioriMeasure,
    target: &ModulusOfContinuity,
    depth: usize,
    n_max: usize,
    trials: usize,
    allow_override: bool,
    rng: &mut R,
) -> Result<RegularityReport> {
    f.check_alphabet(measure.tag())?;
    if let Potential::DysonSphere { eps, .. } | Potential::DysonHalfLine { eps, .. } = f {
        if *eps <= 2.0 && !allow_override {
            return Err(LabError::Refused(format!(
                "Dyson flatness along the natural coupling is only established for ε > 2 \
                 (got ε = {eps}); pass the override to estimate anyway"
            )));
        }
    }
    if depth < f.min_depth() || n_max == 0 {
        return contract("flatness_estimate needs n_max ≥ 1 and depth ≥ min_depth");
    }
    let dim = measure.alphabet().point_dim();
    let mut bx = PathBuffer::new(dim, depth, n_max);
    let mut by = PathBuffer::new(dim, depth, n_max);
    let mut letter = vec![0.0; dim];
    let mut best = 0.0;
    let mut argmax = None;
    // One substream per trial keeps the paired paths prefix-stable in `n_max`.
    let base: u64 = rng.random();
    for t in 0..trials {
        let mut trial_rng = substream_indexed(base, "flatness-trial", t as u64);
        let rng = &mut trial_rng;
        let (x, y) = sample_pair(measure, depth, rng);
        let d = x.tag().coords_distance(x.coords(), y.coords());
        if d <= 0.0 {
            continue;
        }
        let w = target.eval(d);
        bx.reset(x.coords());
        by.reset(y.coords());
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n_max {
            measure.sample_into(rng, &mut letter);
            bx.prepend(&letter);
            by.prepend(&letter);
            sx += f.eval_coords(bx.current());
            sy += f.eval_coords(by.current());
            let ratio = (sx - sy).abs() / w;
            if ratio > best {
                best = ratio;
                argmax = Some((x.coords().to_vec(), y.coords().to_vec()));
            }
        }
    }
    Ok(RegularityReport {
        holder: None,
        flatness: Some(best),
        samples: trials,
        argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::space::{prepend, Alphabet};

    fn circle() -> AprioriMeasure {
        AprioriMeasure::sphere(2).unwrap()
    }

    #[test]
    fn dyson_aligned_configuration_sums_couplings() {
        let f = Potential::dyson_sphere(1.0, 2).unwrap();
        let depth = 200;
        let x = Config::constant(&Alphabet::Sphere { ambient: 2 }, &[1.0, 0.0], depth).unwrap();
        let v = f.eval(&x).unwrap();
        let partial: f64 = (1..depth).map(|n| (n as f64).powi(-3)).sum();
        assert!((v - partial).abs() < 1e-14);
        // ζ(3) = 1.2020569…; the omitted tail is bounded by tail_bound(depth).
        let zeta3 = 1.202_056_903_159_594_3;
        assert!(zeta3 - v >= 0.0 && zeta3 - v <= f.tail_bound(depth));

        let mut coords = x.coords().to_vec();
        for c in coords[2..].iter_mut() {
            *c = -*c;
        }
        let y = Config::new(&Alphabet::Sphere { ambient: 2 }, coords).unwrap();
        assert!((f.eval(&y).unwrap() + v).abs() < 1e-14);
    }

    #[test]
    fn dyson_tail_bound_dominates_partial_sums() {
        for eps in [0.5, 1.0, 3.0] {
            for d in [2usize, 5, 20, 100] {
                let tail: f64 = (d..200_000).map(|n| (n as f64).powf(-2.0 - eps)).sum();
                assert!(tail <= dyson_tail_sum_bound(eps, d));
            }
            assert!(
                dyson_tail_sum_bound(eps, 10)
                    <= 10f64.powf(-1.0 - eps) / (1.0 + eps) + 10f64.powf(-2.0 - eps)
            );
        }
    }

    #[test]
    fn negating_the_tail_negates_dyson() {
        let mu = AprioriMeasure::sphere(3).unwrap();
        let f = Potential::dyson_sphere(2.5, 3).unwrap();
        let mut rng = substream(5, "neg");
        for _ in 0..50 {
            let x = Config::random(&mu, 17, &mut rng);
            let mut c = x.coords().to_vec();
            c[3..].iter_mut().for_each(|v| *v = -*v);
            let y = Config::from_raw(x.tag(), c);
            assert!((f.eval(&x).unwrap() + f.eval(&y).unwrap()).abs() < 1e-14);
            assert!(f.eval(&x).unwrap() <= f.sup_bound() && f.eval(&x).unwrap() >= f.inf_bound());
        }
    }

    #[test]
    fn insufficient_depth_is_a_contract_violation() {
        let f = Potential::dyson_sphere(1.0, 2).unwrap();
        let x = Config::new(&Alphabet::Sphere { ambient: 2 }, vec![1.0, 0.0]).unwrap();
        assert!(f.eval(&x).is_err());
        let g = Potential::finite_range(vec![0.0, 1.0], 2, |v| v[0] * v[1]).unwrap();
        assert!(g.eval(&x).is_err());
    }

    #[test]
    fn half_line_dyson_is_bounded() {
        let f = Potential::dyson_half_line(3.0).unwrap();
        let mu = AprioriMeasure::exponential();
        let mut rng = substream(2, "hl");
        for _ in 0..200 {
            let x = Config::random(&mu, 12, &mut rng);
            let v = f.eval(&x).unwrap();
            assert!(v >= f.inf_bound() && v <= f.sup_bound());
        }
    }

    #[test]
    fn birkhoff_sum_examples() {
        let bits = Alphabet::Finite(vec![0.0, 1.0]);
        let c = Potential::Constant(0.3);
        let x = Config::constant(&bits, &[1.0], 4).unwrap();
        let path = vec![x.clone(); 7];
        assert!((birkhoff_sum(&c, &path).unwrap() - 2.1).abs() < 1e-15);
        assert!(birkhoff_sum(&c, &[]).is_err());

        let f = Potential::finite_range(vec![0.0, 1.0], 2, |v| v[0] * v[1]).unwrap();
        assert_eq!(birkhoff_sum(&f, std::slice::from_ref(&x)).unwrap(), 1.0);
        let x1 = prepend(&[1.0], &x, &bits).unwrap();
        let x2 = prepend(&[1.0], &x1, &bits).unwrap();
        assert_eq!(birkhoff_sum(&f, &[x1, x2]).unwrap(), 2.0);
    }

    #[test]
    fn modulus_properties() {
        let w = ModulusOfContinuity::log_config(1.5).unwrap();
        assert_eq!(w.eval(0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..=1000 {
            let r = i as f64 / 1000.0;
            let v = w.eval(r);
            assert!(v > 0.0 && v >= prev);
            prev = v;
        }
        assert!(w.eval(1e-300) < 0.01);
        for eps in [0.5, 1.0, 2.0, 3.0] {
            let w = ModulusOfContinuity::log_config(eps).unwrap();
            let dw = w.comparison_constant();
            for i in 1..=10_000 {
                let t = i as f64 / 10_000.0;
                assert!(t <= dw * w.eval(t) * (1.0 + 1e-9), "eps {eps} t {t}");
            }
        }
    }

    #[test]
    fn holder_of_constant_is_zero() {
        let w = ModulusOfContinuity::log_config(1.0).unwrap();
        let mut rng = substream(1, "h");
        let r =
            estimate_holder(&Potential::Constant(2.0), &w, &circle(), 8, 100, &mut rng).unwrap();
        assert_eq!(r.holder, Some(0.0));
    }

    #[test]
    fn holder_estimate_is_stable_for_dyson() {
        let f = Potential::dyson_sphere(1.0, 2).unwrap();
        let w = ModulusOfContinuity::log_config(1.0).unwrap();
        let small = estimate_holder(&f, &w, &circle(), 24, 1_000, &mut substream(1, "a")).unwrap();
        let large =
            estimate_holder(&f, &w, &circle(), 24, 100_000, &mut substream(1, "b")).unwrap();
        let (s, l) = (small.holder.unwrap(), large.holder.unwrap());
        assert!(s.is_finite() && l.is_finite() && l > 0.0);
        assert!(l / s <= 2.0 && s / l <= 2.0, "{s} vs {l}");
    }

    #[test]
    fn projection_holder_constant_is_bounded() {
        // π_{k,n}(x) = x_n^k. The difference is at most 2·min{d_E, 1} ≤ 2^{n+1} d(x,y),
        // hence at most 2^{n+1} D_ω ω(d).
        let w = ModulusOfContinuity::log_config(1.0).unwrap();
        let dw = w.comparison_constant();
        for n in 1..=3usize {
            let proj =
                Potential::custom("projection", -1.0, 1.0, n, Some(n), move |x| x[2 * (n - 1)]);
            let r = estimate_holder(
                &proj,
                &w,
                &circle(),
                10,
                20_000,
                &mut substream(n as u64, "p"),
            )
            .unwrap();
            assert!(r.holder.unwrap() <= 2f64.powi(n as i32 + 1) * dw, "n={n}");
        }
    }

    #[test]
    fn flatness_examples() {
        let w2 = ModulusOfContinuity::log_config(2.0).unwrap();
        let c = flatness_estimate(
            &Potential::Constant(1.0),
            &circle(),
            &w2,
            40,
            16,
            200,
            false,
            &mut substream(1, "c"),
        )
        .unwrap();
        assert_eq!(c.flatness, Some(0.0));

        let bits = AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap();
        let r1 = Potential::finite_range(vec![0.0, 1.0], 1, |v| 0.7 * v[0]).unwrap();
        let r =
            flatness_estimate(&r1, &bits, &w2, 12, 6, 500, false, &mut substream(2, "r1")).unwrap();
        assert_eq!(r.flatness, Some(0.0));

        let f = Potential::dyson_sphere(1.5, 2).unwrap();
        assert!(matches!(
            flatness_estimate(&f, &circle(), &w2, 40, 8, 10, false, &mut substream(3, "x")),
            Err(LabError::Refused(_))
        ));
        assert!(
            flatness_estimate(&f, &circle(), &w2, 40, 8, 10, true, &mut substream(3, "x")).is_ok()
        );
    }

    #[test]
    fn range_two_flatness_matches_enumeration() {
        // f = x_1 x_2 on {0,1}: along the coupling only the first step sees x vs y,
        // so |fⁿ(x̄) − fⁿ(ȳ)| = w_1·|x_1 − y_1| for every n.
        let bits = AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap();
        let f = Potential::finite_range(vec![0.0, 1.0], 2, |v| v[0] * v[1]).unwrap();
        let w = ModulusOfContinuity::log_config(1.0).unwrap();
        let r =
            flatness_estimate(&f, &bits, &w, 14, 6, 4000, false, &mut substream(4, "r2")).unwrap();
        // x_1 ≠ y_1 forces d ≥ 1/2, where the ratio 1/ω(d) is largest.
        let got = r.flatness.unwrap();
        assert!(got <= 1.0 / w.eval(0.5) + 1e-12, "{got}");
        assert!(got >= 1.0 / w.eval(0.52), "{got}");
    }

    #[test]
    fn dyson_flatness_stabilizes() {
        let f = Potential::dyson_sphere(3.0, 2).unwrap();
        let w2 = ModulusOfContinuity::log_config(2.0).unwrap();
        let a = flatness_estimate(
            &f,
            &circle(),
            &w2,
            72,
            16,
            3000,
            false,
            &mut substream(9, "fl"),
        )
        .unwrap();
        let b = flatness_estimate(
            &f,
            &circle(),
            &w2,
            72,
            32,
            3000,
            false,
            &mut substream(9, "fl"),
        )
        .unwrap();
        let (a, b) = (a.flatness.unwrap(), b.flatness.unwrap());
        assert!(b >= a && b <= 1.2 * a, "{a} -> {b}");
    }
}
