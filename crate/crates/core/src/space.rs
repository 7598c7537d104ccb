//! Alphabets, a priori measures and the depth-truncated sequence space `E^ℕ`.
//!
//! A configuration stores its first `D` alphabet points in one flat buffer;
//! point `i` occupies `coords[i * dim .. (i + 1) * dim]` where `dim` is the
//! ambient dimension of a letter (1 except for spheres). Prepending a letter
//! keeps the depth fixed by dropping the last point, so a pipeline that
//! prepends `n` times and then compares coordinate `k` needs `D ≥ n + k`.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Alphabet {
    /// Finitely many real labels with the discrete 0/1 metric.
    Finite(Vec<f64>),
    /// Unit sphere `S^{N-1}` in `ℝ^N`, `ambient = N ≥ 2`, chordal metric.
    Sphere { ambient: usize },
    /// `[0, ∞)` with `|a − b|`.
    HalfLine,
    /// `ℝ` with `|a − b|`.
    RealLine,
}

/// Cheap identity of an alphabet carried by every [`Config`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlphabetTag {
    Finite(usize),
    Sphere(usize),
    HalfLine,
    RealLine,
}

impl AlphabetTag {
    pub fn point_dim(self) -> usize {
        match self {
            AlphabetTag::Sphere(n) => n,
            _ => 1,
        }
    }

    /// Intrinsic letter distance `d_E` (uncapped).
    #[inline]
    pub fn letter_distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            AlphabetTag::Finite(_) => {
                if a[0] == b[0] {
                    0.0
                } else {
                    1.0
                }
            }
            AlphabetTag::Sphere(_) => a
                .iter()
                .zip(b)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt(),
            AlphabetTag::HalfLine | AlphabetTag::RealLine => (a[0] - b[0]).abs(),
        }
    }

    /// Distance `Σ_{n≤D} 2^{-n} min{d_E(x_n, y_n), 1}` on flat coordinate slices.
    pub fn coords_distance(self, x: &[f64], y: &[f64]) -> f64 {
        let dim = self.point_dim();
        let mut weight = 0.5;
        let mut total = 0.0;
        for (a, b) in x.chunks_exact(dim).zip(y.chunks_exact(dim)) {
            total += weight * self.letter_distance(a, b).min(1.0);
            weight *= 0.5;
        }
        total
    }
}

impl Alphabet {
    pub fn tag(&self) -> AlphabetTag {
        match self {
            Alphabet::Finite(p) => AlphabetTag::Finite(p.len()),
            Alphabet::Sphere { ambient } => AlphabetTag::Sphere(*ambient),
            Alphabet::HalfLine => AlphabetTag::HalfLine,
            Alphabet::RealLine => AlphabetTag::RealLine,
        }
    }

    pub fn point_dim(&self) -> usize {
        self.tag().point_dim()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        if a.len() != self.point_dim() || a.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            Alphabet::Finite(points) => points.contains(&a[0]),
            Alphabet::Sphere { .. } => {
                let norm2: f64 = a.iter().map(|v| v * v).sum();
                (norm2.sqrt() - 1.0).abs() <= 1e-9
            }
            Alphabet::HalfLine => a[0] >= 0.0,
            Alphabet::RealLine => true,
        }
    }

    /// Index of a finite letter.
    pub fn index_of(&self, a: f64) -> Option<usize> {
        match self {
            Alphabet::Finite(points) => points.iter().position(|&p| p == a),
            _ => None,
        }
    }
}

/// Replaces the configuration metric by `min{1, d}`.
///
/// The weighted configuration distance never exceeds `1 − 2^{-D}`, so the
/// policy is the identity on `E^ℕ`; it matters for the ℓᵖ spaces of the
/// weighted shift, whose norm distance is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundedMetricPolicy {
    pub enabled: bool,
}

impl BoundedMetricPolicy {
    pub fn for_alphabet(alphabet: &Alphabet) -> Self {
        Self {
            enabled: matches!(alphabet, Alphabet::HalfLine | Alphabet::RealLine),
        }
    }

    #[inline]
    pub fn apply(self, d: f64) -> f64 {
        if self.enabled {
            d.min(1.0)
        } else {
            d
        }
    }
}

/// Fully supported a priori probability on an alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct AprioriMeasure {
    alphabet: Alphabet,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl AprioriMeasure {
    pub fn finite(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return contract("finite a priori measure needs one weight per point");
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return contract("a priori weights must be strictly positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return contract(format!("a priori weights sum to {total}, not 1"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() || points[..i].contains(p) {
                return contract("finite alphabet points must be distinct and finite");
            }
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            alphabet: Alphabet::Finite(points),
            weights,
            cumulative,
        })
    }

    pub fn uniform_finite(points: Vec<f64>) -> Result<Self> {
        let s = points.len();
        Self::finite(points, vec![1.0 / s as f64; s])
    }

    pub fn sphere(ambient: usize) -> Result<Self> {
        if ambient < 2 {
            return contract("sphere alphabets need ambient dimension N ≥ 2");
        }
        Ok(Self::continuous(Alphabet::Sphere { ambient }))
    }

    /// Unit-rate exponential on `[0, ∞)`.
    pub fn exponential() -> Self {
        Self::continuous(Alphabet::HalfLine)
    }

    /// Standard normal on `ℝ`.
    pub fn gaussian() -> Self {
        Self::continuous(Alphabet::RealLine)
    }

    fn continuous(alphabet: Alphabet) -> Self {
        Self {
            alphabet,
            weights: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn tag(&self) -> AlphabetTag {
        self.alphabet.tag()
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.alphabet, Alphabet::Finite(_))
    }

    /// `(point, weight)` pairs of a finite measure; empty otherwise.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let points: &[f64] = match &self.alphabet {
            Alphabet::Finite(p) => p,
            _ => &[],
        };
        points.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of uniforms consumed by [`Self::letter_from_uniforms`].
    pub fn uniforms_per_letter(&self) -> usize {
        match self.alphabet {
            Alphabet::Sphere { ambient: 2 } => 1,
            Alphabet::Sphere { ambient } => ambient,
            _ => 1,
        }
    }

    /// Inverse-transform map from `[0,1)^k` to a letter; drives the
    /// stratified word banks.
    pub fn letter_from_uniforms(&self, u: &[f64], out: &mut [f64]) {
        match &self.alphabet {
            Alphabet::Finite(points) => {
                let i = self
                    .cumulative
                    .iter()
                    .position(|&c| u[0] < c)
                    .unwrap_or(points.len() - 1);
                out[0] = points[i];
            }
            Alphabet::Sphere { ambient: 2 } => {
                let theta = std::f64::consts::TAU * u[0];
                out[0] = theta.cos();
                out[1] = theta.sin();
            }
            Alphabet::Sphere { .. } => {
                let normal = Normal::standard();
                for (o, &ui) in out.iter_mut().zip(u) {
                    *o = normal.inverse_cdf(ui.clamp(1e-300, 1.0 - 1e-16));
                }
                normalize(out);
            }
            Alphabet::HalfLine => out[0] = -(1.0 - u[0]).ln(),
            Alphabet::RealLine => {
                out[0] = Normal::standard().inverse_cdf(u[0].clamp(1e-300, 1.0 - 1e-16))
            }
        }
    }

    /// One draw from the measure, written into `out` (length = point dim).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.alphabet {
            Alphabet::Finite(_) => self.letter_from_uniforms(&[rng.random::<f64>()], out),
            Alphabet::Sphere { .. } => loop {
                for o in out.iter_mut() {
                    *o = StandardNormal.sample(rng);
                }
                if normalize(out) {
                    break;
                }
            },
            Alphabet::HalfLine => out[0] = Exp1.sample(rng),
            Alphabet::RealLine => out[0] = StandardNormal.sample(rng),
        }
    }

    /// Finite-alphabet index of a letter drawn with the same uniform as
    /// [`Self::sample_into`]; `None` for continuous alphabets.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if !self.is_finite() {
            return None;
        }
        let u: f64 = rng.random();
        Some(
            self.cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(self.weights.len() - 1),
        )
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// `sample_point`: a single draw from `μ`.
pub fn sample_point<R: Rng + ?Sized>(measure: &AprioriMeasure, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; measure.alphabet().point_dim()];
    measure.sample_into(rng, &mut out);
    out
}

/// A depth-truncated point of `E^ℕ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    tag: AlphabetTag,
    coords: Vec<f64>,
}

impl Config {
    /// Validates every coordinate against the alphabet.
    pub fn new(alphabet: &Alphabet, coords: Vec<f64>) -> Result<Self> {
        let dim = alphabet.point_dim();
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return contract("configuration needs a positive whole number of points");
        }
        if let Some(bad) = coords.chunks_exact(dim).position(|p| !alphabet.contains(p)) {
            return contract(format!("coordinate {} is not in the alphabet", bad + 1));
        }
        Ok(Self {
            tag: alphabet.tag(),
            coords,
        })
    }

    /// Constant configuration `(a, a, …, a)` of the given depth.
    pub fn constant(alphabet: &Alphabet, letter: &[f64], depth: usize) -> Result<Self> {
        Self::new(alphabet, letter.repeat(depth))
    }

    pub fn random<R: Rng + ?Sized>(measure: &AprioriMeasure, depth: usize, rng: &mut R) -> Self {
        let dim = measure.alphabet().point_dim();
        let mut coords = vec![0.0; dim * depth];
        for p in coords.chunks_exact_mut(dim) {
            measure.sample_into(rng, p);
        }
        Self {
            tag: measure.tag(),
            coords,
        }
    }

    /// Trusted constructor for buffers produced inside the crate.
    pub(crate) fn from_raw(tag: AlphabetTag, coords: Vec<f64>) -> Self {
        debug_assert_eq!(coords.len() % tag.point_dim(), 0);
        Self { tag, coords }
    }

    pub fn tag(&self) -> AlphabetTag {
        self.tag
    }

    pub fn depth(&self) -> usize {
        self.coords.len() / self.tag.point_dim()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub(crate) fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    /// Point `n` (1-based, as in `x = (x_1, x_2, …)`).
    pub fn point(&self, n: usize) -> &[f64] {
        let dim = self.tag.point_dim();
        &self.coords[(n - 1) * dim..n * dim]
    }

    pub fn truncated(&self, depth: usize) -> Config {
        let dim = self.tag.point_dim();
        Self::from_raw(
            self.tag,
            self.coords[..depth.min(self.depth()) * dim].to_vec(),
        )
    }
}

/// Weighted product distance between two configurations of equal depth.
///
/// Ignoring coordinates beyond `D` costs at most [`distance_tail_bound`]`(D)`.
pub fn config_distance(x: &Config, y: &Config) -> Result<f64> {
    if x.tag != y.tag {
        return contract("distance between configurations over different alphabets");
    }
    if x.depth() != y.depth() {
        return contract(format!("depth mismatch {} vs {}", x.depth(), y.depth()));
    }
    Ok(x.tag.coords_distance(&x.coords, &y.coords))
}

/// `2^{-D}`: the most the unseen coordinates can add to a distance.
pub fn distance_tail_bound(depth: usize) -> f64 {
    0.5_f64.powi(depth as i32)
}

/// `a·x` truncated to the depth of `x`.
pub fn prepend(letter: &[f64], x: &Config, alphabet: &Alphabet) -> Result<Config> {
    if alphabet.tag() != x.tag || !alphabet.contains(letter) {
        return contract("prepended letter is not in the configuration's alphabet");
    }
    let mut coords = Vec::with_capacity(x.coords.len());
    coords.extend_from_slice(letter);
    coords.extend_from_slice(&x.coords[..x.coords.len() - letter.len()]);
    Ok(Config::from_raw(x.tag, coords))
}

/// Left shift `σ(x) = (x_2, …, x_D)`; the depth drops by one.
pub fn shift(x: &Config) -> Result<Config> {
    if x.depth() < 2 {
        return contract("shift needs depth ≥ 2");
    }
    let dim = x.tag.point_dim();
    Ok(Config::from_raw(x.tag, x.coords[dim..].to_vec()))
}

/// Scratch buffer realizing repeated prepends without copying.
///
/// The base configuration sits at the tail of the buffer and each prepend
/// moves the window start one point to the left, so the visible window is
/// always `w_j ⋯ w_1 · x` truncated to depth `D`.
#[derive(Clone, Debug)]
pub struct PathBuffer {
    buf: Vec<f64>,
    dim: usize,
    depth: usize,
    capacity: usize,
    start: usize,
}

impl PathBuffer {
    pub fn new(dim: usize, depth: usize, max_prepends: usize) -> Self {
        Self {
            buf: vec![0.0; (depth + max_prepends) * dim],
            dim,
            depth,
            capacity: max_prepends,
            start: max_prepends,
        }
    }

    /// Loads the base point; `coords` may be longer than the window depth.
    pub fn reset(&mut self, coords: &[f64]) {
        let need = self.depth * self.dim;
        let off = self.capacity * self.dim;
        self.buf[off..off + need].copy_from_slice(&coords[..need]);
        self.start = self.capacity;
    }

    #[inline]
    pub fn prepend(&mut self, letter: &[f64]) {
        assert!(self.start > 0, "path buffer prepend budget exhausted");
        self.start -= 1;
        let off = self.start * self.dim;
        self.buf[off..off + self.dim].copy_from_slice(letter);
    }

    /// Writable slot for the next letter; commits the prepend.
    #[inline]
    pub fn prepend_slot(&mut self) -> &mut [f64] {
        assert!(self.start > 0, "path buffer prepend budget exhausted");
        self.start -= 1;
        let off = self.start * self.dim;
        &mut self.buf[off..off + self.dim]
    }

    #[inline]
    pub fn current(&self) -> &[f64] {
        let off = self.start * self.dim;
        &self.buf[off..off + self.depth * self.dim]
    }

    /// Rewinds to the state after `prepends` letters.
    #[inline]
    pub fn rewind_to(&mut self, prepends: usize) {
        self.start = self.capacity - prepends;
    }

    pub fn prepends(&self) -> usize {
        self.capacity - self.start
    }

    /// True when no further prepend fits without [`Self::recenter`].
    #[inline]
    pub fn is_full(&self) -> bool {
        self.start == 0
    }

    /// Moves the window back to the tail; the visible configuration is
    /// unchanged and the prepend budget is restored.
    pub fn recenter(&mut self) {
        let off = self.start * self.dim;
        let len = self.depth * self.dim;
        self.buf
            .copy_within(off..off + len, self.capacity * self.dim);
        self.start = self.capacity;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn path_buffer_recenter_keeps_window() {
        let mut b = PathBuffer::new(1, 4, 2);
        b.reset(&[1.0, 2.0, 3.0, 4.0]);
        b.prepend(&[5.0]);
        b.prepend(&[6.0]);
        assert!(b.is_full());
        b.recenter();
        assert_eq!(b.current(), &[6.0, 5.0, 1.0, 2.0]);
        b.prepend(&[7.0]);
        assert_eq!(b.current(), &[7.0, 6.0, 5.0, 1.0]);
    }

    fn bits() -> Alphabet {
        Alphabet::Finite(vec![0.0, 1.0])
    }

    fn cfg(v: &[f64]) -> Config {
        Config::new(&bits(), v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let x = cfg(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(config_distance(&x, &x).unwrap(), 0.0);
        let y = cfg(&[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(config_distance(&x, &y).unwrap(), 0.5);
        let a = cfg(&[0.0; 8]);
        let b = cfg(&[1.0; 8]);
        assert_eq!(config_distance(&a, &b).unwrap(), 0.99609375);
    }

    #[test]
    fn distance_rejects_mismatch() {
        let x = cfg(&[0.0, 1.0]);
        assert!(config_distance(&x, &cfg(&[0.0, 1.0, 1.0])).is_err());
        let s = Config::new(&Alphabet::RealLine, vec![0.0, 1.0]).unwrap();
        assert!(config_distance(&x, &s).is_err());
    }

    #[test]
    fn prepend_and_shift_examples() {
        let x = cfg(&[1.0, 1.0, 1.0]);
        assert_eq!(
            prepend(&[0.0], &x, &bits()).unwrap().coords(),
            &[0.0, 1.0, 1.0]
        );
        assert!(prepend(&[2.0], &x, &bits()).is_err());

        let x = cfg(&[0.0, 1.0]);
        let y = cfg(&[1.0, 1.0]);
        assert_eq!(config_distance(&x, &y).unwrap(), 0.5);
        let ax = prepend(&[0.0], &x, &bits()).unwrap();
        let ay = prepend(&[0.0], &y, &bits()).unwrap();
        assert_eq!(config_distance(&ax, &ay).unwrap(), 0.25);

        let z = cfg(&[0.0, 1.0, 0.0]);
        assert_eq!(shift(&z).unwrap().coords(), &[1.0, 0.0]);
        let back = shift(&prepend(&[1.0], &z, &bits()).unwrap()).unwrap();
        assert_eq!(back, z.truncated(2));
        let five = cfg(&[0.0; 5]);
        assert_eq!(shift(&shift(&five).unwrap()).unwrap().depth(), 3);
        assert!(shift(&cfg(&[0.0])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Config::new(&bits(), vec![0.0, 0.5]).is_err());
        assert!(Config::new(&Alphabet::HalfLine, vec![-1.0]).is_err());
        assert!(Config::new(&Alphabet::Sphere { ambient: 2 }, vec![1.0, 0.1]).is_err());
        assert!(Config::new(&Alphabet::Sphere { ambient: 2 }, vec![0.6, 0.8]).is_ok());
        assert!(AprioriMeasure::finite(vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(AprioriMeasure::finite(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mu = AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap();
        let mut rng = substream(1, "bits");
        let zeros = (0..100_000)
            .filter(|_| sample_point(&mu, &mut rng)[0] == 0.0)
            .count() as f64
            / 1e5;
        assert!((0.494..=0.506).contains(&zeros), "{zeros}");

        let circle = AprioriMeasure::sphere(2).unwrap();
        let mut rng = substream(1, "circle");
        let mut m = [0.0; 2];
        for _ in 0..100_000 {
            let p = sample_point(&circle, &mut rng);
            m[0] += p[0] / 1e5;
            m[1] += p[1] / 1e5;
        }
        assert!((m[0] * m[0] + m[1] * m[1]).sqrt() <= 0.02);

        let exp = AprioriMeasure::exponential();
        let mut rng = substream(1, "exp");
        let mean = (0..1_000_000)
            .map(|_| sample_point(&exp, &mut rng)[0])
            .sum::<f64>()
            / 1e6;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }

    #[test]
    fn path_buffer_matches_prepend() {
        let mu = AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap();
        let mut rng = substream(3, "pb");
        let x = Config::random(&mu, 6, &mut rng);
        let mut pb = PathBuffer::new(1, 6, 4);
        pb.reset(x.coords());
        let mut reference = x.clone();
        for letter in [1.0, 0.0, 1.0] {
            pb.prepend(&[letter]);
            reference = prepend(&[letter], &reference, mu.alphabet()).unwrap();
            assert_eq!(pb.current(), reference.coords());
        }
    }

    proptest! {
        #[test]
        fn prepend_contracts(seed in 0u64..10_000, depth in 2usize..12) {
            let mu = AprioriMeasure::sphere(3).unwrap();
            let mut rng = substream(seed, "contract");
            let x = Config::random(&mu, depth, &mut rng);
            let y = Config::random(&mu, depth, &mut rng);
            let a = sample_point(&mu, &mut rng);
            let d = config_distance(&x, &y).unwrap();
            let da = config_distance(
                &prepend(&a, &x, mu.alphabet()).unwrap(),
                &prepend(&a, &y, mu.alphabet()).unwrap(),
            ).unwrap();
            prop_assert!(da <= 0.5 * d + 1e-15);
            prop_assert!(da >= 0.5 * d - distance_tail_bound(depth + 1) - 1e-15);
        }

        #[test]
        fn agreeing_prefix_bounds_distance(seed in 0u64..10_000, k in 0usize..8) {
            let mu = AprioriMeasure::gaussian();
            let mut rng = substream(seed, "prefix");
            let x = Config::random(&mu, 10, &mut rng);
            let mut yc = x.coords().to_vec();
            for v in yc.iter_mut().skip(k) { *v = rng.random::<f64>() * 5.0; }
            let y = Config::new(&Alphabet::RealLine, yc).unwrap();
            prop_assert!(config_distance(&x, &y).unwrap() <= distance_tail_bound(k) + 1e-15);
        }

        #[test]
        fn letter_metric_axioms(seed in 0u64..10_000) {
            let mu = AprioriMeasure::sphere(3).unwrap();
            let mut rng = substream(seed, "metric");
            let tag = mu.tag();
            let (a, b, c) = (sample_point(&mu, &mut rng), sample_point(&mu, &mut rng), sample_point(&mu, &mut rng));
            prop_assert_eq!(tag.letter_distance(&a, &a), 0.0);
            prop_assert!((tag.letter_distance(&a, &b) - tag.letter_distance(&b, &a)).abs() < 1e-15);
            prop_assert!(tag.letter_distance(&a, &c) <= tag.letter_distance(&a, &b) + tag.letter_distance(&b, &c) + 1e-12);
            prop_assert!(tag.letter_distance(&a, &b).min(1.0) <= 1.0);
        }
    }
}
