//! The backward-walk chain `Φ`, the normalized chain `Ψ`, Breiman averages,
//! empirical stationarity and support probes.
//!
//! `Φ` moves `x ↦ y` with `y ∼ m_x`; `Ψ` moves with density `e^{f̄(y)}`
//! against `m_x`, sampled exactly by two-stage rejection: a proposal `y ∼ q`
//! is kept with probability `e^{f(y) + ln dm_x/dq(y) − L}·ĥ(y)/B′`, where `L`
//! bounds the first exponent and `B′` is the upper `ĥ` envelope.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{contract, LabError, Result};
use crate::observable::Observable;
use crate::rng::{derive_seed, substream_indexed, LabRng};
use crate::space::{distance_tail_bound, AlphabetTag, Config};
use crate::stats::{fit_line, ks_two_sample, variance, LineFit};
use crate::transfer::{KernelSpec, NormalizedSystem, Sampler, Walk};

/// Proposals allowed for a single `Ψ` transition.
pub const MAX_PROPOSALS: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ChainStats {
    pub proposals: u64,
    pub accepted: u64,
    pub h_evaluations: u64,
    /// Proposals whose weight left the declared envelope.
    pub envelope_violations: u64,
}

/// Current state, step counter and private random stream of one chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    current: Config,
    step: u64,
    rng: LabRng,
    stats: ChainStats,
}

impl ChainState {
    pub fn new(start: Config, seed: u64, index: u64) -> Self {
        Self {
            current: start,
            step: 0,
            rng: substream_indexed(seed, "chain", index),
            stats: ChainStats::default(),
        }
    }

    pub fn current(&self) -> &Config {
        &self.current
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> ChainStats {
        self.stats
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.stats.proposals == 0 {
            1.0
        } else {
            self.stats.accepted as f64 / self.stats.proposals as f64
        }
    }

    pub fn rng(&mut self) -> &mut LabRng {
        &mut self.rng
    }
}

/// One `Φ` transition: prepend `a ∼ μ`, move to `(r, x_1/α_1, …)` with
/// `r ∼ N(0,1)`, or apply `T_i` with probability `p_i(x)`.
pub fn step_phi(kernel: &KernelSpec, state: &mut ChainState) -> Result<()> {
    if state.current.tag() != kernel.tag() {
        return contract("chain state and kernel use different alphabets");
    }
    match kernel {
        KernelSpec::FullShift(m) => {
            let dim = kernel.point_dim();
            let ChainState { current, rng, .. } = state;
            let coords = current.coords_mut();
            let len = coords.len();
            coords.copy_within(0..len - dim, dim);
            m.sample_into(rng, &mut coords[..dim]);
        }
        KernelSpec::WeightedShift(s) => {
            if state.current.depth() != s.dim() {
                return contract("state length differs from the system dimension");
            }
            let r: f64 = state.rng.sample(rand_distr::StandardNormal);
            let mut out = vec![0.0; s.dim()];
            s.preimage_step(r, state.current.coords(), &mut out);
            state.current.coords_mut().copy_from_slice(&out);
        }
        KernelSpec::Ifs(s) => {
            let p = s.probabilities(state.current.coords());
            let u: f64 = state.rng.random();
            let mut acc = 0.0;
            let mut i = p.len() - 1;
            for (j, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    i = j;
                    break;
                }
            }
            let y = s.map(i, state.current.coords());
            state.current.coords_mut().copy_from_slice(&y);
        }
    }
    state.step += 1;
    state.stats.proposals += 1;
    state.stats.accepted += 1;
    Ok(())
}

/// Reusable `Ψ` sampler for one normalized system.
pub struct PsiStepper<'a> {
    sys: &'a NormalizedSystem,
    sampler: Sampler,
    log_bound: f64,
    a_env: f64,
    b_env: f64,
    eval_len: usize,
    walk: Option<(usize, Walk)>,
    u: Vec<f64>,
}

impl<'a> PsiStepper<'a> {
    /// Refuses systems whose normalization check was not accepted.
    pub fn new(sys: &'a NormalizedSystem) -> Result<Self> {
        if !sys.accepted() {
            return Err(LabError::Refused(format!(
                "normalization not accepted (sup |ℒ_f̄1 − 1| = {:.3e} > {})",
                sys.diagnostics().sup_deviation,
                sys.diagnostics().tolerance
            )));
        }
        Ok(Self::unchecked(sys))
    }

    /// Skips the acceptance gate; for diagnostics on rejected systems.
    pub fn unchecked(sys: &'a NormalizedSystem) -> Self {
        let sampler = sys.sampler().clone();
        let log_bound = sampler.log_weight_bound(sys.potential());
        let (a_env, b_env) = sys.envelope();
        let eval_len = sys.depth() * sys.kernel().point_dim();
        let upl = sampler.uniforms_per_step();
        Self {
            sys,
            sampler,
            log_bound,
            a_env,
            b_env,
            eval_len,
            walk: None,
            u: vec![0.0; upl],
        }
    }

    pub fn system(&self) -> &NormalizedSystem {
        self.sys
    }

    /// `(sup f̄ − inf f̄)` bound implied by the envelope.
    pub fn f_bar_spread(&self) -> f64 {
        let (lo, hi) = self.sys.f_bar_bounds();
        hi - lo
    }

    /// One `Ψ` transition. States may be deeper than the system depth; `f`
    /// and `ĥ` then read the leading `D` points only.
    pub fn step(&mut self, state: &mut ChainState) -> Result<()> {
        let kernel = self.sys.kernel();
        if state.current.tag() != kernel.tag() {
            return contract("chain state and system use different alphabets");
        }
        let depth = state.current.depth();
        if depth < self.sys.depth() {
            return contract("chain state is shallower than the system depth");
        }
        if self.walk.as_ref().is_none_or(|(d, _)| *d != depth) {
            self.walk = Some((depth, Walk::new(kernel, depth, 1)));
        }
        let (_, walk) = self.walk.as_mut().expect("walk initialised above");
        let squeeze = self.a_env / self.b_env;
        for _ in 0..MAX_PROPOSALS {
            state.stats.proposals += 1;
            walk.reset(state.current.coords());
            for v in self.u.iter_mut() {
                *v = state.rng.random();
            }
            let lr = self.sampler.step(walk, &self.u);
            let child = walk.current();
            let eval = &child[..self.eval_len.min(child.len())];
            let log_a = self.sys.potential().eval_coords(eval) + lr - self.log_bound;
            if log_a > 1e-12 {
                state.stats.envelope_violations += 1;
            }
            let u1: f64 = state.rng.random();
            if u1.ln() >= log_a {
                continue;
            }
            let u2: f64 = state.rng.random();
            let keep = if u2 <= squeeze {
                true
            } else {
                state.stats.h_evaluations += 1;
                let h = self.sys.h(child);
                if h > self.b_env || h < self.a_env {
                    state.stats.envelope_violations += 1;
                }
                u2 * self.b_env < h
            };
            if keep {
                state.current.coords_mut().copy_from_slice(child);
                state.step += 1;
                state.stats.accepted += 1;
                return Ok(());
            }
        }
        Err(LabError::Aborted(format!(
            "Ψ rejection loop exceeded {MAX_PROPOSALS} proposals; the envelope is wrong"
        )))
    }
}

/// One `Ψ` transition with a freshly built stepper.
pub fn step_psi(sys: &NormalizedSystem, state: &mut ChainState) -> Result<()> {
    PsiStepper::new(sys)?.step(state)
}

/// A `Ψ` chain started from a random state of the given depth and run for
/// `burn_in` steps.
pub fn stationary_start(
    stepper: &mut PsiStepper<'_>,
    depth: usize,
    burn_in: usize,
    seed: u64,
    index: u64,
) -> Result<ChainState> {
    let kernel = stepper.system().kernel();
    let mut rng = substream_indexed(seed, "chain-start", index);
    let start = kernel.random_state(depth, &mut rng);
    let mut state = ChainState::new(start, seed, index);
    for _ in 0..burn_in {
        stepper.step(&mut state)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, Serialize)]
pub struct TwoSampleReport {
    pub ks: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub replicates: usize,
    /// `Σ_{j=1}^{n} φ(Ψ_j)` per replicate.
    pub chain_sums: Vec<f64>,
    /// `Σ_{j=0}^{n−1} φ∘σʲ(y)` per replicate.
    pub birkhoff_sums: Vec<f64>,
}

/// Compares the chain sums `Σ_{j=1}^{n} φ(Ψ_j)` with the Birkhoff sums
/// `Σ_{j=0}^{n−1} φ∘σʲ(y)` along independent `Ψ`-sampled configurations `y`
/// of depth `n + D`. Accepts when the two-sample KS distance is at most
/// `1.63·√(2/R)`.
pub fn birkhoff_vs_chain_check(
    sys: &NormalizedSystem,
    phi: &Observable,
    n: usize,
    replicates: usize,
    burn_in: usize,
    seed: u64,
) -> Result<TwoSampleReport> {
    if !matches!(sys.kernel(), KernelSpec::FullShift(_)) {
        return contract("Birkhoff sums need a shift kernel");
    }
    if n == 0 || replicates < 2 {
        return contract("Birkhoff check needs n ≥ 1 and at least two replicates");
    }
    PsiStepper::new(sys)?;
    let depth = sys.depth();
    let dim = sys.kernel().point_dim();
    let chain_sums = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, "birkhoff-chain", r as u64);
            let mut state = stationary_start(&mut stepper, depth, burn_in, s, 0)?;
            let mut total = 0.0;
            for _ in 0..n {
                stepper.step(&mut state)?;
                total += phi.eval(state.current().coords());
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let birkhoff_sums = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut stepper = PsiStepper::new(sys)?;
            let s = derive_seed(seed, "birkhoff-config", r as u64);
            let state = stationary_start(&mut stepper, depth + n, burn_in + n, s, 0)?;
            let y = state.current().coords();
            Ok((0..n).map(|j| phi.eval(&y[j * dim..])).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    let ks = ks_two_sample(&chain_sums, &birkhoff_sums);
    let threshold = 1.63 * (2.0 / replicates as f64).sqrt();
    Ok(TwoSampleReport {
        ks,
        threshold,
        accepted: ks <= threshold,
        replicates,
        chain_sums,
        birkhoff_sums,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BreimanPath {
    /// `A_m` for `m = 1..=n`.
    pub averages: Vec<f64>,
    /// `4‖φ‖_∞/√n`.
    pub tolerance: f64,
    /// Largest standard error among the `Pφ` estimates.
    pub max_transfer_se: f64,
    pub stats: ChainStats,
}

impl BreimanPath {
    pub fn last(&self) -> f64 {
        self.averages.last().copied().unwrap_or(0.0)
    }

    pub fn within_tolerance(&self) -> bool {
        self.last().abs() <= self.tolerance + 3.0 * self.max_transfer_se
    }
}

/// Partial averages `A_m = (1/m) Σ_{k=0}^{m−1} (Pφ(Ψ_k) − φ(Ψ_k))` along one
/// `Ψ` run; `Pφ` uses `k` letters per state (exact on finite kernels).
pub fn breiman_average(
    sys: &NormalizedSystem,
    phi: &Observable,
    n: usize,
    k: usize,
    burn_in: usize,
    seed: u64,
) -> Result<BreimanPath> {
    if n == 0 {
        return contract("Breiman average needs n ≥ 1");
    }
    let mut stepper = PsiStepper::new(sys)?;
    let mut state = stationary_start(&mut stepper, sys.depth(), burn_in, seed, 0)?;
    let mut averages = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut max_se: f64 = 0.0;
    for m in 0..n {
        let x = state.current().coords();
        let diff = if phi.as_constant().is_some() {
            0.0
        } else {
            let p = sys.apply(phi, x, k, derive_seed(seed, "breiman-transfer", m as u64));
            max_se = max_se.max(p.std_error);
            p.value - phi.eval(x)
        };
        total += diff;
        averages.push(total / (m + 1) as f64);
        stepper.step(&mut state)?;
    }
    Ok(BreimanPath {
        averages,
        tolerance: 4.0 * phi.sup_norm() / (n as f64).sqrt(),
        max_transfer_se: max_se,
        stats: state.stats(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BreimanRate {
    pub ns: Vec<usize>,
    pub variances: Vec<f64>,
    /// Regression of `ln Var(A_n)` on `ln n`.
    pub fit: LineFit,
}

/// Variance of `A_n` across independent seeds at each `n` in `ns`.
pub fn breiman_rate(
    sys: &NormalizedSystem,
    phi: &Observable,
    ns: &[usize],
    seeds: usize,
    k: usize,
    burn_in: usize,
    seed: u64,
) -> Result<BreimanRate> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    if ns.len() < 2 || seeds < 3 || n_max == 0 {
        return contract("Breiman rate needs ≥ 2 lengths and ≥ 3 seeds");
    }
    let paths = (0..seeds)
        .into_par_iter()
        .map(|i| {
            breiman_average(
                sys,
                phi,
                n_max,
                k,
                burn_in,
                derive_seed(seed, "breiman", i as u64),
            )
        })
        .collect::<Result<Vec<BreimanPath>>>()?;
    let variances: Vec<f64> = ns
        .iter()
        .map(|&n| variance(&paths.iter().map(|p| p.averages[n - 1]).collect::<Vec<_>>()))
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let fit = fit_line(&lx, &ly).ok_or_else(|| LabError::Aborted("degenerate fit".into()))?;
    Ok(BreimanRate {
        ns: ns.to_vec(),
        variances,
        fit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StationarityEntry {
    pub name: String,
    /// `ν_n(Pφ)`.
    pub nu_p_phi: f64,
    /// `ν_n(φ)`.
    pub nu_phi: f64,
    pub discrepancy: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StationarityReport {
    pub n: usize,
    pub entries: Vec<StationarityEntry>,
    pub accepted: bool,
}

/// `|ν_n(Pφ) − ν_n(φ)|` for the empirical measure `ν_n = (1/n) Σ δ_{Ψ_i}`.
pub fn empirical_stationarity(
    sys: &NormalizedSystem,
    tests: &[Observable],
    n: usize,
    k: usize,
    burn_in: usize,
    seed: u64,
) -> Result<StationarityReport> {
    if n == 0 {
        return contract("empirical measure needs n ≥ 1");
    }
    let mut stepper = PsiStepper::new(sys)?;
    let mut state = stationary_start(&mut stepper, sys.depth(), burn_in, seed, 0)?;
    let mut sums = vec![(0.0, 0.0, 0.0f64); tests.len()];
    for i in 0..n {
        stepper.step(&mut state)?;
        let x = state.current().coords();
        for (t, (s_p, s_phi, se)) in tests.iter().zip(sums.iter_mut()) {
            let v = t.eval(x);
            *s_phi += v;
            if t.as_constant().is_some() {
                *s_p += v;
            } else {
                let label = format!("stationarity-{}", t.name());
                let p = sys.apply(t, x, k, derive_seed(seed, &label, i as u64));
                *s_p += p.value;
                *se = se.max(p.std_error);
            }
        }
    }
    let nf = n as f64;
    let entries: Vec<StationarityEntry> = tests
        .iter()
        .zip(&sums)
        .map(|(t, (s_p, s_phi, se))| StationarityEntry {
            name: t.name().to_string(),
            nu_p_phi: s_p / nf,
            nu_phi: s_phi / nf,
            discrepancy: ((s_p - s_phi) / nf).abs(),
            tolerance: 4.0 * t.sup_norm() / nf.sqrt() + 3.0 * se,
        })
        .collect();
    Ok(StationarityReport {
        n,
        accepted: entries.iter().all(|e| e.discrepancy <= e.tolerance),
        entries,
    })
}

/// Uniform empirical measure `(1/n) Σ δ_{x_i}` on flat states.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<Vec<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<Vec<f64>>) -> Self {
        Self { atoms }
    }

    /// `n` states of a chain, recorded after each transition.
    pub fn from_chain(
        state: &mut ChainState,
        mut step: impl FnMut(&mut ChainState) -> Result<()>,
        n: usize,
    ) -> Result<Self> {
        let mut atoms = Vec::with_capacity(n);
        for _ in 0..n {
            step(state)?;
            atoms.push(state.current().coords().to_vec());
        }
        Ok(Self { atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    /// `∫ φ dν_n`; zero for the empty measure.
    pub fn integrate(&self, phi: &Observable) -> f64 {
        if self.atoms.is_empty() {
            return 0.0;
        }
        if let Some(c) = phi.as_constant() {
            return c;
        }
        self.atoms.iter().map(|x| phi.eval(x)).sum::<f64>() / self.atoms.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SupportReport {
    pub hits: Vec<u64>,
    /// Step of the first visit to each ball.
    pub first_hit: Vec<Option<u64>>,
    pub steps: usize,
    pub all_hit: bool,
}

/// Visits of a chain to each ball over `n_steps` transitions, counting the
/// start. Balls in shift spaces must be wider than `2^{−D}`.
pub fn support_probe(
    state: &mut ChainState,
    mut step: impl FnMut(&mut ChainState) -> Result<()>,
    balls: &[Ball],
    distance: impl Fn(&[f64], &[f64]) -> f64,
    n_steps: usize,
) -> Result<SupportReport> {
    let shift_space = !matches!(state.current().tag(), AlphabetTag::RealLine);
    let floor = distance_tail_bound(state.current().depth());
    if balls
        .iter()
        .any(|b| !(b.radius > 0.0) || (shift_space && b.radius <= floor))
    {
        return contract("ball radius must exceed the truncation resolution 2^-D");
    }
    let mut hits = vec![0u64; balls.len()];
    let mut first_hit = vec![None; balls.len()];
    for t in 0..=n_steps {
        if t > 0 {
            step(state)?;
        }
        let x = state.current().coords();
        for (i, b) in balls.iter().enumerate() {
            if distance(x, &b.center) < b.radius {
                hits[i] += 1;
                first_hit[i].get_or_insert(t as u64);
            }
        }
    }
    Ok(SupportReport {
        all_hit: hits.iter().all(|h| *h > 0),
        hits,
        first_hit,
        steps: n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{CylinderSpace, OracleSystem};
    use crate::potential::Potential;
    use crate::space::{Alphabet, AprioriMeasure};
    use crate::systems::WeightedShiftSystem;
    use crate::transfer::NormalizeConfig;
    use proptest::prelude::*;

    fn bits_kernel() -> KernelSpec {
        KernelSpec::FullShift(AprioriMeasure::uniform_finite(vec![0.0, 1.0]).unwrap())
    }

    fn bit_start(depth: usize) -> Config {
        Config::new(&Alphabet::Finite(vec![0.0, 1.0]), vec![0.0; depth]).unwrap()
    }

    fn oracle_sys(f: &Potential, depth: usize) -> (OracleSystem, NormalizedSystem) {
        let o = OracleSystem::new(&CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap(), f).unwrap();
        let s = o
            .normalized_system(depth, &NormalizeConfig::default())
            .unwrap();
        (o, s)
    }

    fn pair() -> Potential {
        Potential::finite_range(vec![0.0, 1.0], 2, |v| v[0] * v[1]).unwrap()
    }

    #[test]
    fn phi_first_coordinate_frequency() {
        let mut s = ChainState::new(bit_start(8), 3, 0);
        let mut zeros = 0;
        for _ in 0..100_000 {
            step_phi(&bits_kernel(), &mut s).unwrap();
            zeros += usize::from(s.current().point(1)[0] == 0.0);
        }
        let f = zeros as f64 / 1e5;
        assert!((0.494..=0.506).contains(&f), "{f}");
        assert_eq!(s.step(), 100_000);
    }

    #[test]
    fn phi_prefix_is_reversed_word() {
        let k = bits_kernel();
        let mut s = ChainState::new(bit_start(12), 9, 0);
        let mut word = Vec::new();
        for _ in 0..5 {
            step_phi(&k, &mut s).unwrap();
            word.push(s.current().point(1)[0]);
        }
        let c = s.current().coords();
        for (j, a) in word.iter().rev().enumerate() {
            assert_eq!(c[j], *a);
        }
        assert!(c[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phi_weighted_shift_tail_is_deterministic() {
        let sys = WeightedShiftSystem::constant(2.0, 8, 2.0).unwrap();
        let k = KernelSpec::WeightedShift(sys);
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let mut s = ChainState::new(Config::new(&Alphabet::RealLine, e1).unwrap(), 1, 0);
        for _ in 0..3 {
            step_phi(&k, &mut s).unwrap();
        }
        // e_1 has moved to position 4 with weight 2^{-3}.
        assert_eq!(s.current().coords()[3], 0.125);
        assert!(s.current().coords()[4..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shared_stream_contraction() {
        let k = bits_kernel();
        let depth = 16;
        let x0 = bit_start(depth);
        let y0 = Config::new(&Alphabet::Finite(vec![0.0, 1.0]), vec![1.0; depth]).unwrap();
        let d0 = crate::space::config_distance(&x0, &y0).unwrap();
        let mut a = ChainState::new(x0, 5, 0);
        let mut b = ChainState::new(y0, 5, 0);
        for n in 1..=20 {
            step_phi(&k, &mut a).unwrap();
            step_phi(&k, &mut b).unwrap();
            let d = crate::space::config_distance(a.current(), b.current()).unwrap();
            assert!(d <= 0.5f64.powi(n) * d0 + distance_tail_bound(depth) + 1e-15);
        }
    }

    #[test]
    fn psi_with_zero_potential_matches_phi() {
        let (_, sys) = oracle_sys(&Potential::Constant(0.0), 8);
        let mut stepper = PsiStepper::new(&sys).unwrap();
        let k = bits_kernel();
        let mut a = ChainState::new(bit_start(8), 11, 0);
        let mut b = ChainState::new(bit_start(8), 12, 0);
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        for _ in 0..10_000 {
            stepper.step(&mut a).unwrap();
            step_phi(&k, &mut b).unwrap();
            xa.push(a.current().point(1)[0]);
            xb.push(b.current().point(1)[0]);
        }
        assert!(ks_two_sample(&xa, &xb) <= 0.03);
        // Uniform acceptance up to the 10⁻³ log-margin of the envelope.
        assert!(a.acceptance_rate() > 0.99);
    }

    #[test]
    fn psi_transition_frequencies_match_oracle() {
        let (o, sys) = oracle_sys(&pair(), 6);
        let mut stepper = PsiStepper::new(&sys).unwrap();
        let mut s = ChainState::new(bit_start(6), 1, 0);
        let n = 100_000;
        let mut counts = [[0u64; 4]; 4];
        let mut prev = o.space.index_of_coords(s.current().coords());
        for _ in 0..n {
            stepper.step(&mut s).unwrap();
            let w = o.space.index_of_coords(s.current().coords());
            counts[prev][w] += 1;
            prev = w;
        }
        for (i, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let p = o.p.get(i, j);
                let freq = c as f64 / total as f64;
                let band = 3.0 * (p * (1.0 - p) / total as f64).sqrt() + 1e-12;
                assert!((freq - p).abs() <= band, "P[{i},{j}] = {p}, freq {freq}");
            }
        }
        let bound = (-stepper.f_bar_spread()).exp();
        assert!(
            s.acceptance_rate() >= bound,
            "{} < {bound}",
            s.acceptance_rate()
        );
        assert_eq!(s.stats().envelope_violations, 0);
    }

    #[test]
    fn unaccepted_system_is_refused() {
        let o = OracleSystem::new(&CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap(), &pair())
            .unwrap();
        let space = o.space.clone();
        let h = o.perron.h.clone();
        let wrong = NormalizedSystem::from_exact(
            &o.kernel().unwrap(),
            &pair(),
            o.perron.lambda * 1.2,
            move |x| h[space.index_of_coords(x)],
            Some(2),
            6,
            &NormalizeConfig::default(),
        )
        .unwrap();
        let mut s = ChainState::new(bit_start(6), 1, 0);
        assert!(matches!(
            step_psi(&wrong, &mut s),
            Err(LabError::Refused(_))
        ));
    }

    #[test]
    fn birkhoff_check_examples() {
        let (_, iid) = oracle_sys(&Potential::Constant(0.0), 8);
        let one = Observable::constant(1.0);
        let r = birkhoff_vs_chain_check(&iid, &one, 10, 50, 20, 4).unwrap();
        assert_eq!(r.ks, 0.0);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let r = birkhoff_vs_chain_check(&iid, &x1, 12, 400, 20, 5).unwrap();
        assert!(r.accepted, "ks {} > {}", r.ks, r.threshold);
    }

    #[test]
    fn birkhoff_check_matches_oracle_path_law() {
        let (o, sys) = oracle_sys(&pair(), 6);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let n = 8;
        let r = birkhoff_vs_chain_check(&sys, &x1, n, 600, 50, 8).unwrap();
        assert!(r.accepted, "ks {} > {}", r.ks, r.threshold);
        let phi: Vec<f64> = (0..4).map(|w| o.space.word(w)[0]).collect();
        let law = crate::oracle::path_sum_distribution(&o.p, &phi, &o.pi, n);
        let cdf = |v: f64| {
            law.iter()
                .filter(|(x, _)| *x <= v + 1e-9)
                .map(|(_, p)| p)
                .sum::<f64>()
        };
        for sample in [&r.chain_sums, &r.birkhoff_sums] {
            let m = sample.len() as f64;
            let ks = law
                .iter()
                .map(|(v, _)| {
                    let emp = sample.iter().filter(|x| **x <= v + 1e-9).count() as f64 / m;
                    (emp - cdf(*v)).abs()
                })
                .fold(0.0, f64::max);
            assert!(ks <= 1.63 / m.sqrt(), "ks vs oracle {ks}");
        }
    }

    #[test]
    fn breiman_examples() {
        let (_, iid) = oracle_sys(&Potential::Constant(0.0), 8);
        let c = breiman_average(&iid, &Observable::constant(2.0), 1000, 10, 0, 1).unwrap();
        assert!(c.averages.iter().all(|a| *a == 0.0));
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let b = breiman_average(&iid, &x1, 100_000, 10, 100, 2).unwrap();
        assert!(b.last().abs() <= 0.01, "{}", b.last());
        assert!(b.within_tolerance());

        let (o, sys) = oracle_sys(&pair(), 6);
        let p = breiman_average(&sys, &x1, 100_000, 10, 100, 3).unwrap();
        assert!(p.last().abs() <= 0.01 && p.within_tolerance());
        // Cross-check Pφ against the oracle matrix at every word.
        let phi: Vec<f64> = (0..4).map(|w| o.space.word(w)[0]).collect();
        let exact = o.p.apply(&phi);
        for (w, e) in exact.iter().enumerate() {
            let mut x = o.space.word(w);
            x.extend([0.0; 4]);
            let v = sys.apply(&x1, &x, 10, 0);
            assert!((v.value - e).abs() < 1e-12);
        }
    }

    #[test]
    fn breiman_variance_rate() {
        let (_, sys) = oracle_sys(&pair(), 6);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let r = breiman_rate(&sys, &x1, &[250, 500, 1000, 2000, 4000], 40, 10, 50, 6).unwrap();
        assert!((-1.3..=-0.7).contains(&r.fit.slope), "{:?}", r.fit);
    }

    #[test]
    fn stationarity_examples() {
        let (o, sys) = oracle_sys(&pair(), 6);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let tests = [Observable::constant(1.0), x1.clone()];
        let rep = empirical_stationarity(&sys, &tests, 20_000, 10, 100, 2).unwrap();
        assert_eq!(rep.entries[0].discrepancy, 0.0);
        assert!(rep.accepted);
        // ν_n(φ) against the exact stationary mean, with a batch-means 3σ band.
        let exact = o.mean(&x1);
        let (m, se) = {
            let mut stepper = PsiStepper::new(&sys).unwrap();
            let mut s = stationary_start(&mut stepper, 6, 100, 2, 0).unwrap();
            let v: Vec<f64> = (0..20_000)
                .map(|_| {
                    stepper.step(&mut s).unwrap();
                    x1.eval(s.current().coords())
                })
                .collect();
            crate::stats::batch_means(&v, 20)
        };
        assert!((m - exact).abs() <= 3.0 * se, "{m} vs {exact} ± {se}");
    }

    #[test]
    fn stationarity_discrepancy_rate() {
        let (_, sys) = oracle_sys(&pair(), 6);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        let rms = |n: usize| {
            let v: Vec<f64> = (0..40)
                .map(|s| {
                    let r = empirical_stationarity(&sys, std::slice::from_ref(&x1), n, 10, 50, s)
                        .unwrap();
                    r.entries[0].discrepancy.powi(2)
                })
                .collect();
            crate::stats::mean(&v).sqrt()
        };
        let ratio = rms(2000) / rms(4000);
        assert!((1.2..=1.7).contains(&ratio), "{ratio}");
    }

    #[test]
    fn support_examples() {
        let k = bits_kernel();
        let depth = 10;
        let balls: Vec<Ball> = (0..8)
            .map(|w| {
                let mut c = vec![0.0; depth];
                c[0] = f64::from(w >> 2 & 1);
                c[1] = f64::from(w >> 1 & 1);
                c[2] = f64::from(w & 1);
                Ball {
                    center: c,
                    radius: 0.125 + 1e-9,
                }
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| AlphabetTag::Finite(2).coords_distance(a, b);
        let mut s = ChainState::new(bit_start(depth), 3, 0);
        let rep = support_probe(&mut s, |st| step_phi(&k, st), &balls, dist, 10_000).unwrap();
        assert!(rep.all_hit);

        let mut s = ChainState::new(bit_start(depth), 3, 0);
        let here = [Ball {
            center: vec![0.0; depth],
            radius: 1.0,
        }];
        let rep = support_probe(&mut s, |st| step_phi(&k, st), &here, dist, 0).unwrap();
        assert_eq!(rep.first_hit[0], Some(0));

        let tiny = [Ball {
            center: vec![0.0; depth],
            radius: 1e-6,
        }];
        let mut s = ChainState::new(bit_start(depth), 3, 0);
        assert!(support_probe(&mut s, |st| step_phi(&k, st), &tiny, dist, 1).is_err());
    }

    #[test]
    fn empirical_measure_integrates_one() {
        let k = bits_kernel();
        let mut s = ChainState::new(bit_start(4), 2, 0);
        let nu = EmpiricalMeasure::from_chain(&mut s, |st| step_phi(&k, st), 1000).unwrap();
        assert_eq!(nu.len(), 1000);
        assert_eq!(nu.integrate(&Observable::constant(1.0)), 1.0);
        let x1 = Observable::coordinate(1, 0, 1, 1.0);
        assert!((nu.integrate(&x1) - 0.5).abs() < 0.06);
    }

    proptest! {
        #[test]
        fn step_counter_increments(seed in 0u64..100, n in 0usize..50) {
            let (_, sys) = oracle_sys(&pair(), 6);
            let mut stepper = PsiStepper::new(&sys).unwrap();
            let mut s = ChainState::new(bit_start(6), seed, 0);
            for i in 0..n {
                prop_assert_eq!(s.step(), i as u64);
                stepper.step(&mut s).unwrap();
            }
            prop_assert_eq!(s.step(), n as u64);
        }
    }
}
