use criterion::{black_box, criterion_group, criterion_main, Criterion};

use translab::chains::{stationary_start, PsiStepper};
use translab::coupling::{optimal_assignment, sample_coupled};
use translab::oracle::{CylinderSpace, OracleSystem};
use translab::potential::Potential;
use translab::rng::substream;
use translab::space::{AprioriMeasure, Config};
use translab::transfer::{KernelSpec, NormalizeConfig};

fn pair_system() -> OracleSystem {
    let f = Potential::finite_range(vec![0.0, 1.0], 2, |w| w[0] * w[1]).unwrap();
    OracleSystem::new(&CylinderSpace::uniform(vec![0.0, 1.0], 2).unwrap(), &f).unwrap()
}

fn psi_step(c: &mut Criterion) {
    let oracle = pair_system();
    let sys = oracle
        .normalized_system(32, &NormalizeConfig::default())
        .unwrap();
    let mut stepper = PsiStepper::new(&sys).unwrap();
    let mut state = stationary_start(&mut stepper, 32, 16, 1, 0).unwrap();
    c.bench_function("psi step, pair potential on bits", |b| {
        b.iter(|| stepper.step(black_box(&mut state)).unwrap())
    });
}

fn coupled_path(c: &mut Criterion) {
    let m = AprioriMeasure::sphere(2).unwrap();
    let kernel = KernelSpec::FullShift(m.clone());
    let mut rng = substream(2, "bench-pair");
    let x = Config::random(&m, 64, &mut rng);
    let y = Config::random(&m, 64, &mut rng);
    c.bench_function("coupled path n=32 on the circle", |b| {
        b.iter(|| sample_coupled(&kernel, &x, &y, 32, &mut rng).unwrap())
    });
}

fn assignment(c: &mut Criterion) {
    let m = 64;
    let mut rng = substream(3, "bench-cost");
    let cost: Vec<f64> = (0..m * m)
        .map(|_| rand::Rng::random::<f64>(&mut rng))
        .collect();
    c.bench_function("optimal assignment 64x64", |b| {
        b.iter(|| optimal_assignment(black_box(&cost), m).unwrap())
    });
}

criterion_group!(benches, psi_step, coupled_path, assignment);
criterion_main!(benches);
