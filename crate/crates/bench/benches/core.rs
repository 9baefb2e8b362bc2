use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use ddm_core::attenuation::solve_phi;
use ddm_core::datasets::default_gmm;
use ddm_core::forward::sample_xt_rows;
use ddm_core::metrics::{sliced_wasserstein, DEFAULT_N_PROJ};
use ddm_core::mlp::{backprop, MlpParams};
use ddm_core::objective::DdmLoss;
use ddm_core::{derive_stream, gaussian, AttenuationFamily, Generator, LossConfig, TrainConfig};

fn mlp(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let mut rng = derive_stream(0, 0);
    let params = MlpParams::init(cfg.architecture(2).unwrap(), &mut rng).unwrap();
    let batch = cfg.batch_size;
    let x0 = gaussian(&mut rng, batch, 2).unwrap();
    let eps = gaussian(&mut rng, batch, 2).unwrap();
    let ts: Vec<f64> = (0..batch).map(|_| rng.uniform_in(1e-3, 1.0)).collect();
    let phi = solve_phi(AttenuationFamily::Constant, &x0, &mut rng).unwrap();
    let x_t = sample_xt_rows(&x0, &phi, &ts, &eps).unwrap();
    let loss = DdmLoss {
        phi: phi.params,
        eps,
        ts: ts.clone(),
        cfg: LossConfig::default(),
    };

    c.bench_function("mlp_forward_256x4_batch256", |b| {
        b.iter(|| params.forward(black_box(&x_t), &ts).unwrap())
    });
    c.bench_function("mlp_backprop_256x4_batch256", |b| {
        b.iter(|| backprop(&params, black_box(&x_t), &ts, &loss).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let g = Generator::oracle(default_gmm()).unwrap();
    c.bench_function("oracle_sample_nfe10_n4096", |b| {
        b.iter(|| g.generate(10, 4096, 1e-3, &derive_stream(1, 0)).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let a = gaussian(&mut derive_stream(2, 0), 10_000, 2).unwrap();
    let b = gaussian(&mut derive_stream(3, 0), 10_000, 2).unwrap();
    c.bench_function("sliced_wasserstein_1e4", |bench| {
        bench.iter_batched(
            || derive_stream(4, 0),
            |mut rng| sliced_wasserstein(&a, &b, DEFAULT_N_PROJ, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, mlp, sampler, metrics);
criterion_main!(benches);
