//! Rayon pool against a single-thread pool on the data-parallel hot paths.
//!
//! Built without the `parallel` feature, only the sequential path is measured.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowfilter::diffcore::Tensor;
use flowfilter::dynamics::{make_windows, sir_ensemble, vehicle_ensemble, SirParams, SirState, VehicleParams, VehicleState, WindowSpec};
use flowfilter::encoders::{EncoderConfig, EncoderKind};
use flowfilter::flow::FlowConfig;
use flowfilter::inference::kl_knn;
use flowfilter::training::{batch_gradients, LossWeights};
use flowfilter::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Job = Box<dyn Fn() + Send + Sync>;

fn jobs() -> Vec<(&'static str, Job)> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut cloud = |n: usize| Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let (p_hat, p) = (cloud(2000), cloud(2000));

    let trajs = sir_ensemble(&SirParams::default(), (0.02, 0.04), (0.005, 0.025), 8, SirState::default(), 300, 2).unwrap();
    let spec = WindowSpec {
        context_noise_sigma: 0.0,
        ..Default::default()
    };
    let data = make_windows(&trajs, &spec, None).unwrap();
    let enc = EncoderConfig {
        kind: EncoderKind::Mlp,
        ..Default::default()
    };
    let model = Model::for_dataset(&data, &FlowConfig::default(), &enc).unwrap();
    let rows: Vec<usize> = (0..512).map(|i| (i * 37) % data.len()).collect();
    let grid = Tensor::new(vec![40_000, 3], (0..120_000).map(|i| ((i as f64) * 0.37).sin() * 3.0).collect()).unwrap();
    let ctx = Tensor::new(vec![40_000, 4], vec![0.1; 160_000]).unwrap();
    let lp_model = model.clone();

    vec![
        (
            "vehicle_ensemble_500",
            Box::new(|| {
                vehicle_ensemble(500, 150, &VehicleParams::default(), VehicleState::default(), 3);
            }) as Job,
        ),
        (
            "kl_knn_2000",
            Box::new(move || {
                kl_knn(&p_hat, &p, 1).unwrap();
            }),
        ),
        (
            "batch_gradients_512",
            Box::new(move || {
                let mut m = model.clone();
                batch_gradients(&mut m, &data, &rows, &LossWeights::default()).unwrap();
            }),
        ),
        (
            "log_prob_40000",
            Box::new(move || {
                lp_model.flow.log_prob_values(&lp_model.params, &grid, Some(&ctx)).unwrap();
            }),
        ),
    ]
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("parallel");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    #[cfg(feature = "parallel")]
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for (name, job) in jobs() {
        #[cfg(feature = "parallel")]
        {
            group.bench_function(BenchmarkId::new(name, "rayon"), |b| b.iter(&job));
            group.bench_function(BenchmarkId::new(name, "one_thread"), |b| single.install(|| b.iter(&job)));
        }
        #[cfg(not(feature = "parallel"))]
        group.bench_function(BenchmarkId::new(name, "sequential"), |b| b.iter(&job));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
