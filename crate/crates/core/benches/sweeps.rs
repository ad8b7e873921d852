use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grpo_dynamics::calibration::WeightScheme;
use grpo_dynamics::dynamics::{stability_map, VariantSpec};
use grpo_dynamics::oracle::estimate_batch;
use grpo_dynamics::par::Execution;
use grpo_dynamics::trainer::{train, TrainConfig};
use grpo_dynamics::verify::{optimality, VerifyConfig};
use grpo_dynamics::world::random;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn bench_stability_map(c: &mut Criterion) {
    let betas = log_grid(0.01, 10.0, 24);
    let prefs: Vec<f64> = (1..40).map(|i| i as f64 / 40.0).collect();
    let scheme = WeightScheme::stabilized(1e-5).unwrap();
    let mut g = c.benchmark_group("stability_map_24x39");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| stability_map(black_box(&betas), &prefs, scheme, 512, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_estimate_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random::world(&mut rng, 1, 8, 8);
    let pi = random::policy(&mut rng, &w);
    let q = w.prompts()[0].id().to_string();
    let seeds: Vec<u64> = (0..4096).collect();
    let mut g = c.benchmark_group("estimate_batch_4096_seeds");
    for group in [16usize, 256] {
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, group), &group, |b, &group| {
                b.iter(|| estimate_batch(&w, &pi, &q, group, black_box(&seeds), exec).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_train(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random::world(&mut rng, 16, 2, 10);
    let pi = random::policy(&mut rng, &w);
    let v = VariantSpec::reference(WeightScheme::stabilized(1e-5).unwrap(), 1.0).unwrap();
    let mut g = c.benchmark_group("train_16_prompts");
    g.sample_size(20);
    for (name, exec) in MODES {
        let mut config = TrainConfig::new(v, 10, 200);
        config.execution = exec;
        g.bench_function(name, |b| b.iter(|| train(&w, black_box(&pi), &config).unwrap()));
    }
    g.finish();
}

fn bench_optimality_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("verify_optimality_50_worlds");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut config = VerifyConfig::quick(0);
        config.optimality_worlds = 50;
        config.execution = exec;
        g.bench_function(name, |b| b.iter(|| optimality(black_box(&config)).unwrap()));
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_stability_map,
    bench_estimate_batch,
    bench_train,
    bench_optimality_suite
);
criterion_main!(benches);
