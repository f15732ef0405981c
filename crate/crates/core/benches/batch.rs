//! Data-parallel hot paths: per-sample loss gradients over a batch,
//! evaluation episodes and verifier instances.
//!
//! With the default `parallel` feature each case runs twice, on a
//! one-thread pool and on a pool with every available core (skipped on a
//! single-core host). Built with
//! `--no-default-features` the same cases run on the plain loop, labelled
//! `sequential`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use arac_core::experiment::{evaluate, TeamPolicy};
use arac_core::game::{Game, ScenarioConfig};
use arac_core::gradcheck::random_transitions;
use arac_core::mapgen::{generate_map, MapKind};
use arac_core::nets::NetConfig;
use arac_core::trainer::{critic_loss, policy_loss, KlStatistic, Learner, TrainerConfig, Transition};
use arac_core::verifier::{certify, CertificateConfig};

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

#[cfg(feature = "parallel")]
fn modes() -> Vec<(String, Pool)> {
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool");
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut modes = vec![("pool-1".to_string(), pool(1))];
    if all > 1 {
        modes.push((format!("pool-{all}"), pool(all)));
    }
    modes
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(String, Pool)> {
    vec![("sequential".to_string(), ())]
}

#[cfg(feature = "parallel")]
fn run_in<R: Send>(pool: &Pool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn run_in<R: Send>(_pool: &Pool, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn game(scenario: ScenarioConfig) -> Game {
    Game::new(scenario, generate_map(MapKind::Random, 20, 0).expect("map")).expect("game")
}

fn net(f: usize) -> NetConfig {
    NetConfig {
        d_model: 16,
        encoder_layers: 2,
        ..NetConfig::new(f)
    }
}

fn batch_gradients(c: &mut Criterion) {
    let g = game(ScenarioConfig::confrontation(2));
    let l = Learner::new(g.clone(), net(g.config().feature_width()), TrainerConfig::default(), 0).expect("learner");
    let ts = random_transitions(&g, 32, &mut ChaCha8Rng::seed_from_u64(1));
    let batch: Vec<&Transition> = ts.iter().collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (label, pool) in modes() {
        group.bench_function(BenchmarkId::new("critic_and_policy", &label), |b| {
            b.iter(|| {
                run_in(&pool, || {
                    let m = l.models();
                    let critic = critic_loss(m, &l.coeffs, &batch, 7).expect("critic loss");
                    let policy = policy_loss(m, &l.coeffs, &batch, KlStatistic::Mean).expect("policy loss");
                    black_box((critic.1.loss, policy.1.loss))
                })
            })
        });
    }
    group.finish();
}

fn eval_episodes(c: &mut Criterion) {
    let g = game(ScenarioConfig::pursuit(2));
    let l = Learner::new(g.clone(), net(g.config().feature_width()), TrainerConfig::default(), 0).expect("learner");
    let mut group = c.benchmark_group("eval_episodes");
    group.sample_size(10);
    for (label, pool) in modes() {
        group.bench_function(BenchmarkId::new("greedy_32", &label), |b| {
            b.iter(|| {
                run_in(&pool, || {
                    let policy = TeamPolicy::Net {
                        params: &l.actor,
                        greedy: true,
                    };
                    black_box(evaluate(&g, policy, TeamPolicy::Scripted, 32, 3).expect("eval").success_rate)
                })
            })
        });
    }
    group.finish();
}

fn verifier_instances(c: &mut Criterion) {
    let cfg = CertificateConfig {
        instances: 16,
        ..CertificateConfig::default()
    };
    let mut group = c.benchmark_group("verifier_instances");
    group.sample_size(10);
    for (label, pool) in modes() {
        group.bench_function(BenchmarkId::new("certify_16", &label), |b| {
            b.iter(|| run_in(&pool, || black_box(certify(&cfg).expect("certificate").max_ratio())))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, eval_episodes, verifier_instances);
criterion_main!(benches);
