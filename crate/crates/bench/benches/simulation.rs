use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use odap_bench::reference_scenario;
use odap_core::analysis::{fit_factorial, FitOptions};
use odap_core::des::{Engine, EventLabel};
use odap_core::{run_sweep, DistributionPattern, SimOptions, Simulator, SweepPlan};

struct Tick(u64);

impl EventLabel for Tick {
    fn kind(&self) -> &'static str {
        "tick"
    }
    fn entity(&self) -> u64 {
        self.0
    }
}

fn single_run(c: &mut Criterion) {
    let s = reference_scenario();
    let sim = Simulator::new(&s).unwrap();
    let mut g = c.benchmark_group("simulate");
    for (name, pattern) in [
        ("oda", DistributionPattern::oda(8)),
        ("full_odap", DistributionPattern::full_odap(8)),
    ] {
        g.bench_function(name, |b| {
            b.iter(|| {
                sim.run(black_box(&pattern), 1e6, 7, SimOptions::default())
                    .unwrap()
                    .makespan_s
            })
        });
    }
    g.finish();
}

fn engine_calendar(c: &mut Criterion) {
    c.bench_function("engine/100k_events", |b| {
        b.iter_batched(
            || {
                let mut e = Engine::new();
                for i in 0..100_000u64 {
                    e.schedule((i * 7919 % 100_003) as f64, Tick(i)).unwrap();
                }
                e
            },
            |mut e| {
                e.run_until(|_, _| Ok(()), |_| false)
                    .unwrap()
                    .events_processed
            },
            BatchSize::LargeInput,
        )
    });
}

fn sweep_and_fit(c: &mut Criterion) {
    let s = reference_scenario();
    let plan = SweepPlan {
        throughputs: vec![1e6],
        replicates: 1,
        ..SweepPlan::default()
    };
    let mut g = c.benchmark_group("campaign");
    g.sample_size(10);
    g.bench_function("sweep_256_patterns", |b| {
        b.iter(|| run_sweep(&s, &plan, 1).unwrap().records.len())
    });
    let records = run_sweep(
        &s,
        &SweepPlan {
            replicates: 10,
            ..plan.clone()
        },
        1,
    )
    .unwrap()
    .records;
    g.bench_function("fit_2560_runs_93_terms", |b| {
        b.iter(|| {
            fit_factorial(black_box(&records), &FitOptions::default())
                .unwrap()
                .estimates
                .len()
        })
    });
    g.bench_function("fit_least_squares", |b| {
        let options = FitOptions {
            force_least_squares: true,
            ..FitOptions::default()
        };
        b.iter(|| {
            fit_factorial(black_box(&records), &options)
                .unwrap()
                .estimates
                .len()
        })
    });
    g.finish();
}

criterion_group!(benches, single_run, engine_calendar, sweep_and_fit);
criterion_main!(benches);
