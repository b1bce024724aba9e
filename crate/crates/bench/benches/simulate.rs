use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use sods_core::engine::{pareto_interarrival, rng_stream, EventKind, RngStream, Scheduler, TrafficProfile};
use sods_core::model::PowerCalibration;
use sods_core::topology::build_topology;
use sods_core::{simulate, Scenario};

fn full_run(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    let mut short = Scenario::default();
    short.horizon_s = 10.0;
    g.bench_function("default_10s", |b| b.iter(|| simulate(black_box(&short)).unwrap()));
    g.bench_function("default_60s", |b| {
        b.iter(|| simulate(black_box(&Scenario::default())).unwrap())
    });
    g.finish();
}

fn scheduler(c: &mut Criterion) {
    let profile = TrafficProfile::default();
    c.bench_function("scheduler_100k_events", |b| {
        b.iter_batched(
            || (Scheduler::new(), rng_stream(1, RngStream::Traffic)),
            |(mut s, mut rng)| {
                for f in 0..100 {
                    s.schedule(0.0, EventKind::FlowEmit { flow: f }).unwrap();
                }
                let mut left = 100_000u32;
                s.run_until(f64::MAX, |s, ev| {
                    left -= 1;
                    if left >= 100 {
                        s.schedule_in(pareto_interarrival(&mut rng, &profile), ev.kind)?;
                    }
                    Ok(())
                })
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn routing(c: &mut Criterion) {
    let cfg = Scenario::default().topology_config();
    let topo = build_topology(&cfg, PowerCalibration::default(), &mut rng_stream(42, RngStream::Placement)).unwrap();
    let n = topo.len() as u32;
    c.bench_function("interzone_all_pairs_rho2", |b| {
        b.iter(|| {
            let mut hops = 0usize;
            for a in 0..n {
                for d in (0..n).filter(|&d| d != a) {
                    if let Ok(r) = topo.interzone_route(a, d, 2, n) {
                        hops += r.hop_count();
                    }
                }
            }
            hops
        })
    });
}

criterion_group!(benches, full_run, scheduler, routing);
criterion_main!(benches);
