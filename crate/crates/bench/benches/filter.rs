use criterion::{criterion_group, criterion_main, Criterion};
use msf_core::dynamics::{rollout, FleetInput, FleetState, RobotInput};
use msf_core::harness::ScenarioConfig;
use msf_core::safety_filter::{filter_step, FilterConfig};
use msf_core::Tracker;
use std::hint::black_box;

fn ring(n: usize) -> FleetState {
    let mut cfg = ScenarioConfig::default();
    cfg.fleet_size = n;
    cfg.initial_state().unwrap()
}

fn bench_filter(c: &mut Criterion) {
    let cfg = FilterConfig::default();
    for n in [5, 20] {
        let x = ring(n);
        let u_a = FleetInput::new(vec![RobotInput::new(2.0, 0.0); n]);
        c.bench_function(&format!("filter_step/{n}"), |b| {
            b.iter(|| filter_step(black_box(&x), black_box(&u_a), None, &cfg, 0).unwrap())
        });
    }
}

fn bench_tracker(c: &mut Criterion) {
    for n in [5, 20] {
        let mut sc = ScenarioConfig::default();
        sc.fleet_size = n;
        let x = ring(n);
        let mut tracker = Tracker::new(sc.tracker_config(), sc.reference_spec(), sc.constraints).unwrap();
        c.bench_function(&format!("tracker_cold/{n}"), |b| {
            b.iter(|| {
                tracker.reset();
                tracker.compute_command(black_box(&x), 0.0).unwrap()
            })
        });
    }
}

fn bench_rollout(c: &mut Criterion) {
    let x = ring(20);
    let inputs = vec![FleetInput::new(vec![RobotInput::new(1.0, 0.5); 20]); 20];
    c.bench_function("rollout/20x20", |b| b.iter(|| rollout(black_box(&x), black_box(&inputs), 0.02).unwrap()));
}

criterion_group!(benches, bench_filter, bench_tracker, bench_rollout);
criterion_main!(benches);
