use std::time::Duration;

use pando_core::from_iter;
use pando_overlay::sim::{JobCost, Sim, SimConfig};

fn squares_input(n: u64) -> pando_core::DemandSource<String> {
    from_iter((0..n).map(|i| i.to_string()))
}

#[test]
fn small_tree_computes_squares_in_order() {
    let cfg = SimConfig {
        cost: JobCost::Fixed(Duration::from_millis(10)),
        ..SimConfig::default()
    };
    let mut sim = Sim::new(cfg, squares_input(2000));
    sim.add_volunteers(25, Duration::ZERO, Duration::from_secs(1));
    assert!(sim.run(Duration::from_secs(600)), "did not finish");
    let out: Vec<String> = sim.output().map(str::to_owned).collect();
    let expect: Vec<String> = (0..2000u64).map(|i| (i * i).to_string()).collect();
    assert_eq!(out, expect);
    let (t, r) = sim.finished().unwrap();
    assert!(r.is_ok());
    eprintln!(
        "finished at {t:?}, depths {:?}",
        sim.depths().values().collect::<Vec<_>>()
    );
    assert_eq!(sim.depths().len(), 25);
}

#[test]
fn faults_do_not_change_output() {
    use pando_overlay::fault::{Fault, Selector};
    use rand::{Rng, SeedableRng};
    for seed in 0..5u64 {
        let cfg = SimConfig {
            seed,
            cost: JobCost::Uniform(Duration::ZERO, Duration::from_millis(50)),
            ..SimConfig::default()
        };
        let mut sim = Sim::new(cfg, squares_input(10_000));
        sim.add_volunteers(32, Duration::ZERO, Duration::from_secs(1));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let at_ms = rng.random_range(1000..8000);
            let select = if rng.random_bool(0.25) {
                Selector::Coordinator
            } else {
                Selector::Leaf
            };
            sim.schedule_fault(Fault {
                at_ms,
                select,
                count: 1,
            });
        }
        let done = sim.run(Duration::from_secs(3600));
        let out: Vec<&str> = sim.output().collect();
        let ok = out
            .iter()
            .enumerate()
            .all(|(i, l)| *l == ((i * i) as u64).to_string());
        eprintln!(
            "seed {seed}: done {done} at {:?}, lines {}, ordered {ok}, kills {}, events {}",
            sim.now(),
            out.len(),
            sim.kills().len(),
            sim.events()
        );
        assert!(done && ok && out.len() == 10_000);
    }
}
