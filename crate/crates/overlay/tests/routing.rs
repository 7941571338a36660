use std::collections::BTreeMap;
use std::time::Duration;

use pando_core::{pushable, DemandSource, PushHandle};
use pando_overlay::config::OverlayConfig;
use pando_overlay::id::{fnv1a64, NodeId};
use pando_overlay::sim::{Sim, SimConfig, ROOT};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Input that never yields nor ends, keeping the run (and its
/// heartbeats) alive while only the tree is under test.
fn idle_input() -> (DemandSource<String>, PushHandle<String>) {
    pushable()
}

/// Textbook FNV-1a written out byte by byte, independent of the library.
fn fnv_oracle(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(1099511628211);
    }
    h
}

#[test]
fn fnv_reference_vectors() {
    assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
    assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    assert_eq!(fnv1a64(&1u64.to_be_bytes()), 0xa8c7f732281a3812);
    assert_eq!(NodeId(0).delegate_index(NodeId(1), 10), 4);
}

proptest! {
    #[test]
    fn fnv_matches_oracle(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(fnv1a64(&bytes), fnv_oracle(&bytes));
    }

    #[test]
    fn delegation_is_deterministic_and_in_range(node in any::<u64>(), origin in any::<u64>(), degree in 1usize..64) {
        let i = NodeId(node).delegate_index(NodeId(origin), degree);
        prop_assert!(i < degree);
        prop_assert_eq!(i, NodeId(node).delegate_index(NodeId(origin), degree));
        let expect = (fnv_oracle(&(node ^ origin).to_be_bytes()) % degree as u64) as usize;
        prop_assert_eq!(i, expect);
    }
}

/// Chi-square statistic of `counts` against the uniform distribution, and
/// the critical value at significance `alpha`.
fn chi_square(counts: &[u64], alpha: f64) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(1.0 - alpha);
    (stat, critical)
}

#[test]
fn delegation_is_uniform_over_children() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let node = NodeId(rng.random());
        let mut counts = [0u64; 10];
        for _ in 0..10_000 {
            counts[node.delegate_index(NodeId(rng.random()), 10)] += 1;
        }
        let (stat, critical) = chi_square(&counts, 0.01);
        assert!(
            stat < critical,
            "chi2 {stat:.2} >= {critical:.2}: {counts:?}"
        );
    }
}

/// Sequential joins routed by a plain recursive reference router: accept
/// into the lowest free slot, else hand to the child picked by the hash.
fn reference_tree(root: NodeId, joins: &[NodeId], degree: usize) -> BTreeMap<NodeId, NodeId> {
    let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut parent = BTreeMap::new();
    for &origin in joins {
        let mut at = root;
        loop {
            let kids = children.entry(at).or_default();
            if kids.len() < degree {
                kids.push(origin);
                parent.insert(origin, at);
                break;
            }
            at = kids[at.delegate_index(origin, degree)];
        }
    }
    parent
}

fn depth_of(parent: &BTreeMap<NodeId, NodeId>, mut n: NodeId) -> usize {
    let mut d = 0;
    while let Some(&p) = parent.get(&n) {
        d += 1;
        n = p;
    }
    d
}

#[test]
fn sequential_joins_match_reference_router() {
    for seed in 0..3 {
        let (input, _keep) = idle_input();
        let mut sim = Sim::new(
            SimConfig {
                seed,
                ..SimConfig::default()
            },
            input,
        );
        let vols: Vec<usize> = (0..111)
            .map(|k| sim.add_volunteer(Duration::from_millis(1000 + 500 * k as u64)))
            .collect();
        assert!(sim.run_until(Duration::from_secs(120), |s| s.depths().len() == 111));
        let root = sim.node(ROOT).id().unwrap();
        for &i in &vols {
            assert_eq!(
                sim.node(i).stats().join_attempts,
                1,
                "seed {seed}: node {i} retried"
            );
        }
        let order: Vec<NodeId> = vols.iter().map(|&i| sim.node(i).id().unwrap()).collect();
        let expect = reference_tree(root, &order, 10);
        for &i in &vols {
            let id = sim.node(i).id().unwrap();
            assert_eq!(
                sim.node(i).parent(),
                Some(expect[&id]),
                "seed {seed}, node {id}"
            );
        }
        let deepest = order.iter().map(|&id| depth_of(&expect, id)).max().unwrap();
        assert_eq!(sim.depths().values().max().copied(), Some(deepest));
    }
}

fn depth_bound(n: usize, degree: usize) -> usize {
    // Smallest d with 1 + degree + ... + degree^d >= n + 1, plus one level.
    let (mut level, mut capacity, mut d) = (1usize, 0usize, 0usize);
    while capacity < n {
        level *= degree;
        capacity += level;
        d += 1;
    }
    d + 1
}

#[test]
fn concurrent_joins_respect_degree_and_depth_bounds() {
    assert_eq!(depth_bound(1000, 10), 4);
    for (seed, n) in [(1u64, 50usize), (2, 300), (3, 1000)] {
        let (input, _keep) = idle_input();
        let mut sim = Sim::new(
            SimConfig {
                seed,
                ..SimConfig::default()
            },
            input,
        );
        sim.add_volunteers(n, Duration::ZERO, Duration::ZERO);
        let mut max_children = 0;
        let mut steps = 0;
        let done = sim.run_until(Duration::from_secs(30), |s| {
            steps += 1;
            if steps % 500 == 0 {
                max_children = max_children.max(s.max_children());
            }
            s.depths().len() == n
        });
        max_children = max_children.max(sim.max_children());
        assert!(done, "seed {seed}: {} of {n} attached", sim.depths().len());
        assert!(max_children <= 10);
        let depth = *sim.depths().values().max().unwrap();
        assert!(depth <= depth_bound(n, 10), "n {n}: depth {depth}");
    }
}

#[test]
fn default_config_matches_experiment_parameters() {
    let cfg = OverlayConfig::default();
    assert_eq!(cfg.max_degree, 10);
    assert_eq!(cfg.candidate_timeout, Duration::from_secs(60));
    assert_eq!(cfg.child_capacity(3), 30);
    assert_eq!(cfg.child_capacity(2), 20);
}

#[test]
fn hash_routing_overflows_below_two_levels() {
    // 110 joins fit exactly into two full levels, but delegation picks the
    // child by hash rather than by free space, so some subtrees overflow
    // to a third level while siblings still have room.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let root = NodeId(rng.random());
        let joins: Vec<NodeId> = (0..110).map(|_| NodeId(rng.random())).collect();
        let tree = reference_tree(root, &joins, 10);
        let deepest = joins.iter().map(|&j| depth_of(&tree, j)).max().unwrap();
        assert!(
            (2..=depth_bound(110, 10)).contains(&deepest),
            "depth {deepest}"
        );
    }
}
