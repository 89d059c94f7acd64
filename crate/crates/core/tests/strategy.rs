use std::collections::BTreeSet;

use ecore::autodiff::{Tape, Tensor};
use ecore::decoder::{
    apply_strategy, improved_forward, otsu_split, ranking, Strategy, StrategyOutcome, StrategyPlan, MAX_RELEVANT,
};
use ecore::graph::{correlation_matrix, graph_forward, init_edges, GraphConfig, GraphParams, GraphTopology};
use ecore::nn::Ctx;
use ecore::params::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tries every top-r prefix with the textbook between-class variance.
fn brute_force(values: &[f64], max_relevant: usize) -> BTreeSet<usize> {
    let p = values.len();
    let order = ranking(values);
    let mean = |ids: &[usize]| ids.iter().map(|&i| values[i]).sum::<f64>() / ids.len() as f64;
    let mu = mean(&order);
    let mut best = (f64::NEG_INFINITY, 0);
    for r in 1..=max_relevant.min(p - 1) {
        let w = r as f64 / p as f64;
        let var = w * (mu - mean(&order[..r])).powi(2) + (1.0 - w) * (mu - mean(&order[r..])).powi(2);
        if var > best.0 {
            best = (var, r);
        }
    }
    order[..best.1].iter().copied().collect()
}

#[test]
fn otsu_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for case in 0..1000 {
        let p = [4, 8, 32][case % 3];
        let values: Vec<f64> = (0..p).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let split = otsu_split(&values, MAX_RELEVANT).unwrap();
        if split.relevant != brute_force(&values, MAX_RELEVANT) {
            mismatches += 1;
        }
        assert_eq!(split.relevant.len() + split.irrelevant.len(), p);
        assert!(split.relevant.is_disjoint(&split.irrelevant));
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn otsu_examples() {
    let s = otsu_split(&[5.0, 4.9, 0.1, 0.0], 5).unwrap();
    assert_eq!(s.relevant, [0, 1].into());
    let s = otsu_split(&[3.0, 3.0, 3.0, 3.0], 5).unwrap();
    assert_eq!(s.relevant, [0].into(), "ties pick the smallest split");
    assert_eq!(s.variance, 0.0);
    let s = otsu_split(&[1.0, 9.0], 5).unwrap();
    assert_eq!(s.relevant, [1].into());
    assert!(otsu_split(&[1.0], 5).is_err());
}

proptest! {
    #[test]
    fn otsu_relevant_outranks_irrelevant(values in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        let s = otsu_split(&values, MAX_RELEVANT).unwrap();
        prop_assert!(!s.relevant.is_empty() && s.relevant.len() <= MAX_RELEVANT.min(values.len() - 1));
        let low = s.relevant.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        let high = s.irrelevant.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(low >= high);
    }
}

struct Setup {
    store: ParamStore,
    params: GraphParams,
    topology: GraphTopology,
    intensity: Vec<f64>,
    h0: Tensor,
}

fn setup() -> Setup {
    let cfg = GraphConfig { thresholds: vec![0.0, 0.1], layers: 2, emotions: 5, d_model: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let params = GraphParams::new(&mut store, &cfg, 0.5, &mut rng);
    let intensity = vec![0.2, 0.0, 0.12, 0.05];
    let topology = GraphTopology::build(&intensity, &cfg);
    let n = topology.nodes();
    let h0 = Tensor::matrix(n, 8, (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    Setup { store, params, topology, intensity, h0 }
}

/// First-pass outputs and second-pass outputs under `make_plan`, as plain tensors.
fn both_passes(s: &Setup, make_plan: impl FnOnce(&mut Ctx, &GraphTopology) -> StrategyPlan) -> [(Tensor, Tensor); 3] {
    let mut tape = Tape::new();
    let bindings = s.store.bind(&mut tape);
    let mut ctx = Ctx::eval(&mut tape, &bindings);
    let h0 = ctx.constant(s.h0.clone());
    let r = correlation_matrix(ctx.tape, ctx.p(s.params.correlation)).unwrap();
    let edges = init_edges(&mut ctx, &s.intensity, r, &s.topology, None).unwrap();
    let first = graph_forward(&mut ctx, h0, &edges, &s.topology, &s.params).unwrap();
    let plan = make_plan(&mut ctx, &s.topology);
    let second = improved_forward(&mut ctx, h0, &s.intensity, r, &plan, &s.params).unwrap();
    let pair = |a, b| (tape.value(a).clone(), tape.value(b).clone());
    [
        pair(first.word_emotion, second.word_emotion),
        pair(first.emotion_emotion, second.emotion_emotion),
        pair(first.node_features, second.node_features),
    ]
}

fn assert_bitwise(pairs: &[(Tensor, Tensor)]) {
    for (a, b) in pairs {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{a:?} != {b:?}");
    }
}

#[test]
fn soft_with_uniform_label_is_a_no_op() {
    let s = setup();
    let pairs = both_passes(&s, |ctx, topo| {
        let h_emo = ctx.constant(Tensor::row(vec![0.7; 5]));
        let plan = apply_strategy(ctx, Strategy::Soft, h_emo, topo).unwrap();
        assert!(plan.outcome.soft_label.as_ref().unwrap().iter().all(|&v| v == 0.2));
        plan
    });
    assert_bitwise(&pairs);
}

#[test]
fn hard_with_every_emotion_relevant_is_a_no_op() {
    let s = setup();
    let pairs = both_passes(&s, |_, topo| {
        let all: BTreeSet<usize> = (0..5).collect();
        StrategyPlan {
            outcome: StrategyOutcome {
                mode: Strategy::Hard,
                h_emo: vec![0.0; 5],
                soft_label: None,
                relevant: Some(all.clone()),
                irrelevant: Some(BTreeSet::new()),
                selected: all,
            },
            topology: topo.without_emotions(&BTreeSet::new()),
            edge_override: None,
        }
    });
    assert_bitwise(&pairs);
}

#[test]
fn hard_removes_irrelevant_emotion_nodes() {
    let s = setup();
    let mut tape = Tape::new();
    let bindings = s.store.bind(&mut tape);
    let mut ctx = Ctx::eval(&mut tape, &bindings);
    let h_emo = ctx.constant(Tensor::row(vec![4.0, -1.0, 3.8, -1.2, -0.9]));
    let plan = apply_strategy(&mut ctx, Strategy::Hard, h_emo, &s.topology).unwrap();
    assert_eq!(plan.outcome.relevant, Some([0, 2].into()));
    assert_eq!(plan.outcome.selected, [0, 2].into());
    let (m, n) = (s.topology.words(), s.topology.nodes());
    for k in 0..s.topology.resolutions().len() {
        let adj = plan.topology.adjacency(k);
        for e in [1, 3, 4] {
            let node = m + e;
            assert!((0..n).all(|j| !adj[node * n + j] && !adj[j * n + node]), "emotion {e} still connected");
        }
    }
}
