use ecg_aging::gbdt::{self, TrainConfig, TrainData, Tree, TreeEnsemble, TreeNode};
use ecg_aging::treeshap::{explain_instance, tree_shap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grow(nodes: &mut Vec<TreeNode>, rng: &mut ChaCha8Rng, depth: usize, n_features: usize) -> usize {
    let id = nodes.len();
    nodes.push(TreeNode::Leaf { value: 0.0, cover: 0.0 });
    if depth < 3 && rng.random::<f64>() < 0.75 {
        let feature = rng.random_range(0..n_features);
        let threshold = rng.random::<f64>();
        let missing_left = rng.random::<bool>();
        let left = grow(nodes, rng, depth + 1, n_features);
        let right = grow(nodes, rng, depth + 1, n_features);
        let cover = nodes[left].cover() + nodes[right].cover();
        nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            missing_left,
            cover,
        };
    } else {
        nodes[id] = TreeNode::Leaf {
            value: rng.random_range(-2.0..2.0),
            cover: rng.random_range(1.0..20.0),
        };
    }
    id
}

fn random_tree(rng: &mut ChaCha8Rng, n_features: usize) -> Tree {
    let mut nodes = Vec::new();
    grow(&mut nodes, rng, 0, n_features);
    Tree { nodes }
}

fn random_x(rng: &mut ChaCha8Rng, n_features: usize) -> Vec<f64> {
    (0..n_features)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                f64::NAN
            } else {
                rng.random()
            }
        })
        .collect()
}

// Expected output when features outside `known` are integrated out over the
// training cover of each branch.
fn cond_expectation(tree: &Tree, node: usize, x: &[f64], known: u32) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { value, .. } => value,
        TreeNode::Split {
            feature,
            left,
            right,
            cover,
            ..
        } => {
            if known & (1 << feature) != 0 {
                cond_expectation(tree, tree.route(node, x).unwrap(), x, known)
            } else {
                (tree.nodes[left].cover() * cond_expectation(tree, left, x, known)
                    + tree.nodes[right].cover() * cond_expectation(tree, right, x, known))
                    / cover
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn brute_force_shap(tree: &Tree, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let v = |s: u32| cond_expectation(tree, 0, x, s);
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0..(1u32 << m) {
                if s & (1 << i) != 0 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = factorial(size) * factorial(m - size - 1) / factorial(m);
                phi += w * (v(s | (1 << i)) - v(s));
            }
            phi
        })
        .collect()
}

fn assert_matches_oracle(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_features = rng.random_range(1..=5);
    let tree = random_tree(&mut rng, n_features);
    for _ in 0..10 {
        let x = random_x(&mut rng, n_features);
        let mut phi = vec![0.0; n_features];
        tree_shap(&tree, &x, &mut phi);
        let want = brute_force_shap(&tree, &x);
        for (j, (a, b)) in phi.iter().zip(&want).enumerate() {
            assert!((a - b).abs() < 1e-9, "seed {seed} feature {j}: {a} vs {b}");
        }
    }
}

#[test]
fn fifty_random_trees_match_enumeration() {
    for seed in 0..50 {
        assert_matches_oracle(seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_trees_match_enumeration(seed in any::<u64>()) {
        assert_matches_oracle(seed);
    }
}

#[test]
fn hand_built_ensemble_sums_per_tree_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let names: Vec<String> = (0..4).map(|j| format!("f{j}")).collect();
    let cfg = TrainConfig {
        n_classes: 2,
        ..TrainConfig::default()
    };
    let mut model = TreeEnsemble::empty(names, cfg);
    model.base_score = vec![0.3, -0.1];
    for _ in 0..3 {
        model
            .rounds
            .push(vec![random_tree(&mut rng, 4), random_tree(&mut rng, 4)]);
    }
    for _ in 0..20 {
        let x = random_x(&mut rng, 4);
        for class in 0..2 {
            let e = explain_instance(&model, &x, class).unwrap();
            let mut want = vec![0.0; 4];
            for t in model.class_trees(class) {
                for (w, p) in want.iter_mut().zip(brute_force_shap(t, &x)) {
                    *w += p;
                }
            }
            for (a, b) in e.phi.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(e.local_accuracy_gap().abs() < 1e-9);
        }
    }
}

#[test]
fn trained_model_local_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 300;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_x(&mut rng, 6)).collect();
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| {
            let a = if r[0].is_nan() { 0.5 } else { r[0] };
            let b = if r[1].is_nan() { 0.5 } else { r[1] };
            ((a + b) * 1.5).floor().min(2.0) as usize
        })
        .collect();
    let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
    let cfg = TrainConfig {
        n_classes: 3,
        n_rounds: 40,
        learning_rate: 0.1,
        max_depth: 4,
        max_leaves: 8,
        early_stopping_rounds: None,
        ..TrainConfig::default()
    };
    let model = gbdt::fit(&names, TrainData::new(&rows, &labels), &cfg, None).unwrap();
    assert!(model.rounds.iter().flatten().any(|t| t.n_leaves() > 1));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_x(&mut rng, 6);
        for class in 0..3 {
            worst = worst.max(explain_instance(&model, &x, class).unwrap().local_accuracy_gap().abs());
        }
    }
    assert!(worst < 1e-9, "largest gap {worst:e}");
}
