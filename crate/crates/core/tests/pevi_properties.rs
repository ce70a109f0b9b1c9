use horl_core::data::*;
use horl_core::mdp::*;
use horl_core::pevi::*;
use proptest::prelude::*;

fn small_hyper(seed: u64, c: usize) -> (LinearTabularMDP, BehaviorPolicy, HyperMDP) {
    let mdp = LinearTabularMDP::generate(seed, 3, 5, 3, 0.9, 1.0).unwrap();
    let behavior = make_behavior_policy(&mdp, 3, SkillStyle::SoftmaxDiverse, seed).unwrap();
    let hyper = HyperMDP::build(&mdp, behavior.skills(), c).unwrap();
    (mdp, behavior, hyper)
}

fn dataset(mdp: &LinearTabularMDP, behavior: &BehaviorPolicy, n: usize, c: usize, seed: u64) -> HighLevelDataset<usize, usize> {
    let trajs = sample_trajectories(mdp, behavior, &SamplingConfig::aligned(n, 3 * c, c), seed).unwrap();
    let low = segment_low_dataset(&trajs, c).unwrap();
    relabel_high_dataset(&low, &GroundTruth, mdp.gamma()).unwrap()
}

fn tuple(s0: usize, z: usize, reward: f64, s_c: usize) -> HighTuple<usize, usize> {
    HighTuple { s0, z, reward, s_c, weight: 1.0 }
}

fn no_bonus() -> PeviConfig {
    PeviConfig { beta_scale: 0.0, ..Default::default() }
}

#[test]
fn single_tuple_ridge_weight_is_one_half() {
    let (_, _, hyper) = small_hyper(0, 1);
    let mut data = vec![0.0; 5 * 3 * 2];
    data[0] = 1.0;
    let features = FeatureTable::new(5, 3, 2, data).unwrap();
    let hi = HighLevelDataset { c: 1, gamma: 0.9, tuples: vec![tuple(0, 0, 1.0, 1)] };
    let est = fit_pessimistic_value_with(&hi, &hyper, &features, &no_bonus()).unwrap();
    assert!((est.w_hat[0] - 0.5).abs() < 1e-12);
    assert_eq!(est.w_hat[1], 0.0);
    assert_eq!(est.v_hat[1], 0.0);
}

#[test]
fn zero_features_give_maximal_pessimism() {
    let (_, _, hyper) = small_hyper(1, 2);
    let features = FeatureTable::new(5, 3, 2, vec![0.0; 30]).unwrap();
    let hi = HighLevelDataset { c: 2, gamma: 0.9, tuples: vec![tuple(0, 1, 1.0, 2), tuple(3, 2, 0.5, 4)] };
    let est = fit_pessimistic_value_with(&hi, &hyper, &features, &PeviConfig::default()).unwrap();
    assert!(est.w_hat.iter().all(|&w| w == 0.0));
    assert!(est.q_hat.iter().all(|&q| q == 0.0));
    assert_eq!(est.chosen_skills(), vec![0; 5]);
}

#[test]
fn unvisited_orthonormal_features_get_the_prior_bonus() {
    let (mdp, behavior, hyper) = small_hyper(2, 1);
    let hi = dataset(&mdp, &behavior, 20, 1, 2);
    let features = FeatureTable::indicator(5, 3);
    let cfg = PeviConfig { beta_scale: 3.0, lambda_reg: 4.0, ..Default::default() };
    let est = fit_pessimistic_value_with(&hi, &hyper, &features, &cfg).unwrap();
    for s in 0..5 {
        for z in 0..3 {
            let count: f64 = hi.tuples.iter().filter(|t| t.s0 == s && t.z == z).map(|t| t.weight).sum();
            let expected = 3.0 / (4.0 + count).sqrt();
            assert!((est.gamma_bonus(s, z) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn ridge_weights_minimise_the_empirical_bellman_error() {
    for seed in 0..10 {
        let c = 1 + (seed % 3) as usize;
        let (mdp, behavior, hyper) = small_hyper(seed, c);
        let hi = dataset(&mdp, &behavior, 40, c, seed);
        let cfg = PeviConfig { beta_scale: 0.5, ..Default::default() };
        let est = fit_pessimistic_value(&hi, &hyper, &cfg).unwrap();
        let grad = msbe_gradient(&hi, &hyper.composed_features(), hyper.gamma_eff(), 1.0, &est.v_backup, &est.w_hat);
        assert!(grad.iter().all(|g| g.abs() <= 1e-8), "seed {seed}: {grad:?}");
    }
}

#[test]
fn truncation_keeps_values_in_range() {
    let (mdp, behavior, hyper) = small_hyper(4, 3);
    let hi = dataset(&mdp, &behavior, 30, 3, 4);
    let est = fit_pessimistic_value(&hi, &hyper, &no_bonus()).unwrap();
    assert!(est.converged);
    assert!(est.v_hat.iter().all(|&v| (0.0..=hyper.v_max()).contains(&v)));
}

#[test]
fn policy_is_the_lowest_index_argmax() {
    let (mdp, behavior, hyper) = small_hyper(5, 2);
    let hi = dataset(&mdp, &behavior, 30, 2, 5);
    let est = fit_pessimistic_value(&hi, &hyper, &PeviConfig { beta_scale: 0.2, ..Default::default() }).unwrap();
    for (s, &z) in pevi_policy(&est).argmax_choices().iter().enumerate() {
        let row: Vec<f64> = (0..3).map(|j| est.q(s, j)).collect();
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|&q| q == best).unwrap();
        assert_eq!(z, first);
    }
}

#[test]
fn exact_expectations_give_no_quantifier_violations() {
    let (_, _, hyper) = small_hyper(6, 2);
    let n = hyper.num_states();
    let dense = hyper.dense();
    let mut tuples = Vec::new();
    for s in 0..n {
        for z in 0..3 {
            for (next, &p) in dense.row(s, z).iter().enumerate() {
                if p > 0.0 {
                    tuples.push(HighTuple { s0: s, z, reward: dense.reward(s, z), s_c: next, weight: 1e9 * p });
                }
            }
        }
    }
    let hi = HighLevelDataset { c: 2, gamma: 0.9, tuples };
    let features = FeatureTable::indicator(n, 3);
    let cfg = PeviConfig { beta_scale: 1e-3, ..Default::default() };
    let est = fit_pessimistic_value_with(&hi, &hyper, &features, &cfg).unwrap();
    assert_eq!(uncertainty_quantifier_violation_rate(&hyper, &est, &features).unwrap(), 0.0);
}

#[test]
fn violation_rate_falls_as_the_bonus_grows() {
    let (mdp, behavior, hyper) = small_hyper(7, 2);
    let hi = dataset(&mdp, &behavior, 15, 2, 7);
    let features = hyper.composed_features();
    let mut last = f64::INFINITY;
    for beta in [0.0, 0.05, 0.2, 1.0, 5.0] {
        let est = fit_pessimistic_value_with(&hi, &hyper, &features, &PeviConfig { beta_scale: beta, ..Default::default() }).unwrap();
        let rate = uncertainty_quantifier_violation_rate(&hyper, &est, &features).unwrap();
        if beta == 0.0 {
            assert!(rate > 0.0);
        }
        assert!(rate <= last);
        last = rate;
    }
}

#[test]
fn estimate_serialises_for_audit() {
    let (mdp, behavior, hyper) = small_hyper(8, 1);
    let hi = dataset(&mdp, &behavior, 10, 1, 8);
    let est = fit_pessimistic_value(&hi, &hyper, &PeviConfig::default()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&est.to_json().unwrap()).unwrap();
    for key in ["w_hat", "lambda", "beta_scale", "v_hat", "policy"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bonus_is_invariant_to_row_order(seed in 0u64..1_000, rot in 0usize..50) {
        let (mdp, behavior, hyper) = small_hyper(seed, 2);
        let hi = dataset(&mdp, &behavior, 10, 2, seed);
        let mut shuffled = hi.clone();
        let k = rot % shuffled.tuples.len();
        shuffled.tuples.rotate_left(k);
        shuffled.tuples.reverse();
        let cfg = PeviConfig { beta_scale: 1.0, ..Default::default() };
        let a = fit_pessimistic_value(&hi, &hyper, &cfg).unwrap();
        let b = fit_pessimistic_value(&shuffled, &hyper, &cfg).unwrap();
        for (x, y) in a.bonus.iter().zip(&b.bonus) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
