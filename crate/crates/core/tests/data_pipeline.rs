use horl_core::data::*;
use horl_core::mdp::*;
use proptest::prelude::*;

/// Three-state ring where action `a` advances by `a` states; reward 1 in state 2.
fn ring() -> LinearTabularMDP {
    let (n, m) = (3, 2);
    let mut kernel = vec![0.0; n * m * n];
    let mut reward = vec![0.0; n * m];
    for s in 0..n {
        for a in 0..m {
            kernel[(s * m + a) * n + (s + a) % n] = 1.0;
            reward[s * m + a] = if s == 2 { 1.0 } else { 0.0 };
        }
    }
    LinearTabularMDP::tabular_embedding(n, m, &kernel, &reward, 0.9, 1.0, vec![1.0, 0.0, 0.0]).unwrap()
}

fn toy(lengths: &[usize]) -> Vec<TabularTrajectory> {
    lengths
        .iter()
        .map(|&len| Trajectory {
            states: (0..=len).map(|t| t % 3).collect(),
            actions: vec![1; len],
            rewards: (0..len).map(|t| (t % 2) as f64).collect(),
            skills: vec![0; len],
            skill_draws: vec![0],
        })
        .collect()
}

#[test]
fn deterministic_rollout_matches_hand_trace() {
    let mdp = ring();
    let skills = PolicyTable::deterministic(PolicyKind::LowLevel { num_skills: 1 }, 2, &[1, 1, 1]).unwrap();
    let prior = PolicyTable::deterministic(PolicyKind::HighLevel, 1, &[0, 0, 0]).unwrap();
    let behavior = BehaviorPolicy::new(prior, skills).unwrap();
    let trajs = sample_trajectories(&mdp, &behavior, &SamplingConfig::aligned(1, 5, 1), 42).unwrap();
    assert_eq!(trajs[0].states, vec![0, 1, 2, 0, 1, 2]);
    assert_eq!(trajs[0].actions, vec![1; 5]);
    assert_eq!(trajs[0].rewards, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn skills_are_redrawn_on_schedule() {
    let mdp = LinearTabularMDP::generate(1, 3, 5, 2, 0.9, 1.0).unwrap();
    let behavior = make_behavior_policy(&mdp, 2, SkillStyle::SoftmaxDiverse, 1).unwrap();
    let trajs = sample_trajectories(&mdp, &behavior, &SamplingConfig::aligned(4, 10, 5), 3).unwrap();
    for t in &trajs {
        assert_eq!(t.skill_draws, vec![0, 5]);
        assert!(t.skills[..5].iter().all(|&z| z == t.skills[0]));
    }
    let again = sample_trajectories(&mdp, &behavior, &SamplingConfig::aligned(4, 10, 5), 3).unwrap();
    assert_eq!(trajs, again);
}

#[test]
fn misaligned_draws_shift_boundaries() {
    let mdp = LinearTabularMDP::generate(1, 3, 5, 2, 0.9, 1.0).unwrap();
    let behavior = make_behavior_policy(&mdp, 2, SkillStyle::SoftmaxDiverse, 1).unwrap();
    let mut cfg = SamplingConfig::aligned(2, 10, 5);
    cfg.phase_offset = 2;
    let trajs = sample_trajectories(&mdp, &behavior, &cfg, 3).unwrap();
    assert_eq!(trajs[0].skill_draws, vec![0, 3, 8]);
}

#[test]
fn segmentation_examples() {
    let ds = segment_low_dataset(&toy(&[10]), 5).unwrap();
    assert_eq!((ds.len(), ds.dropped), (2, 0));
    let ds = segment_low_dataset(&toy(&[11]), 5).unwrap();
    assert_eq!((ds.len(), ds.dropped), (2, 1));
    let ds = segment_low_dataset(&toy(&[7, 3]), 1).unwrap();
    assert_eq!(ds.len(), 10);
    assert!(segment_low_dataset(&toy(&[3, 4]), 5).is_err());
    assert!(segment_low_dataset(&toy(&[3]), 0).is_err());
}

#[test]
fn relabeled_rewards_are_discounted_window_sums() {
    let traj = Trajectory {
        states: vec![0, 1, 2, 0],
        actions: vec![0, 0, 0],
        rewards: vec![1.0, 1.0, 1.0],
        skills: vec![1, 1, 1],
        skill_draws: vec![0],
    };
    let ds = segment_low_dataset(&[traj], 3).unwrap();
    let hi = relabel_high_dataset(&ds, &GroundTruth, 0.5).unwrap();
    assert_eq!(hi.tuples[0].reward, 1.75);
    assert_eq!((hi.tuples[0].s0, hi.tuples[0].z, hi.tuples[0].s_c), (0, 1, 0));
}

#[test]
fn mle_primitive_converges_with_many_samples() {
    let mdp = LinearTabularMDP::generate(3, 4, 8, 3, 0.9, 1.0).unwrap();
    let behavior = make_behavior_policy(&mdp, 3, SkillStyle::SoftmaxDiverse, 3).unwrap();
    let trajs = sample_trajectories(&mdp, &behavior, &SamplingConfig::aligned(100_000, 1, 1), 0).unwrap();
    let ds = segment_low_dataset(&trajs, 1).unwrap();
    let prim = fit_tabular_primitive(&ds, 8, 3, 3, 0.0).unwrap();
    assert!(max_row_tv(&prim.table, behavior.skills()).unwrap() <= 0.02);
}

#[test]
fn softmax_diverse_skills_differ_pairwise() {
    let mdp = LinearTabularMDP::generate(8, 3, 6, 4, 0.9, 1.0).unwrap();
    let behavior = make_behavior_policy(&mdp, 3, SkillStyle::SoftmaxDiverse, 8).unwrap();
    let skills = behavior.skills();
    for z1 in 0..3 {
        for z2 in z1 + 1..3 {
            assert!((0..6).any(|s| skills.skill_row(s, z1) != skills.skill_row(s, z2)));
        }
    }
    assert!(make_behavior_policy(&mdp, 3, SkillStyle::ActionsAsSkills, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segmentation_conserves_steps(lengths in prop::collection::vec(1usize..30, 1..6), c in 1usize..6) {
        let trajs = toy(&lengths);
        let expected: usize = lengths.iter().map(|l| l / c).sum();
        match segment_low_dataset(&trajs, c) {
            Ok(ds) => {
                prop_assert_eq!(ds.len(), expected);
                prop_assert_eq!(ds.len() * c + ds.dropped, ds.total_steps);
                prop_assert!(ds.segments.iter().all(|s| s.actions.len() == c));
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    #[test]
    fn relabeled_rewards_stay_in_range(seed in 0u64..5_000, c in 1usize..5) {
        let mdp = LinearTabularMDP::generate(seed, 3, 5, 2, 0.9, 1.0).unwrap();
        let behavior = make_behavior_policy(&mdp, 2, SkillStyle::SoftmaxDiverse, seed).unwrap();
        let mut cfg = SamplingConfig::aligned(5, 3 * c, c);
        cfg.reward_mode = RewardMode::Bernoulli;
        let trajs = sample_trajectories(&mdp, &behavior, &cfg, seed).unwrap();
        let ds = segment_low_dataset(&trajs, c).unwrap();
        let hi = relabel_high_dataset(&ds, &GroundTruth, 0.9).unwrap();
        prop_assert!(hi.check_reward_range(mdp.r_max()).is_ok());
        for (seg, t) in ds.segments.iter().zip(&hi.tuples) {
            prop_assert_eq!(t.z, seg.skills[0]);
            prop_assert_eq!(t.s_c, seg.next_state);
        }
    }
}
