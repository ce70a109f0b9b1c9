use horl_core::data::{HighLevelDataset, HighTuple};
use horl_core::iql::*;
use horl_core::nn::check_gradient;
use horl_core::HorlError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tuple(s0: usize, z: usize, reward: f64, s_c: usize) -> HighTuple<usize, usize> {
    HighTuple { s0, z, reward, s_c, weight: 1.0 }
}

fn bandit() -> HighLevelDataset<usize, usize> {
    let rewards = [0.2, 0.5, 1.0];
    let tuples = (0..30).map(|i| tuple(0, i % 3, rewards[i % 3], 0)).collect();
    HighLevelDataset { c: 1, gamma: 0.01, tuples }
}

fn fast_config() -> IqlConfig {
    IqlConfig {
        value_lr: 1e-2,
        policy_lr: 1e-2,
        target_mix: 0.05,
        steps: 3000,
        batch_size: 30,
        ..IqlConfig::default()
    }
}

#[test]
fn bandit_policy_concentrates_on_the_best_skill() {
    let config = IqlConfig { temperature: 10.0, ..fast_config() };
    let run = train_iql(&bandit(), TabularArch { num_states: 1, num_skills: 3 }, &config, 0).unwrap();
    let table = run.params.policy_table().unwrap();
    assert!(table.prob(0, 2) >= 0.9, "{:?}", table);
}

#[test]
fn zero_temperature_recovers_behavior_cloning() {
    let counts = [5, 3, 2];
    let mut tuples = Vec::new();
    for (z, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            tuples.push(tuple(0, z, z as f64 * 0.3, 0));
        }
    }
    let data = HighLevelDataset { c: 2, gamma: 0.9, tuples };
    let config = IqlConfig { temperature: 0.0, expectile: 0.5, batch_size: 10, ..fast_config() };
    let run = train_iql(&data, TabularArch { num_states: 1, num_skills: 3 }, &config, 1).unwrap();
    let table = run.params.policy_table().unwrap();
    for (z, &n) in counts.iter().enumerate() {
        assert!((table.prob(0, z) - n as f64 / 10.0).abs() <= 2e-2, "{:?}", table);
    }
}

#[test]
fn q_loss_minimum_is_the_target_variance() {
    let data = vec![tuple(0, 0, 0.1, 1), tuple(0, 0, 0.7, 1), tuple(0, 0, 0.4, 0), tuple(0, 0, 1.0, 1)];
    let arch = TabularArch { num_states: 2, num_skills: 1 };
    let mut params = IqlParams::new(arch, 0);
    params.v = vec![0.2, 0.5];
    let gamma_eff = 0.8;
    let targets: Vec<f64> = data.iter().map(|t| t.reward + gamma_eff * params.v[t.s_c]).collect();
    let mean = targets.iter().sum::<f64>() / 4.0;
    let variance = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 4.0;
    let config = IqlConfig::default();
    let loss_at = |q0: f64| {
        iql_losses_at(&params, &[q0, 0.0], &params.v, &params.policy, &data, gamma_eff, &config).unwrap().q
    };
    assert!((loss_at(mean) - variance).abs() <= 1e-12);
    assert!(loss_at(mean + 0.01) > loss_at(mean));
    assert!(loss_at(mean - 0.01) > loss_at(mean));
}

#[test]
fn zero_advantage_gives_the_cloning_loss() {
    let data = vec![tuple(0, 1, 0.3, 1), tuple(1, 0, 0.2, 0), tuple(1, 2, 0.5, 1)];
    let arch = TabularArch { num_states: 2, num_skills: 3 };
    let mut params = IqlParams::new(arch, 0);
    params.policy = vec![0.1, -0.4, 0.9, 0.3, 0.0, -0.2];
    params.q = vec![0.5; 6];
    params.v = vec![0.5; 2];
    let losses = iql_gradients(&params, &data, 0.9, &IqlConfig::default()).unwrap().0;
    let bc = -data.iter().map(|t| arch.log_pi(&params.policy, &t.s0, &t.z)).sum::<f64>() / 3.0;
    assert!((losses.policy - bc).abs() <= 1e-12);
    assert_eq!(losses.clip_rate, 0.0);
}

#[test]
fn tabular_gradients_on_twenty_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20u64 {
        let arch = TabularArch { num_states: rng.random_range(1..5), num_skills: rng.random_range(1..4) };
        let mut params = IqlParams::new(arch, case);
        for p in params.q.iter_mut().chain(&mut params.q_target).chain(&mut params.v).chain(&mut params.policy) {
            *p = rng.random_range(-1.0..1.0);
        }
        let batch: Vec<_> = (0..5)
            .map(|_| HighTuple {
                s0: rng.random_range(0..arch.num_states),
                z: rng.random_range(0..arch.num_skills),
                reward: rng.random_range(0.0..1.0),
                s_c: rng.random_range(0..arch.num_states),
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let config = IqlConfig { expectile: rng.random_range(0.1..0.9), temperature: rng.random_range(0.0..3.0), ..IqlConfig::default() };
        let gamma = rng.random_range(0.0..0.99);
        audit(&params, &batch, gamma, &config, case);
    }
}

#[test]
fn continuous_gradients_on_twenty_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20u64 {
        let arch = ContinuousArch { state_dim: rng.random_range(1..4), latent_dim: rng.random_range(1..4), hidden: rng.random_range(2..6) };
        let mut params = IqlParams::new(arch, case);
        for p in params.q.iter_mut().chain(&mut params.q_target).chain(&mut params.v).chain(&mut params.policy) {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        let mut vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let batch: Vec<_> = (0..4)
            .map(|_| HighTuple {
                s0: vec(arch.state_dim),
                z: vec(arch.latent_dim),
                reward: 0.5,
                s_c: vec(arch.state_dim),
                weight: 1.0,
            })
            .collect();
        audit(&params, &batch, 0.81, &IqlConfig::default(), case);
    }
}

fn audit<A: IqlArch>(params: &IqlParams<A>, batch: &[HighTuple<A::State, A::Skill>], gamma: f64, config: &IqlConfig, case: u64) {
    let (_, grads) = iql_gradients(params, batch, gamma, config).unwrap();
    let at = |q: &[f64], v: &[f64], pi: &[f64]| iql_losses_at(params, q, v, pi, batch, gamma, config).unwrap();
    let q = check_gradient(|p| at(p, &params.v, &params.policy).q, &params.q, &grads.q, 1e-6, 1e-7);
    let v = check_gradient(|p| at(&params.q, p, &params.policy).value, &params.v, &grads.v, 1e-6, 1e-7);
    let pi = check_gradient(|p| at(&params.q, &params.v, p).policy, &params.policy, &grads.policy, 1e-6, 1e-7);
    for (name, check) in [("q", q), ("v", v), ("policy", pi)] {
        assert!(check.passes(1e-4), "case {case} {name}: {check:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let config = IqlConfig { steps: 50, batch_size: 8, ..IqlConfig::default() };
    let arch = TabularArch { num_states: 1, num_skills: 3 };
    let a = train_iql(&bandit(), arch, &config, 7).unwrap();
    let b = train_iql(&bandit(), arch, &config, 7).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn non_finite_rewards_name_the_tuple() {
    let data = vec![tuple(0, 0, 0.1, 0), tuple(0, 1, f64::NAN, 0)];
    let params = IqlParams::new(TabularArch { num_states: 1, num_skills: 2 }, 0);
    match iql_gradients(&params, &data, 0.9, &IqlConfig::default()) {
        Err(HorlError::NonFinite(msg)) => assert!(msg.contains('1'), "{msg}"),
        other => panic!("{:?}", other.map(|r| r.0)),
    }
}

#[test]
fn out_of_range_skills_are_rejected() {
    let mut data = bandit();
    data.tuples[3].z = 9;
    assert!(train_iql(&data, TabularArch { num_states: 1, num_skills: 3 }, &IqlConfig::default(), 0).is_err());
}

#[test]
fn document_round_trips() {
    let doc = IqlDocument { version: IQL_SCHEMA_VERSION, config: IqlConfig::default(), params: IqlParams::new(ContinuousArch::new(2, 2), 3) };
    let text = serde_json::to_string(&doc).unwrap();
    let back: IqlDocument<ContinuousArch> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, doc);
}

proptest! {
    #[test]
    fn expectile_reflection(u in -10.0f64..10.0, lambda in 0.01f64..0.99) {
        let a = expectile_loss(u, lambda).unwrap();
        let b = expectile_loss(-u, 1.0 - lambda).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn expectile_is_nonnegative_and_half_is_half_square(u in -10.0f64..10.0, lambda in 0.01f64..0.99) {
        prop_assert!(expectile_loss(u, lambda).unwrap() >= 0.0);
        prop_assert!((expectile_loss(u, 0.5).unwrap() - 0.5 * u * u).abs() <= 1e-12);
    }
}
