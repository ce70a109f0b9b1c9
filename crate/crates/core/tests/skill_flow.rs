use horl_core::data::*;
use horl_core::flow::*;
use horl_core::mdp::PointMassEnv;
use horl_core::nn::{check_gradient, TrainSettings, LN_2PI};
use horl_core::HorlError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn perturbed_flow(config: FlowConfig, seed: u64, scale: f64) -> CouplingFlow {
    let mut flow = CouplingFlow::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for p in flow.params_mut() {
        *p += scale * rng.random_range(-1.0..1.0);
    }
    CouplingFlow::from_params(config, flow.params().to_vec(), true).unwrap()
}

fn perturbed_prior(dim: usize, state_dim: usize, seed: u64) -> SkillPrior {
    let mut prior = SkillPrior::new(dim, state_dim, 5, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    for p in prior.params_mut() {
        *p += 0.3 * rng.random_range(-1.0..1.0);
    }
    prior
}

fn vector(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-spread..spread)).collect()
}

fn determinant(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    det
}

#[test]
fn round_trips_on_ten_thousand_random_pairs() {
    let mut config = FlowConfig::new(2, 2, 2);
    config.blocks = 3;
    config.hidden = 8;
    let flow = perturbed_flow(config, 1, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let s = vector(&mut rng, 2, 1.0);
        let z = vector(&mut rng, 4, 3.0);
        let a = flow.forward(&z, &s).unwrap();
        let (back, _) = flow.inverse(&a, &s).unwrap();
        let a2 = vector(&mut rng, 4, 3.0);
        let (z2, _) = flow.inverse(&a2, &s).unwrap();
        let fwd = flow.forward(&z2, &s).unwrap();
        for (x, y) in back.iter().zip(&z).chain(fwd.iter().zip(&a2)) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn log_determinant_matches_numerical_jacobian() {
    for seed in 0..5 {
        let mut config = FlowConfig::new(2, 2, 1);
        config.blocks = 1 + seed as usize % 3;
        config.hidden = 6;
        let flow = perturbed_flow(config, seed, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let s = vector(&mut rng, 1, 1.0);
        let a = vector(&mut rng, 4, 1.0);
        let (_, log_det) = flow.inverse(&a, &s).unwrap();
        let h = 1e-6;
        let mut jac = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            let mut up = a.clone();
            up[j] += h;
            let mut down = a.clone();
            down[j] -= h;
            let zu = flow.inverse(&up, &s).unwrap().0;
            let zd = flow.inverse(&down, &s).unwrap().0;
            for i in 0..4 {
                jac[i][j] = (zu[i] - zd[i]) / (2.0 * h);
            }
        }
        let numeric = determinant(jac).abs().ln();
        assert!((numeric - log_det).abs() <= 1e-4 * log_det.abs().max(1.0), "{numeric} vs {log_det}");
    }
}

#[test]
fn implied_density_integrates_to_one() {
    let mut config = FlowConfig::new(1, 2, 1);
    config.blocks = 2;
    config.hidden = 4;
    config.kl_weight = 0.0;
    let flow = perturbed_flow(config, 3, 0.3);
    let s = [0.4];
    let (lo, hi, cells) = (-10.0, 10.0, 500);
    let h = (hi - lo) / cells as f64;
    let mut mass = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let a = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            let (z, log_det) = flow.inverse(&a, &s).unwrap();
            let log_p = -0.5 * (z[0] * z[0] + z[1] * z[1]) - LN_2PI + log_det;
            mass += log_p.exp() * h * h;
        }
    }
    assert!((mass - 1.0).abs() <= 1e-2, "{mass}");
}

#[test]
fn objective_gradients_on_twenty_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..20u64 {
        let c = rng.random_range(1..4);
        let m = rng.random_range(1..3);
        let sd = rng.random_range(1..3);
        let mut config = FlowConfig::new(c, m, sd);
        config.blocks = rng.random_range(1..4);
        config.hidden = rng.random_range(2..6);
        config.kl_weight = rng.random_range(0.0..1.0);
        let flow = perturbed_flow(config, case, 0.3);
        let prior = perturbed_prior(config.flow_dim(), sd, case);
        let batch: Vec<FlowSample> = (0..3)
            .map(|_| FlowSample { actions: vector(&mut rng, c * m, 1.0), s0: vector(&mut rng, sd, 1.0) })
            .collect();
        let (_, gf, gp) = flow_objective_grad(&flow, &prior, &batch).unwrap();
        let fc = check_gradient(
            |p| flow_objective_at(&flow, p, &prior, prior.params(), &batch).unwrap().loss,
            flow.params(),
            &gf,
            1e-5,
            1e-6,
        );
        let pc = check_gradient(
            |p| flow_objective_at(&flow, flow.params(), &prior, p, &batch).unwrap().loss,
            prior.params(),
            &gp,
            1e-5,
            1e-6,
        );
        assert!(fc.passes(1e-4), "case {case} flow {fc:?}");
        assert!(pc.passes(1e-4), "case {case} prior {pc:?}");
    }
}

#[test]
fn zero_kl_weight_ignores_the_prior() {
    let mut config = FlowConfig::new(2, 1, 1);
    config.kl_weight = 0.0;
    let flow = perturbed_flow(config, 5, 0.3);
    let batch = vec![FlowSample { actions: vec![0.3, -0.2], s0: vec![0.1] }];
    let a = flow_objective(&flow, &perturbed_prior(2, 1, 1), &batch).unwrap();
    let b = flow_objective(&flow, &perturbed_prior(2, 1, 2), &batch).unwrap();
    assert_eq!(a.loss, b.loss);
}

fn point_mass_segments(n: usize, c: usize, seed: u64) -> SkillDataset<Vec<f64>, Vec<f64>> {
    let env = PointMassEnv::bimodal();
    let trajs = sample_point_mass(&env, &CorridorBehavior::default(), n, 4 * c, seed).unwrap();
    segment_low_dataset(&trajs, c).unwrap()
}

#[test]
fn singleton_training_halves_the_likelihood_loss() {
    let mut ds = point_mass_segments(1, 2, 0);
    ds.segments.truncate(1);
    let config = FlowConfig::new(2, 2, 2);
    let settings = TrainSettings { steps: 300, batch_size: 8, lr: 1e-2 };
    let run = train_flow(&ds, &config, &settings, 0).unwrap();
    let first = run.trace[0].nll;
    let last = run.trace.last().unwrap().nll;
    assert!(last <= first - 0.5 * first.abs(), "{first} -> {last}");
}

#[test]
fn training_is_deterministic_and_stays_invertible() {
    let ds = point_mass_segments(20, 3, 1);
    let config = FlowConfig::new(3, 2, 2);
    let settings = TrainSettings { steps: 60, batch_size: 16, lr: 3e-3 };
    let a = train_flow(&ds, &config, &settings, 9).unwrap();
    let b = train_flow(&ds, &config, &settings, 9).unwrap();
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.prior, b.prior);
    let encoder = FlowEncoder { flow: &a.flow };
    for seg in &ds.segments {
        let z = encoder.label(seg).unwrap();
        let back = a.flow.decode(&z, seg.start()).unwrap();
        let worst = back.iter().zip(seg.actions.concat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6);
    }
}

#[test]
fn mismatched_segments_are_rejected() {
    let ds = point_mass_segments(3, 2, 2);
    let settings = TrainSettings { steps: 1, batch_size: 4, lr: 1e-3 };
    assert!(matches!(
        train_flow(&ds, &FlowConfig::new(3, 2, 2), &settings, 0),
        Err(HorlError::DimensionMismatch { .. })
    ));
    assert!(train_flow(&ds, &FlowConfig::new(2, 3, 2), &settings, 0).is_err());
}

#[test]
fn untrained_flow_cannot_label_segments() {
    let ds = point_mass_segments(2, 2, 3);
    let flow = CouplingFlow::new(FlowConfig::new(2, 2, 2), 0).unwrap();
    let encoder = FlowEncoder { flow: &flow };
    assert!(matches!(relabel_high_dataset(&ds, &encoder, 0.9), Err(HorlError::Untrained(_))));
}

#[test]
fn identity_flow_decodes_clipped_prior_draws() {
    let config = FlowConfig::new(2, 2, 2);
    let flow = CouplingFlow::from_params(config, CouplingFlow::new(config, 0).unwrap().params().to_vec(), true).unwrap();
    let prior = SkillPrior::new(4, 2, 3, 0);
    let decoder = FlowSkillDecoder { flow: &flow, prior: &prior, action_bound: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut reference = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let actions = decoder.sample(&[0.2, 0.3], &mut rng).unwrap();
        for a in actions.concat() {
            let e: f64 = StandardNormal.sample(&mut reference);
            assert_eq!(a, e.clamp(-0.5, 0.5));
        }
    }
}

#[test]
fn parameter_document_round_trips() {
    let mut config = FlowConfig::new(2, 2, 2);
    config.blocks = 2;
    let flow = perturbed_flow(config, 6, 0.2);
    let prior = perturbed_prior(4, 2, 6);
    let text = serde_json::to_string(&FlowDocument::new(flow.clone(), prior.clone())).unwrap();
    let doc = FlowDocument::from_json(&text).unwrap();
    assert_eq!(doc.flow, flow);
    assert_eq!(doc.prior, prior);
    let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
    assert!(FlowDocument::from_json(&bumped).is_err());
}
