use horl_core::data::*;
use horl_core::mdp::PointMassEnv;
use horl_core::nn::{check_gradient, gaussian_kl, gaussian_nll, TrainSettings};
use horl_core::vae::*;
use horl_core::HorlError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn perturbed_model(config: VaeConfig, seed: u64, scale: f64) -> VaeModel {
    let mut model = VaeModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for p in model.params_mut() {
        *p += scale * rng.random_range(-1.0..1.0);
    }
    VaeModel::from_params(config, model.params().to_vec(), true).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, config: &VaeConfig) -> VaeSample {
    let vec = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    VaeSample {
        states: (0..config.c).map(|_| vec(rng, config.state_dim)).collect(),
        actions: (0..config.c).map(|_| vec(rng, config.action_dim)).collect(),
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn point_mass_segments(n: usize, c: usize, seed: u64) -> SkillDataset<Vec<f64>, Vec<f64>> {
    let env = PointMassEnv::bimodal();
    let trajs = sample_point_mass(&env, &CorridorBehavior::default(), n, 4 * c, seed).unwrap();
    segment_low_dataset(&trajs, c).unwrap()
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut config = VaeConfig::new(2, 2, 1);
    config.latent_dim = 3;
    config.hidden = 6;
    let mut model = perturbed_model(config, 1, 0.4);
    let range = model.prior_range();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in &mut model.params_mut()[range] {
        *p += rng.random_range(-0.5..0.5);
    }
    let sample = random_sample(&mut rng, &config);
    let (mq, lsq) = model.posterior(&sample).unwrap();
    let (mp, lsp) = model.prior(&sample.states[0]);
    let exact = gaussian_kl(&mq, &lsq, &mp, &lsp);
    let n = 100_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let e = normal(&mut rng, 3);
        let z: Vec<f64> = (0..3).map(|i| mq[i] + lsq[i].exp() * e[i]).collect();
        let x = gaussian_nll(&z, &mp, &lsp) - gaussian_nll(&z, &mq, &lsq);
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn negative_elbo_bounds_the_marginal_likelihood() {
    let mut config = VaeConfig::new(1, 1, 1);
    config.latent_dim = 1;
    config.hidden = 5;
    for seed in 0..5 {
        let model = perturbed_model(config, seed, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = random_sample(&mut rng, &config);
        let (s, a) = (&sample.states[0], &sample.actions[0]);
        let (mq, lsq) = model.posterior(&sample).unwrap();
        let (mp, lsp) = model.prior(s);
        let (lo, hi, cells) = (-12.0, 12.0, 20_000);
        let h = (hi - lo) / cells as f64;
        let mut marginal = 0.0;
        let mut expected_recon = 0.0;
        for i in 0..cells {
            let z = [lo + (i as f64 + 0.5) * h];
            let (ma, lsa) = model.action_distribution(s, &z);
            let recon = gaussian_nll(a, &ma, &lsa);
            marginal += (-gaussian_nll(&z, &mp, &lsp) - recon).exp() * h;
            expected_recon += (-gaussian_nll(&z, &mq, &lsq)).exp() * recon * h;
        }
        let nll = -marginal.ln();
        let neg_elbo = expected_recon + gaussian_kl(&mq, &lsq, &mp, &lsp);
        assert!(neg_elbo >= nll - 1e-9, "seed {seed}: {neg_elbo} < {nll}");
        let e = [0.7];
        let z = [mq[0] + lsq[0].exp() * e[0]];
        let (ma, lsa) = model.action_distribution(s, &z);
        let loss = elbo(&model, std::slice::from_ref(&sample), &[e.to_vec()]).unwrap();
        assert!((loss.reconstruction - gaussian_nll(a, &ma, &lsa)).abs() <= 1e-12);
    }
}

#[test]
fn elbo_gradients_on_twenty_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20u64 {
        let mut config = VaeConfig::new(rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..3));
        config.latent_dim = rng.random_range(1..4);
        config.hidden = rng.random_range(2..6);
        config.kl_weight = rng.random_range(0.0..2.0);
        let model = perturbed_model(config, case, 0.3);
        let batch: Vec<VaeSample> = (0..3).map(|_| random_sample(&mut rng, &config)).collect();
        let noise: Vec<Vec<f64>> = batch.iter().map(|_| normal(&mut rng, config.latent_dim)).collect();
        let (_, grad) = elbo_grad(&model, &batch, &noise).unwrap();
        let check = check_gradient(
            |p| elbo_at(&model, p, &batch, &noise).unwrap().loss,
            model.params(),
            &grad,
            1e-5,
            1e-6,
        );
        assert!(check.passes(1e-4), "case {case}: {check:?}");
    }
}

#[test]
fn singleton_training_halves_reconstruction_error() {
    let mut ds = point_mass_segments(1, 2, 0);
    ds.segments.truncate(1);
    let config = VaeConfig::new(2, 2, 2);
    let samples = vae_samples(&ds, &config).unwrap();
    let settings = TrainSettings { steps: 1500, batch_size: 4, lr: 1e-2 };
    let run = train_vae(&ds, &config, &settings, 0).unwrap();
    let init = VaeModel::from_params(config, VaeModel::new(config, 0).unwrap().params().to_vec(), true).unwrap();
    let before = reconstruction_l1(&init, &samples).unwrap();
    let after = reconstruction_l1(&run.model, &samples).unwrap();
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn full_width_latent_reduces_reconstruction_on_average() {
    let c = 2;
    let mut config = VaeConfig::new(c, 2, 2);
    config.latent_dim = c * 2;
    let settings = TrainSettings { steps: 300, batch_size: 32, lr: 3e-3 };
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..3 {
        let ds = point_mass_segments(30, c, seed);
        let samples = vae_samples(&ds, &config).unwrap();
        let init = VaeModel::from_params(config, VaeModel::new(config, seed).unwrap().params().to_vec(), true).unwrap();
        before += reconstruction_l1(&init, &samples).unwrap();
        after += reconstruction_l1(&train_vae(&ds, &config, &settings, seed).unwrap().model, &samples).unwrap();
    }
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let ds = point_mass_segments(10, 3, 1);
    let config = VaeConfig::new(3, 2, 2);
    let settings = TrainSettings { steps: 40, batch_size: 8, lr: 1e-3 };
    let a = train_vae(&ds, &config, &settings, 5).unwrap();
    let b = train_vae(&ds, &config, &settings, 5).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn untrained_model_cannot_label_segments() {
    let ds = point_mass_segments(2, 2, 3);
    let model = VaeModel::new(VaeConfig::new(2, 2, 2), 0).unwrap();
    let encoder = VaeEncoder { model: &model };
    assert!(matches!(relabel_high_dataset(&ds, &encoder, 0.9), Err(HorlError::Untrained(_))));
}

#[test]
fn invalid_configuration_is_rejected() {
    let mut config = VaeConfig::new(2, 2, 2);
    config.kl_weight = -1.0;
    assert!(VaeModel::new(config, 0).is_err());
    config.kl_weight = 1.0;
    config.latent_dim = 0;
    assert!(VaeModel::new(config, 0).is_err());
}

#[test]
fn parameter_document_round_trips() {
    let model = perturbed_model(VaeConfig::new(2, 2, 2), 4, 0.2);
    let text = serde_json::to_string(&VaeDocument::new(model.clone())).unwrap();
    assert_eq!(VaeDocument::from_json(&text).unwrap().model, model);
    assert!(VaeDocument::from_json(&text.replacen("\"version\":1", "\"version\":2", 1)).is_err());
}
