//! Latent-variable skill model trained by the evidence lower bound: a
//! sequence encoder, a state-and-latent conditioned action decoder, and a
//! state-conditioned prior. The lossy baseline for the coupling flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Segment, SkillDataset, SkillLabeler};
use crate::error::{invalid, HorlError, Result};
use crate::nn::{
    clamp_log_std, gaussian_kl, gaussian_kl_grad, gaussian_nll, gaussian_nll_grad, minibatch, Adam, Mlp, MlpTrace,
    TrainSettings,
};

pub const VAE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub c: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
}

impl VaeConfig {
    pub fn new(c: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            c,
            state_dim,
            action_dim,
            latent_dim: 2,
            hidden: 32,
            kl_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 1 || self.state_dim < 1 || self.action_dim < 1 {
            return Err(invalid("c", "skill length and state/action dimensions must be at least 1"));
        }
        if self.latent_dim < 1 || self.hidden < 1 {
            return Err(invalid("latent_dim", "latent and hidden widths must be at least 1"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(invalid("kl_weight", "must be nonnegative"));
        }
        Ok(())
    }

    fn encoder(&self) -> Mlp {
        Mlp::new(self.c * (self.state_dim + self.action_dim), self.hidden, 2 * self.latent_dim)
    }

    fn decoder(&self) -> Mlp {
        Mlp::new(self.state_dim + self.latent_dim, self.hidden, 2 * self.action_dim)
    }

    fn prior(&self) -> Mlp {
        Mlp::new(self.state_dim, self.hidden, 2 * self.latent_dim)
    }

    /// `(encoder, decoder, prior)` parameter ranges.
    fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        let e = self.encoder().num_params();
        let d = self.decoder().num_params();
        let p = self.prior().num_params();
        [0..e, e..e + d, e + d..e + d + p]
    }

    pub fn num_params(&self) -> usize {
        self.ranges()[2].end
    }
}

/// A length-`c` window of states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSample {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl VaeSample {
    pub fn from_segment(seg: &Segment<Vec<f64>, Vec<f64>>) -> Self {
        Self {
            states: seg.states.clone(),
            actions: seg.actions.clone(),
        }
    }

    /// Time-major `(s_0, a_0, s_1, a_1, ...)`.
    fn flatten(&self) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.actions)
            .flat_map(|(s, a)| s.iter().chain(a).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    config: VaeConfig,
    params: Vec<f64>,
    trained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    /// Negative ELBO with the KL term weighted.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

fn split_gaussian(out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let half = out.len() / 2;
    let mut ls = Vec::with_capacity(half);
    let mut pass = Vec::with_capacity(half);
    for &raw in &out[half..] {
        let (v, ok) = clamp_log_std(raw);
        ls.push(v);
        pass.push(ok);
    }
    (out[..half].to_vec(), ls, pass)
}

fn join_gaussian_grad(g_mean: &[f64], g_log_std: &[f64], pass: &[bool]) -> Vec<f64> {
    g_mean
        .iter()
        .copied()
        .chain(g_log_std.iter().zip(pass).map(|(g, &ok)| if ok { *g } else { 0.0 }))
        .collect()
}

impl VaeModel {
    /// Random encoder and decoder; the prior starts as the standard normal.
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = config.encoder().init(&mut rng, false);
        params.extend(config.decoder().init(&mut rng, false));
        params.extend(config.prior().init(&mut rng, true));
        Ok(Self {
            config,
            params,
            trained: false,
        })
    }

    pub fn from_params(config: VaeConfig, params: Vec<f64>, trained: bool) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(HorlError::DimensionMismatch {
                expected: config.num_params(),
                got: params.len(),
                context: "vae parameters",
            });
        }
        Ok(Self {
            config,
            params,
            trained,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Range of the prior's parameters inside `params`.
    pub fn prior_range(&self) -> std::ops::Range<usize> {
        self.config.ranges()[2].clone()
    }

    fn check_sample(&self, s: &VaeSample) -> Result<()> {
        let cfg = &self.config;
        if s.states.len() != cfg.c || s.actions.len() != cfg.c {
            return Err(HorlError::DimensionMismatch {
                expected: cfg.c,
                got: s.actions.len(),
                context: "segment length",
            });
        }
        if s.states.iter().any(|x| x.len() != cfg.state_dim) || s.actions.iter().any(|a| a.len() != cfg.action_dim) {
            return Err(HorlError::DimensionMismatch {
                expected: cfg.state_dim + cfg.action_dim,
                got: s.states[0].len() + s.actions[0].len(),
                context: "segment state/action width",
            });
        }
        Ok(())
    }

    fn require_trained(&self, what: &'static str) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(HorlError::Untrained(what))
        }
    }

    /// Posterior `(mean, log_std)` at explicit parameters.
    fn posterior_at(&self, params: &[f64], sample: &VaeSample) -> (Vec<f64>, Vec<f64>) {
        let [e, _, _] = self.config.ranges();
        let out = self.config.encoder().apply(&params[e], &sample.flatten());
        let (m, ls, _) = split_gaussian(&out);
        (m, ls)
    }

    pub fn posterior(&self, sample: &VaeSample) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_sample(sample)?;
        Ok(self.posterior_at(&self.params, sample))
    }

    /// Prior `(mean, log_std)` at `s0`.
    pub fn prior(&self, s0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [_, _, p] = self.config.ranges();
        let out = self.config.prior().apply(&self.params[p], s0);
        let (m, ls, _) = split_gaussian(&out);
        (m, ls)
    }

    /// Decoder `(mean, log_std)` for one step.
    pub fn action_distribution(&self, state: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [_, d, _] = self.config.ranges();
        let mut input = state.to_vec();
        input.extend_from_slice(z);
        let out = self.config.decoder().apply(&self.params[d], &input);
        let (m, ls, _) = split_gaussian(&out);
        (m, ls)
    }

    /// Posterior mean of a segment's latent.
    pub fn encode(&self, sample: &VaeSample) -> Result<Vec<f64>> {
        self.require_trained("vae encoder")?;
        Ok(self.posterior(sample)?.0)
    }

    /// Decoder mean actions along the given states.
    pub fn decode(&self, z: &[f64], states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.require_trained("vae decoder")?;
        if z.len() != self.config.latent_dim {
            return Err(HorlError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.len(),
                context: "latent",
            });
        }
        Ok(states.iter().map(|s| self.action_distribution(s, z).0).collect())
    }

    /// Decoder mean action at one state.
    pub fn decode_step(&self, z: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        self.require_trained("vae decoder")?;
        Ok(self.action_distribution(state, z).0)
    }
}

/// Negative ELBO with one reparameterized latent per segment; `noise[i]`
/// is the standard-normal draw for `batch[i]`.
pub fn elbo(model: &VaeModel, batch: &[VaeSample], noise: &[Vec<f64>]) -> Result<VaeLoss> {
    elbo_impl(model, model.params(), batch, noise, None)
}

pub fn elbo_at(model: &VaeModel, params: &[f64], batch: &[VaeSample], noise: &[Vec<f64>]) -> Result<VaeLoss> {
    elbo_impl(model, params, batch, noise, None)
}

pub fn elbo_grad(model: &VaeModel, batch: &[VaeSample], noise: &[Vec<f64>]) -> Result<(VaeLoss, Vec<f64>)> {
    let mut grad = vec![0.0; model.params().len()];
    let loss = elbo_impl(model, model.params(), batch, noise, Some(&mut grad))?;
    Ok((loss, grad))
}

fn elbo_impl(
    model: &VaeModel,
    params: &[f64],
    batch: &[VaeSample],
    noise: &[Vec<f64>],
    mut grad: Option<&mut Vec<f64>>,
) -> Result<VaeLoss> {
    if batch.is_empty() {
        return Err(HorlError::Empty("vae batch"));
    }
    if noise.len() != batch.len() {
        return Err(HorlError::DimensionMismatch {
            expected: batch.len(),
            got: noise.len(),
            context: "noise draws",
        });
    }
    let cfg = model.config;
    let l = cfg.latent_dim;
    let (enc, dec, pri) = (cfg.encoder(), cfg.decoder(), cfg.prior());
    let [er, dr, pr] = cfg.ranges();
    let scale = 1.0 / batch.len() as f64;
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for (sample, eps) in batch.iter().zip(noise) {
        model.check_sample(sample)?;
        if eps.len() != l {
            return Err(HorlError::DimensionMismatch {
                expected: l,
                got: eps.len(),
                context: "noise draw",
            });
        }
        let x = sample.flatten();
        let enc_trace = enc.forward(&params[er.clone()], &x);
        let (mq, lsq, pass_q) = split_gaussian(&enc_trace.output);
        let z: Vec<f64> = (0..l).map(|i| mq[i] + lsq[i].exp() * eps[i]).collect();
        let s0 = &sample.states[0];
        let pri_trace = pri.forward(&params[pr.clone()], s0);
        let (mp, lsp, pass_p) = split_gaussian(&pri_trace.output);
        kl_sum += gaussian_kl(&mq, &lsq, &mp, &lsp);

        let mut dec_steps: Vec<(Vec<f64>, MlpTrace)> = Vec::with_capacity(cfg.c);
        for (s, a) in sample.states.iter().zip(&sample.actions) {
            let mut input = s.clone();
            input.extend_from_slice(&z);
            let tr = dec.forward(&params[dr.clone()], &input);
            let (ma, lsa, _) = split_gaussian(&tr.output);
            recon_sum += gaussian_nll(a, &ma, &lsa);
            dec_steps.push((input, tr));
        }

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        let mut gz = vec![0.0; l];
        for ((input, tr), a) in dec_steps.iter().zip(&sample.actions) {
            let (ma, lsa, pass_a) = split_gaussian(&tr.output);
            let (gm, gls) = gaussian_nll_grad(a, &ma, &lsa);
            let g_out: Vec<f64> = join_gaussian_grad(&gm, &gls, &pass_a).iter().map(|v| v * scale).collect();
            let mut g_in = vec![0.0; input.len()];
            dec.backward(&params[dr.clone()], input, tr, &g_out, &mut g[dr.clone()], Some(&mut g_in));
            for (gzi, gi) in gz.iter_mut().zip(&g_in[cfg.state_dim..]) {
                *gzi += gi;
            }
        }
        let [gmq, glsq, gmp, glsp] = gaussian_kl_grad(&mq, &lsq, &mp, &lsp);
        let w = cfg.kl_weight * scale;
        let g_mq: Vec<f64> = (0..l).map(|i| gz[i] + w * gmq[i]).collect();
        let g_lsq: Vec<f64> = (0..l).map(|i| gz[i] * eps[i] * lsq[i].exp() + w * glsq[i]).collect();
        let g_enc = join_gaussian_grad(&g_mq, &g_lsq, &pass_q);
        enc.backward(&params[er.clone()], &x, &enc_trace, &g_enc, &mut g[er.clone()], None);
        if cfg.kl_weight > 0.0 {
            let g_mp: Vec<f64> = gmp.iter().map(|v| w * v).collect();
            let g_lsp: Vec<f64> = glsp.iter().map(|v| w * v).collect();
            let g_pri = join_gaussian_grad(&g_mp, &g_lsp, &pass_p);
            pri.backward(&params[pr.clone()], s0, &pri_trace, &g_pri, &mut g[pr.clone()], None);
        }
    }
    let reconstruction = recon_sum * scale;
    let kl = kl_sum * scale;
    let loss = reconstruction + cfg.kl_weight * kl;
    if !loss.is_finite() {
        return Err(HorlError::NonFinite("negative elbo".into()));
    }
    Ok(VaeLoss {
        loss,
        reconstruction,
        kl,
    })
}

pub struct VaeTraining {
    pub model: VaeModel,
    pub trace: Vec<VaeLoss>,
}

pub fn vae_samples(dataset: &SkillDataset<Vec<f64>, Vec<f64>>, config: &VaeConfig) -> Result<Vec<VaeSample>> {
    if dataset.c != config.c {
        return Err(HorlError::DimensionMismatch {
            expected: config.c,
            got: dataset.c,
            context: "segment length",
        });
    }
    Ok(dataset.segments.iter().map(VaeSample::from_segment).collect())
}

pub fn train_vae(
    dataset: &SkillDataset<Vec<f64>, Vec<f64>>,
    config: &VaeConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<VaeTraining> {
    let samples = vae_samples(dataset, config)?;
    train_vae_on(&samples, config, settings, seed)
}

pub fn train_vae_on(
    samples: &[VaeSample],
    config: &VaeConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<VaeTraining> {
    settings.validate()?;
    if samples.is_empty() {
        return Err(HorlError::Empty("vae training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VaeModel::new(*config, rng.random())?;
    for s in samples {
        model.check_sample(s)?;
    }
    let mut opt = Adam::new(model.params().len(), settings.lr);
    let mut trace = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let batch: Vec<VaeSample> = minibatch(&mut rng, samples.len(), settings.batch_size)
            .into_iter()
            .map(|i| samples[i].clone())
            .collect();
        let noise: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let (loss, grad) = elbo_grad(&model, &batch, &noise)?;
        trace.push(loss);
        opt.step(model.params_mut(), &grad);
    }
    model.trained = true;
    Ok(VaeTraining { model, trace })
}

/// Mean over segments of the summed L1 error between each action and its
/// decoded reconstruction from the posterior mean.
pub fn reconstruction_l1(model: &VaeModel, samples: &[VaeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(HorlError::Empty("reconstruction set"));
    }
    let mut total = 0.0;
    for s in samples {
        let z = model.encode(s)?;
        let decoded = model.decode(&z, &s.states)?;
        total += decoded
            .iter()
            .zip(&s.actions)
            .flat_map(|(d, a)| d.iter().zip(a).map(|(x, y)| (x - y).abs()))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeDocument {
    pub version: u32,
    pub model: VaeModel,
}

impl VaeDocument {
    pub fn new(model: VaeModel) -> Self {
        Self {
            version: VAE_SCHEMA_VERSION,
            model,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.version != VAE_SCHEMA_VERSION {
            return Err(HorlError::Serialization(format!("unsupported vae schema version {}", doc.version)));
        }
        VaeModel::from_params(doc.model.config, doc.model.params.clone(), doc.model.trained)?;
        Ok(doc)
    }
}

/// Labels segments with their posterior-mean latent.
pub struct VaeEncoder<'a> {
    pub model: &'a VaeModel,
}

impl SkillLabeler<Vec<f64>, Vec<f64>> for VaeEncoder<'_> {
    type Skill = Vec<f64>;

    fn label(&self, segment: &Segment<Vec<f64>, Vec<f64>>) -> Result<Vec<f64>> {
        self.model.encode(&VaeSample::from_segment(segment))
    }
}
