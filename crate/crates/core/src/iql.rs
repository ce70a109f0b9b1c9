//! High-level offline policy learning on `(s0, z, R, s_c)` tuples:
//! expectile-regressed state values, squared-TD skill values, and
//! advantage-weighted likelihood for the skill policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{softmax_in_place, HighLevelDataset, HighTuple};
use crate::error::{check_index, invalid, HorlError, Result};
use crate::mdp::{PolicyKind, PolicyTable};
use crate::nn::{clamp_log_std, gaussian_nll, gaussian_nll_grad, minibatch, Adam, Mlp};

pub const IQL_SCHEMA_VERSION: u32 = 1;

/// `|λ − 1[u < 0]| · u²`.
pub fn expectile_loss(u: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid("lambda", "expectile must lie in (0, 1)"));
    }
    Ok(expectile_weight(u, lambda) * u * u)
}

fn expectile_weight(u: f64, lambda: f64) -> f64 {
    if u < 0.0 {
        1.0 - lambda
    } else {
        lambda
    }
}

/// Which discount multiplies `V(s_c)` in the skill-value target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiscountMode {
    /// `γ^c`, matching the hyper-MDP.
    #[default]
    Effective,
    /// Plain per-step `γ`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlConfig {
    pub expectile: f64,
    pub temperature: f64,
    pub target_mix: f64,
    pub weight_clip: f64,
    pub discount: DiscountMode,
    pub value_lr: f64,
    pub policy_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            expectile: 0.7,
            temperature: 3.0,
            target_mix: 0.005,
            weight_clip: 100.0,
            discount: DiscountMode::Effective,
            value_lr: 3e-4,
            policy_lr: 3e-4,
            steps: 1000,
            batch_size: 64,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(invalid("expectile", "must lie in (0, 1)"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be finite and nonnegative"));
        }
        if !(self.target_mix > 0.0 && self.target_mix <= 1.0) {
            return Err(invalid("target_mix", "must lie in (0, 1]"));
        }
        if !(self.weight_clip > 0.0) {
            return Err(invalid("weight_clip", "must be positive"));
        }
        if !(self.value_lr > 0.0 && self.policy_lr > 0.0) {
            return Err(invalid("value_lr", "learning rates must be positive"));
        }
        if self.steps < 1 || self.batch_size < 1 {
            return Err(invalid("steps", "steps and batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn gamma_eff(&self, gamma: f64, c: usize) -> f64 {
        match self.discount {
            DiscountMode::Effective => gamma.powi(c as i32),
            DiscountMode::Literal => gamma,
        }
    }
}

/// Function classes for `Q(s, z)`, `V(s)` and `π(z | s)` over flat
/// parameter vectors.
pub trait IqlArch {
    type State;
    type Skill;

    fn q_len(&self) -> usize;
    fn v_len(&self) -> usize;
    fn policy_len(&self) -> usize;
    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>, Vec<f64>);
    fn check(&self, s: &Self::State, z: &Self::Skill) -> Result<()>;

    fn q(&self, p: &[f64], s: &Self::State, z: &Self::Skill) -> f64;
    /// Accumulate `scale · ∂Q/∂p`.
    fn q_grad(&self, p: &[f64], s: &Self::State, z: &Self::Skill, scale: f64, grad: &mut [f64]);
    fn v(&self, p: &[f64], s: &Self::State) -> f64;
    fn v_grad(&self, p: &[f64], s: &Self::State, scale: f64, grad: &mut [f64]);
    fn log_pi(&self, p: &[f64], s: &Self::State, z: &Self::Skill) -> f64;
    fn log_pi_grad(&self, p: &[f64], s: &Self::State, z: &Self::Skill, scale: f64, grad: &mut [f64]);
}

/// Free tables over finite states and skills with a softmax policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularArch {
    pub num_states: usize,
    pub num_skills: usize,
}

impl TabularArch {
    fn logits_row<'a>(&self, p: &'a [f64], s: usize) -> &'a [f64] {
        &p[s * self.num_skills..(s + 1) * self.num_skills]
    }

    fn probs(&self, p: &[f64], s: usize) -> Vec<f64> {
        let mut row = self.logits_row(p, s).to_vec();
        softmax_in_place(&mut row);
        row
    }
}

impl IqlArch for TabularArch {
    type State = usize;
    type Skill = usize;

    fn q_len(&self) -> usize {
        self.num_states * self.num_skills
    }

    fn v_len(&self) -> usize {
        self.num_states
    }

    fn policy_len(&self) -> usize {
        self.num_states * self.num_skills
    }

    fn init<R: Rng + ?Sized>(&self, _rng: &mut R) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.0; self.q_len()], vec![0.0; self.v_len()], vec![0.0; self.policy_len()])
    }

    fn check(&self, s: &usize, z: &usize) -> Result<()> {
        check_index("tuple state", *s, self.num_states)?;
        check_index("tuple skill", *z, self.num_skills)
    }

    fn q(&self, p: &[f64], s: &usize, z: &usize) -> f64 {
        p[s * self.num_skills + z]
    }

    fn q_grad(&self, _p: &[f64], s: &usize, z: &usize, scale: f64, grad: &mut [f64]) {
        grad[s * self.num_skills + z] += scale;
    }

    fn v(&self, p: &[f64], s: &usize) -> f64 {
        p[*s]
    }

    fn v_grad(&self, _p: &[f64], s: &usize, scale: f64, grad: &mut [f64]) {
        grad[*s] += scale;
    }

    fn log_pi(&self, p: &[f64], s: &usize, z: &usize) -> f64 {
        self.probs(p, *s)[*z].ln()
    }

    fn log_pi_grad(&self, p: &[f64], s: &usize, z: &usize, scale: f64, grad: &mut [f64]) {
        let probs = self.probs(p, *s);
        for (j, pj) in probs.iter().enumerate() {
            let indicator = if j == *z { 1.0 } else { 0.0 };
            grad[s * self.num_skills + j] += scale * (indicator - pj);
        }
    }
}

/// One-hidden-layer networks over continuous states and latents with a
/// diagonal Gaussian policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuousArch {
    pub state_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl ContinuousArch {
    pub fn new(state_dim: usize, latent_dim: usize) -> Self {
        Self {
            state_dim,
            latent_dim,
            hidden: 32,
        }
    }

    fn q_net(&self) -> Mlp {
        Mlp::new(self.state_dim + self.latent_dim, self.hidden, 1)
    }

    fn v_net(&self) -> Mlp {
        Mlp::new(self.state_dim, self.hidden, 1)
    }

    fn pi_net(&self) -> Mlp {
        Mlp::new(self.state_dim, self.hidden, 2 * self.latent_dim)
    }

    fn joint(s: &[f64], z: &[f64]) -> Vec<f64> {
        s.iter().chain(z).copied().collect()
    }

    /// Policy `(mean, log_std, clamp_passes_gradient)`.
    fn policy_out(&self, p: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let out = self.pi_net().apply(p, s);
        let l = self.latent_dim;
        let mut ls = Vec::with_capacity(l);
        let mut pass = Vec::with_capacity(l);
        for &raw in &out[l..] {
            let (v, ok) = clamp_log_std(raw);
            ls.push(v);
            pass.push(ok);
        }
        (out[..l].to_vec(), ls, pass)
    }

    /// Mean of the Gaussian policy at `s`.
    pub fn policy_mean(&self, p: &[f64], s: &[f64]) -> Vec<f64> {
        self.policy_out(p, s).0
    }
}

impl IqlArch for ContinuousArch {
    type State = Vec<f64>;
    type Skill = Vec<f64>;

    fn q_len(&self) -> usize {
        self.q_net().num_params()
    }

    fn v_len(&self) -> usize {
        self.v_net().num_params()
    }

    fn policy_len(&self) -> usize {
        self.pi_net().num_params()
    }

    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.q_net().init(rng, false),
            self.v_net().init(rng, false),
            self.pi_net().init(rng, true),
        )
    }

    fn check(&self, s: &Vec<f64>, z: &Vec<f64>) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(HorlError::DimensionMismatch {
                expected: self.state_dim,
                got: s.len(),
                context: "high-level state",
            });
        }
        if z.len() != self.latent_dim {
            return Err(HorlError::DimensionMismatch {
                expected: self.latent_dim,
                got: z.len(),
                context: "latent skill",
            });
        }
        Ok(())
    }

    fn q(&self, p: &[f64], s: &Vec<f64>, z: &Vec<f64>) -> f64 {
        self.q_net().apply(p, &Self::joint(s, z))[0]
    }

    fn q_grad(&self, p: &[f64], s: &Vec<f64>, z: &Vec<f64>, scale: f64, grad: &mut [f64]) {
        let x = Self::joint(s, z);
        let net = self.q_net();
        let tr = net.forward(p, &x);
        net.backward(p, &x, &tr, &[scale], grad, None);
    }

    fn v(&self, p: &[f64], s: &Vec<f64>) -> f64 {
        self.v_net().apply(p, s)[0]
    }

    fn v_grad(&self, p: &[f64], s: &Vec<f64>, scale: f64, grad: &mut [f64]) {
        let net = self.v_net();
        let tr = net.forward(p, s);
        net.backward(p, s, &tr, &[scale], grad, None);
    }

    fn log_pi(&self, p: &[f64], s: &Vec<f64>, z: &Vec<f64>) -> f64 {
        let (m, ls, _) = self.policy_out(p, s);
        -gaussian_nll(z, &m, &ls)
    }

    fn log_pi_grad(&self, p: &[f64], s: &Vec<f64>, z: &Vec<f64>, scale: f64, grad: &mut [f64]) {
        let net = self.pi_net();
        let tr = net.forward(p, s);
        let l = self.latent_dim;
        let (m, ls, pass) = self.policy_out(p, s);
        let (gm, gls) = gaussian_nll_grad(z, &m, &ls);
        let mut g_out = vec![0.0; 2 * l];
        for i in 0..l {
            g_out[i] = -scale * gm[i];
            g_out[l + i] = if pass[i] { -scale * gls[i] } else { 0.0 };
        }
        net.backward(p, s, &tr, &g_out, grad, None);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlParams<A> {
    pub arch: A,
    pub q: Vec<f64>,
    pub q_target: Vec<f64>,
    pub v: Vec<f64>,
    pub v_target: Vec<f64>,
    pub policy: Vec<f64>,
}

impl<A: IqlArch> IqlParams<A> {
    pub fn new(arch: A, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, v, policy) = arch.init(&mut rng);
        Self {
            arch,
            q_target: q.clone(),
            q,
            v_target: v.clone(),
            v,
            policy,
        }
    }
}

impl IqlParams<TabularArch> {
    /// Softmax policy as a high-level table.
    pub fn policy_table(&self) -> Result<PolicyTable> {
        let mut probs = Vec::with_capacity(self.arch.policy_len());
        for s in 0..self.arch.num_states {
            probs.extend(self.arch.probs(&self.policy, s));
        }
        PolicyTable::new(PolicyKind::HighLevel, self.arch.num_states, self.arch.num_skills, probs)
    }
}

/// Weighted batch means of the three objectives, all minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlLosses {
    pub value: f64,
    pub q: f64,
    pub policy: f64,
    /// Fraction of tuples whose advantage weight hit the clip.
    pub clip_rate: f64,
}

pub struct IqlGradients {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub policy: Vec<f64>,
}

/// Loss values at explicit live parameters (targets taken from `params`).
pub fn iql_losses_at<A: IqlArch>(
    params: &IqlParams<A>,
    q: &[f64],
    v: &[f64],
    policy: &[f64],
    batch: &[HighTuple<A::State, A::Skill>],
    gamma_eff: f64,
    config: &IqlConfig,
) -> Result<IqlLosses> {
    losses_impl(params, q, v, policy, batch, gamma_eff, config, None)
}

pub fn iql_gradients<A: IqlArch>(
    params: &IqlParams<A>,
    batch: &[HighTuple<A::State, A::Skill>],
    gamma_eff: f64,
    config: &IqlConfig,
) -> Result<(IqlLosses, IqlGradients)> {
    let mut grads = IqlGradients {
        q: vec![0.0; params.q.len()],
        v: vec![0.0; params.v.len()],
        policy: vec![0.0; params.policy.len()],
    };
    let losses = losses_impl(
        params,
        &params.q,
        &params.v,
        &params.policy,
        batch,
        gamma_eff,
        config,
        Some(&mut grads),
    )?;
    Ok((losses, grads))
}

#[allow(clippy::too_many_arguments)]
fn losses_impl<A: IqlArch>(
    params: &IqlParams<A>,
    q: &[f64],
    v: &[f64],
    policy: &[f64],
    batch: &[HighTuple<A::State, A::Skill>],
    gamma_eff: f64,
    config: &IqlConfig,
    mut grads: Option<&mut IqlGradients>,
) -> Result<IqlLosses> {
    if batch.is_empty() {
        return Err(HorlError::Empty("iql batch"));
    }
    let arch = &params.arch;
    let total_weight: f64 = batch.iter().map(|t| t.weight).sum();
    if !(total_weight > 0.0) {
        return Err(invalid("weight", "batch weights must have positive sum"));
    }
    let lambda = config.expectile;
    let mut out = IqlLosses {
        value: 0.0,
        q: 0.0,
        policy: 0.0,
        clip_rate: 0.0,
    };
    let mut clipped = 0usize;
    for (i, t) in batch.iter().enumerate() {
        arch.check(&t.s0, &t.z)?;
        let w = t.weight / total_weight;

        let v_s0 = arch.v(v, &t.s0);
        let u = arch.q(&params.q_target, &t.s0, &t.z) - v_s0;
        let value = expectile_weight(u, lambda) * u * u;

        let q_sz = arch.q(q, &t.s0, &t.z);
        let td = t.reward + gamma_eff * arch.v(v, &t.s_c) - q_sz;
        let q_loss = td * td;

        let raw = (config.temperature * (q_sz - v_s0)).exp();
        let adv_weight = if raw >= config.weight_clip {
            clipped += 1;
            config.weight_clip
        } else {
            raw
        };
        let log_pi = arch.log_pi(policy, &t.s0, &t.z);
        let pi_loss = -adv_weight * log_pi;

        if !(value.is_finite() && q_loss.is_finite() && pi_loss.is_finite()) {
            return Err(HorlError::NonFinite(format!("iql loss at batch index {i}")));
        }
        out.value += w * value;
        out.q += w * q_loss;
        out.policy += w * pi_loss;

        if let Some(g) = grads.as_deref_mut() {
            arch.v_grad(v, &t.s0, -2.0 * w * expectile_weight(u, lambda) * u, &mut g.v);
            arch.q_grad(q, &t.s0, &t.z, -2.0 * w * td, &mut g.q);
            arch.log_pi_grad(policy, &t.s0, &t.z, -w * adv_weight, &mut g.policy);
        }
    }
    out.clip_rate = clipped as f64 / batch.len() as f64;
    Ok(out)
}

/// Optimizer state carried across steps.
pub struct IqlOptimizer {
    q: Adam,
    v: Adam,
    policy: Adam,
}

impl IqlOptimizer {
    pub fn new<A: IqlArch>(params: &IqlParams<A>, config: &IqlConfig) -> Self {
        Self {
            q: Adam::new(params.q.len(), config.value_lr),
            v: Adam::new(params.v.len(), config.value_lr),
            policy: Adam::new(params.policy.len(), config.policy_lr),
        }
    }
}

/// One gradient step on each objective, all evaluated at the pre-step
/// parameters, followed by target mixing.
pub fn iql_step<A: IqlArch>(
    params: &mut IqlParams<A>,
    opt: &mut IqlOptimizer,
    batch: &[HighTuple<A::State, A::Skill>],
    gamma_eff: f64,
    config: &IqlConfig,
) -> Result<IqlLosses> {
    let (losses, grads) = iql_gradients(params, batch, gamma_eff, config)?;
    opt.q.step(&mut params.q, &grads.q);
    opt.v.step(&mut params.v, &grads.v);
    opt.policy.step(&mut params.policy, &grads.policy);
    let a = config.target_mix;
    for (t, l) in params.q_target.iter_mut().zip(&params.q) {
        *t = (1.0 - a) * *t + a * l;
    }
    for (t, l) in params.v_target.iter_mut().zip(&params.v) {
        *t = (1.0 - a) * *t + a * l;
    }
    Ok(losses)
}

pub struct IqlTraining<A> {
    pub params: IqlParams<A>,
    pub trace: Vec<IqlLosses>,
}

pub fn train_iql<A: IqlArch + Clone>(
    dataset: &HighLevelDataset<A::State, A::Skill>,
    arch: A,
    config: &IqlConfig,
    seed: u64,
) -> Result<IqlTraining<A>>
where
    A::State: Clone,
    A::Skill: Clone,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(HorlError::Empty("high-level dataset"));
    }
    for t in &dataset.tuples {
        arch.check(&t.s0, &t.z)?;
        arch.check(&t.s_c, &t.z)?;
    }
    let gamma_eff = config.gamma_eff(dataset.gamma, dataset.c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IqlParams::new(arch, rng.random());
    let mut opt = IqlOptimizer::new(&params, config);
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<_> = minibatch(&mut rng, dataset.len(), config.batch_size)
            .into_iter()
            .map(|i| dataset.tuples[i].clone())
            .collect();
        trace.push(iql_step(&mut params, &mut opt, &batch, gamma_eff, config)?);
    }
    Ok(IqlTraining { params, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlDocument<A> {
    pub version: u32,
    pub config: IqlConfig,
    pub params: IqlParams<A>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradient;

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.7).unwrap(), 0.7 * 4.0);
        assert!((expectile_loss(-2.0, 0.7).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(expectile_loss(1.5, 0.5).unwrap(), 1.5 * 1.5 / 2.0);
        assert!(expectile_loss(1.0, 1.0).is_err());
        assert!(expectile_loss(1.0, 0.0).is_err());
    }

    fn continuous_case(seed: u64) -> (IqlParams<ContinuousArch>, Vec<HighTuple<Vec<f64>, Vec<f64>>>) {
        let arch = ContinuousArch {
            state_dim: 2,
            latent_dim: 2,
            hidden: 4,
        };
        let mut params = IqlParams::new(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        for p in params.q.iter_mut().chain(&mut params.v).chain(&mut params.policy) {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        for p in params.q_target.iter_mut() {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        let mut v2 = || -> Vec<f64> { (0..2).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let batch = (0..4)
            .map(|_| HighTuple {
                s0: v2(),
                z: v2(),
                reward: 0.5,
                s_c: v2(),
                weight: 1.0,
            })
            .collect();
        (params, batch)
    }

    #[test]
    fn continuous_gradients_match_finite_differences() {
        let config = IqlConfig {
            temperature: 0.7,
            ..IqlConfig::default()
        };
        for seed in 0..3 {
            let (params, batch) = continuous_case(seed);
            let (_, g) = iql_gradients(&params, &batch, 0.81, &config).unwrap();
            let (q, v, pi) = (&params.q, &params.v, &params.policy);
            let at = |q: &[f64], v: &[f64], pi: &[f64]| iql_losses_at(&params, q, v, pi, &batch, 0.81, &config).unwrap();
            let cv = check_gradient(|p| at(q, p, pi).value, v, &g.v, 1e-5, 1e-6);
            let cq = check_gradient(|p| at(p, v, pi).q, q, &g.q, 1e-5, 1e-6);
            let cp = check_gradient(|p| at(q, v, p).policy, pi, &g.policy, 1e-5, 1e-6);
            assert!(cv.passes(1e-4), "{cv:?}");
            assert!(cq.passes(1e-4), "{cq:?}");
            assert!(cp.passes(1e-4), "{cp:?}");
        }
    }

    #[test]
    fn full_target_mix_copies_live_parameters() {
        let (mut params, batch) = continuous_case(4);
        let config = IqlConfig {
            target_mix: 1.0,
            ..IqlConfig::default()
        };
        let mut opt = IqlOptimizer::new(&params, &config);
        iql_step(&mut params, &mut opt, &batch, 0.9, &config).unwrap();
        assert_eq!(params.q, params.q_target);
        assert_eq!(params.v, params.v_target);
    }
}
