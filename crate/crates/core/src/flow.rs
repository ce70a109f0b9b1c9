//! State-conditioned invertible map between latent vectors and flattened
//! length-`c` action sequences, built from affine coupling layers, with a
//! learned state-conditioned Gaussian prior over the latent space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Segment, SkillDataset, SkillLabeler};
use crate::error::{invalid, HorlError, Result};
use crate::nn::{
    clamp_log_std, gaussian_nll, gaussian_nll_grad, minibatch, standard_normal_nll, Adam, Mlp,
    MlpTrace, TrainSettings,
};

pub const FLOW_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Skill length.
    pub c: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    /// Coupling blocks; consecutive blocks transform alternate halves.
    pub blocks: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub clamp: f64,
}

impl FlowConfig {
    pub fn new(c: usize, action_dim: usize, state_dim: usize) -> Self {
        Self {
            c,
            action_dim,
            state_dim,
            blocks: 1,
            hidden: 50,
            kl_weight: 0.1,
            clamp: 5.0,
        }
    }

    /// Length of a flattened action sequence.
    pub fn data_dim(&self) -> usize {
        self.c * self.action_dim
    }

    /// Dimension the flow operates in: `data_dim`, padded to 2 when it is 1.
    pub fn flow_dim(&self) -> usize {
        self.data_dim().max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 1 || self.action_dim < 1 {
            return Err(invalid(
                "c",
                "skill length and action dimension must be at least 1",
            ));
        }
        if self.blocks < 1 {
            return Err(invalid("blocks", "need at least one coupling block"));
        }
        if self.hidden < 1 {
            return Err(invalid("hidden", "hidden width must be at least 1"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(invalid("kl_weight", "must be nonnegative"));
        }
        if !(self.clamp > 0.0) {
            return Err(invalid("clamp", "must be positive"));
        }
        Ok(())
    }

    fn first_half(&self) -> usize {
        self.flow_dim() / 2
    }

    /// `(untouched, transformed)` coordinate ranges of block `b`.
    fn halves(&self, b: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let d = self.flow_dim();
        let h = self.first_half();
        if b % 2 == 0 {
            (0..h, h..d)
        } else {
            (h..d, 0..h)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    scale: Mlp,
    translate: Mlp,
    scale_at: usize,
    translate_at: usize,
}

fn block_layouts(config: &FlowConfig) -> Vec<BlockLayout> {
    let mut offset = 0;
    (0..config.blocks)
        .map(|b| {
            let (u, t) = config.halves(b);
            let net = Mlp::new(u.len() + config.state_dim, config.hidden, t.len());
            let layout = BlockLayout {
                scale: net,
                translate: net,
                scale_at: offset,
                translate_at: offset + net.num_params(),
            };
            offset += 2 * net.num_params();
            layout
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    config: FlowConfig,
    params: Vec<f64>,
    trained: bool,
}

struct BlockTrace {
    input: Vec<f64>,
    scale: MlpTrace,
    translate: MlpTrace,
    v: Vec<f64>,
    /// Transformed coordinates on the latent side.
    x_t: Vec<f64>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HorlError::NonFinite(format!(
            "{what} contains a non-finite entry"
        )))
    }
}

impl CouplingFlow {
    /// Random hidden layers with zero output layers: the identity map.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layout in block_layouts(&config) {
            params.extend(layout.scale.init(&mut rng, true));
            params.extend(layout.translate.init(&mut rng, true));
        }
        Ok(Self {
            config,
            params,
            trained: false,
        })
    }

    pub fn from_params(config: FlowConfig, params: Vec<f64>, trained: bool) -> Result<Self> {
        config.validate()?;
        let expected: usize = block_layouts(&config)
            .iter()
            .map(|l| 2 * l.scale.num_params())
            .sum();
        if params.len() != expected {
            return Err(HorlError::DimensionMismatch {
                expected,
                got: params.len(),
                context: "flow parameters",
            });
        }
        Ok(Self {
            config,
            params,
            trained,
        })
    }

    pub fn config(&self) -> &FlowConfig {
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

    fn check_inputs(&self, x: &[f64], s0: &[f64]) -> Result<()> {
        if x.len() != self.config.flow_dim() {
            return Err(HorlError::DimensionMismatch {
                expected: self.config.flow_dim(),
                got: x.len(),
                context: "flow vector",
            });
        }
        if s0.len() != self.config.state_dim {
            return Err(HorlError::DimensionMismatch {
                expected: self.config.state_dim,
                got: s0.len(),
                context: "conditioning state",
            });
        }
        check_finite(x, "flow input")?;
        check_finite(s0, "conditioning state")
    }

    fn scale_and_shift(
        &self,
        params: &[f64],
        layout: &BlockLayout,
        input: &[f64],
    ) -> (MlpTrace, MlpTrace, Vec<f64>) {
        let np = layout.scale.num_params();
        let scale = layout
            .scale
            .forward(&params[layout.scale_at..layout.scale_at + np], input);
        let translate = layout.translate.forward(
            &params[layout.translate_at..layout.translate_at + np],
            input,
        );
        let clamp = self.config.clamp;
        let v = scale
            .output
            .iter()
            .map(|r| clamp * (r / clamp).tanh())
            .collect();
        (scale, translate, v)
    }

    fn conditioned(&self, x: &[f64], u: &std::ops::Range<usize>, s0: &[f64]) -> Vec<f64> {
        let mut input = x[u.clone()].to_vec();
        input.extend_from_slice(s0);
        input
    }

    /// `a = f(z; s0)` in the (padded) flow dimension.
    pub fn forward(&self, z: &[f64], s0: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(z, s0)?;
        let mut x = z.to_vec();
        for (b, layout) in block_layouts(&self.config).iter().enumerate() {
            let (u, t) = self.config.halves(b);
            let input = self.conditioned(&x, &u, s0);
            let (_, translate, v) = self.scale_and_shift(&self.params, layout, &input);
            for (j, i) in t.enumerate() {
                x[i] = x[i] * v[j].exp() + translate.output[j];
            }
        }
        Ok(x)
    }

    /// `(z, log|det ∂f⁻¹/∂a|)`.
    pub fn inverse(&self, a: &[f64], s0: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_inputs(a, s0)?;
        let (z, log_det, _) = self.inverse_traced(&self.params, a, s0);
        Ok((z, log_det))
    }

    fn inverse_traced(
        &self,
        params: &[f64],
        a: &[f64],
        s0: &[f64],
    ) -> (Vec<f64>, f64, Vec<BlockTrace>) {
        let layouts = block_layouts(&self.config);
        let mut y = a.to_vec();
        let mut log_det = 0.0;
        let mut traces: Vec<BlockTrace> = Vec::with_capacity(layouts.len());
        for b in (0..layouts.len()).rev() {
            let (u, t) = self.config.halves(b);
            let input = self.conditioned(&y, &u, s0);
            let (scale, translate, v) = self.scale_and_shift(params, &layouts[b], &input);
            let mut x_t = Vec::with_capacity(t.len());
            for (j, i) in t.enumerate() {
                let xi = (y[i] - translate.output[j]) * (-v[j]).exp();
                y[i] = xi;
                x_t.push(xi);
                log_det -= v[j];
            }
            traces.push(BlockTrace {
                input,
                scale,
                translate,
                v,
                x_t,
            });
        }
        traces.reverse();
        (y, log_det, traces)
    }

    fn pad(&self, a: &[f64]) -> Result<Vec<f64>> {
        let dd = self.config.data_dim();
        if a.len() != dd {
            return Err(HorlError::DimensionMismatch {
                expected: dd,
                got: a.len(),
                context: "flattened action sequence",
            });
        }
        let mut out = a.to_vec();
        out.resize(self.config.flow_dim(), 0.0);
        Ok(out)
    }

    /// Latent code of a flattened (time-major) action sequence.
    pub fn encode(&self, actions: &[f64], s0: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse(&self.pad(actions)?, s0)?.0)
    }

    /// Flattened action sequence for a latent; padding coordinates dropped.
    pub fn decode(&self, z: &[f64], s0: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.forward(z, s0)?;
        a.truncate(self.config.data_dim());
        Ok(a)
    }

    /// Backpropagate `∂ℓ/∂z` and the log-det weight through the inverse pass.
    fn backward(
        &self,
        params: &[f64],
        traces: &[BlockTrace],
        grad_z: &[f64],
        grad_log_det: f64,
        grad: &mut [f64],
    ) {
        let layouts = block_layouts(&self.config);
        let clamp = self.config.clamp;
        let mut gx = grad_z.to_vec();
        for (b, (layout, tr)) in layouts.iter().zip(traces).enumerate() {
            let (u, t) = self.config.halves(b);
            let np = layout.scale.num_params();
            let mut g_v_raw = Vec::with_capacity(t.len());
            let mut g_t = Vec::with_capacity(t.len());
            let mut gy = gx.clone();
            for (j, i) in t.clone().enumerate() {
                let e = (-tr.v[j]).exp();
                gy[i] = gx[i] * e;
                g_t.push(-gx[i] * e);
                let g_v = -gx[i] * tr.x_t[j] - grad_log_det;
                let th = (tr.scale.output[j] / clamp).tanh();
                g_v_raw.push(g_v * (1.0 - th * th));
            }
            let mut g_input = vec![0.0; tr.input.len()];
            {
                let (lo, hi) = (layout.scale_at, layout.scale_at + np);
                layout.scale.backward(
                    &params[lo..hi],
                    &tr.input,
                    &tr.scale,
                    &g_v_raw,
                    &mut grad[lo..hi],
                    Some(&mut g_input),
                );
            }
            {
                let (lo, hi) = (layout.translate_at, layout.translate_at + np);
                layout.translate.backward(
                    &params[lo..hi],
                    &tr.input,
                    &tr.translate,
                    &g_t,
                    &mut grad[lo..hi],
                    Some(&mut g_input),
                );
            }
            for (j, i) in u.enumerate() {
                gy[i] += g_input[j];
            }
            gx = gy;
        }
    }
}

/// State-conditioned diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPrior {
    dim: usize,
    state_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct PriorTrace {
    mean: MlpTrace,
    log_std: MlpTrace,
}

impl SkillPrior {
    /// Starts as the standard normal for every state.
    pub fn new(dim: usize, state_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(state_dim, hidden, dim);
        let mut params = net.init(&mut rng, true);
        params.extend(net.init(&mut rng, true));
        Self {
            dim,
            state_dim,
            hidden,
            params,
        }
    }

    fn net(&self) -> Mlp {
        Mlp::new(self.state_dim, self.hidden, self.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn traced(&self, params: &[f64], s0: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>, PriorTrace) {
        let net = self.net();
        let np = net.num_params();
        let mean = net.forward(&params[..np], s0);
        let log_std = net.forward(&params[np..], s0);
        let mut ls = Vec::with_capacity(self.dim);
        let mut pass = Vec::with_capacity(self.dim);
        for &raw in &log_std.output {
            let (v, ok) = clamp_log_std(raw);
            ls.push(v);
            pass.push(ok);
        }
        (mean.output.clone(), ls, pass, PriorTrace { mean, log_std })
    }

    /// `(mean, log_std)` at `s0`.
    pub fn distribution(&self, s0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, ls, _, _) = self.traced(&self.params, s0);
        (m, ls)
    }

    pub fn log_density(&self, z: &[f64], s0: &[f64]) -> f64 {
        let (m, ls) = self.distribution(s0);
        -gaussian_nll(z, &m, &ls)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s0: &[f64], rng: &mut R) -> Vec<f64> {
        let (m, ls) = self.distribution(s0);
        m.iter()
            .zip(&ls)
            .map(|(m, ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect()
    }

    fn backward(
        &self,
        params: &[f64],
        s0: &[f64],
        trace: &PriorTrace,
        g_mean: &[f64],
        g_log_std: &[f64],
        grad: &mut [f64],
    ) {
        let net = self.net();
        let np = net.num_params();
        let (gp_mean, gp_ls) = grad.split_at_mut(np);
        net.backward(&params[..np], s0, &trace.mean, g_mean, gp_mean, None);
        net.backward(&params[np..], s0, &trace.log_std, g_log_std, gp_ls, None);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLoss {
    pub loss: f64,
    /// `mean[−log N(z; 0, I) − log_det]`.
    pub nll: f64,
    /// `mean[−log ρ(z|s0) + log N(z; 0, I)]`.
    pub kl_term: f64,
}

/// A flattened action sequence with its conditioning state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub actions: Vec<f64>,
    pub s0: Vec<f64>,
}

impl FlowSample {
    pub fn from_segment(seg: &Segment<Vec<f64>, Vec<f64>>) -> Self {
        Self {
            actions: seg.actions.concat(),
            s0: seg.start().clone(),
        }
    }
}

pub fn flow_objective(
    flow: &CouplingFlow,
    prior: &SkillPrior,
    batch: &[FlowSample],
) -> Result<FlowLoss> {
    Ok(objective_impl(
        flow,
        flow.params(),
        prior,
        prior.params(),
        batch,
        None,
    )?)
}

/// Loss with gradients for the flow and prior parameters.
pub fn flow_objective_grad(
    flow: &CouplingFlow,
    prior: &SkillPrior,
    batch: &[FlowSample],
) -> Result<(FlowLoss, Vec<f64>, Vec<f64>)> {
    let mut gf = vec![0.0; flow.params().len()];
    let mut gp = vec![0.0; prior.params().len()];
    let loss = objective_impl(
        flow,
        flow.params(),
        prior,
        prior.params(),
        batch,
        Some((&mut gf, &mut gp)),
    )?;
    Ok((loss, gf, gp))
}

/// Objective at explicit parameter vectors, for finite-difference checks.
pub fn flow_objective_at(
    flow: &CouplingFlow,
    flow_params: &[f64],
    prior: &SkillPrior,
    prior_params: &[f64],
    batch: &[FlowSample],
) -> Result<FlowLoss> {
    objective_impl(flow, flow_params, prior, prior_params, batch, None)
}

fn objective_impl(
    flow: &CouplingFlow,
    flow_params: &[f64],
    prior: &SkillPrior,
    prior_params: &[f64],
    batch: &[FlowSample],
    mut grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> Result<FlowLoss> {
    if batch.is_empty() {
        return Err(HorlError::Empty("flow batch"));
    }
    if prior.dim() != flow.config.flow_dim() {
        return Err(invalid(
            "prior",
            "prior dimension differs from the flow dimension",
        ));
    }
    let kl_w = flow.config.kl_weight;
    let scale = 1.0 / batch.len() as f64;
    let mut nll_sum = 0.0;
    let mut kl_sum = 0.0;
    for sample in batch {
        let a = flow.pad(&sample.actions)?;
        flow.check_inputs(&a, &sample.s0)?;
        let (z, log_det, traces) = flow.inverse_traced(flow_params, &a, &sample.s0);
        let base = standard_normal_nll(&z);
        let (mean, log_std, pass, ptrace) = prior.traced(prior_params, &sample.s0);
        let prior_nll = gaussian_nll(&z, &mean, &log_std);
        nll_sum += base - log_det;
        kl_sum += prior_nll - base;
        if let Some((gf, gp)) = grads.as_mut() {
            let (gm, gls) = gaussian_nll_grad(&z, &mean, &log_std);
            // ∂ℓ/∂z = (1 − w) z + w (z − μ)/σ², with −∂/∂μ of the prior NLL.
            let grad_z: Vec<f64> = z
                .iter()
                .zip(&gm)
                .map(|(zi, gmi)| scale * ((1.0 - kl_w) * zi - kl_w * gmi))
                .collect();
            flow.backward(flow_params, &traces, &grad_z, -scale, gf);
            let g_mean: Vec<f64> = gm.iter().map(|g| scale * kl_w * g).collect();
            let g_ls: Vec<f64> = gls
                .iter()
                .zip(&pass)
                .map(|(g, &ok)| if ok { scale * kl_w * g } else { 0.0 })
                .collect();
            prior.backward(prior_params, &sample.s0, &ptrace, &g_mean, &g_ls, gp);
        }
    }
    let nll = nll_sum * scale;
    let kl_term = kl_sum * scale;
    let loss = nll + kl_w * kl_term;
    if !loss.is_finite() {
        return Err(HorlError::NonFinite("flow objective".into()));
    }
    Ok(FlowLoss { loss, nll, kl_term })
}

pub struct FlowTraining {
    pub flow: CouplingFlow,
    pub prior: SkillPrior,
    /// Minibatch loss before each update.
    pub trace: Vec<FlowLoss>,
}

pub fn flow_samples(
    dataset: &SkillDataset<Vec<f64>, Vec<f64>>,
    config: &FlowConfig,
) -> Result<Vec<FlowSample>> {
    if dataset.c != config.c {
        return Err(HorlError::DimensionMismatch {
            expected: config.c,
            got: dataset.c,
            context: "segment length",
        });
    }
    dataset
        .segments
        .iter()
        .map(|seg| {
            if seg.actions.len() != config.c
                || seg.actions.iter().any(|a| a.len() != config.action_dim)
            {
                return Err(HorlError::DimensionMismatch {
                    expected: config.data_dim(),
                    got: seg.actions.iter().map(Vec::len).sum(),
                    context: "segment actions",
                });
            }
            if seg.start().len() != config.state_dim {
                return Err(HorlError::DimensionMismatch {
                    expected: config.state_dim,
                    got: seg.start().len(),
                    context: "segment start state",
                });
            }
            Ok(FlowSample::from_segment(seg))
        })
        .collect()
}

pub fn train_flow(
    dataset: &SkillDataset<Vec<f64>, Vec<f64>>,
    config: &FlowConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<FlowTraining> {
    let samples = flow_samples(dataset, config)?;
    train_flow_on(&samples, config, settings, seed)
}

pub fn train_flow_on(
    samples: &[FlowSample],
    config: &FlowConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<FlowTraining> {
    settings.validate()?;
    if samples.is_empty() {
        return Err(HorlError::Empty("flow training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = CouplingFlow::new(*config, rng.random())?;
    let mut prior = SkillPrior::new(
        config.flow_dim(),
        config.state_dim,
        config.hidden,
        rng.random(),
    );
    let mut opt_flow = Adam::new(flow.params().len(), settings.lr);
    let mut opt_prior = Adam::new(prior.params().len(), settings.lr);
    let mut trace = Vec::with_capacity(settings.steps);
    let mut batch = Vec::with_capacity(settings.batch_size);
    for _ in 0..settings.steps {
        batch.clear();
        batch.extend(
            minibatch(&mut rng, samples.len(), settings.batch_size)
                .into_iter()
                .map(|i| samples[i].clone()),
        );
        let (loss, gf, gp) = flow_objective_grad(&flow, &prior, &batch)?;
        trace.push(loss);
        opt_flow.step(flow.params_mut(), &gf);
        opt_prior.step(prior.params_mut(), &gp);
    }
    flow.trained = true;
    Ok(FlowTraining { flow, prior, trace })
}

/// Versioned parameter document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDocument {
    pub version: u32,
    pub flow: CouplingFlow,
    pub prior: SkillPrior,
}

impl FlowDocument {
    pub fn new(flow: CouplingFlow, prior: SkillPrior) -> Self {
        Self {
            version: FLOW_SCHEMA_VERSION,
            flow,
            prior,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.version != FLOW_SCHEMA_VERSION {
            return Err(HorlError::Serialization(format!(
                "unsupported flow schema version {}",
                doc.version
            )));
        }
        CouplingFlow::from_params(doc.flow.config, doc.flow.params.clone(), doc.flow.trained)?;
        Ok(doc)
    }
}

/// Labels segments with their latent code under a trained flow.
pub struct FlowEncoder<'a> {
    pub flow: &'a CouplingFlow,
}

impl SkillLabeler<Vec<f64>, Vec<f64>> for FlowEncoder<'_> {
    type Skill = Vec<f64>;

    fn label(&self, segment: &Segment<Vec<f64>, Vec<f64>>) -> Result<Vec<f64>> {
        if !self.flow.is_trained() {
            return Err(HorlError::Untrained("flow encoder"));
        }
        self.flow.encode(&segment.actions.concat(), segment.start())
    }
}

/// Turns latents into clipped action sequences.
pub struct FlowSkillDecoder<'a> {
    pub flow: &'a CouplingFlow,
    pub prior: &'a SkillPrior,
    pub action_bound: f64,
}

impl FlowSkillDecoder<'_> {
    /// `c` actions of dimension `m`, each coordinate clipped to `±action_bound`.
    pub fn decode_actions(&self, z: &[f64], s0: &[f64]) -> Result<Vec<Vec<f64>>> {
        if !self.flow.is_trained() {
            return Err(HorlError::Untrained("flow decoder"));
        }
        let flat = self.flow.decode(z, s0)?;
        let b = self.action_bound;
        Ok(flat
            .chunks(self.flow.config.action_dim)
            .map(|a| a.iter().map(|x| x.clamp(-b, b)).collect())
            .collect())
    }

    /// Decode a latent drawn from the prior at `s0`.
    pub fn sample<R: Rng + ?Sized>(&self, s0: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let z = self.prior.sample(s0, rng);
        self.decode_actions(&z, s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_block() -> CouplingFlow {
        let config = FlowConfig {
            c: 1,
            action_dim: 2,
            state_dim: 1,
            blocks: 1,
            hidden: 1,
            kl_weight: 0.0,
            clamp: 5.0,
        };
        let mut flow = CouplingFlow::new(config, 0).unwrap();
        // Zero hidden weights and output weights; biases give constants.
        flow.params.fill(0.0);
        let layout = block_layouts(&config)[0];
        let np = layout.scale.num_params();
        // v_raw bias chosen so clamp·tanh(v_raw/clamp) = ln 2.
        let v_raw = 5.0 * (2f64.ln() / 5.0).atanh();
        flow.params[layout.scale_at + np - 1] = v_raw;
        flow.params[layout.translate_at + np - 1] = 1.0;
        flow
    }

    #[test]
    fn hand_computed_block() {
        let flow = hand_block();
        let a = flow.forward(&[1.0, 1.0], &[0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12 && (a[1] - 3.0).abs() < 1e-12);
        let (z, ld) = flow.inverse(&[1.0, 3.0], &[0.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12);
        assert!((ld + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_at_init() {
        let flow = CouplingFlow::new(FlowConfig::new(2, 2, 2), 3).unwrap();
        let z = [0.1, -0.4, 2.0, 0.7];
        assert_eq!(flow.forward(&z, &[0.5, 0.5]).unwrap(), z.to_vec());
        let (back, ld) = flow.inverse(&z, &[0.5, 0.5]).unwrap();
        assert_eq!(back, z.to_vec());
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let flow = CouplingFlow::new(FlowConfig::new(1, 2, 1), 0).unwrap();
        assert!(flow.forward(&[f64::NAN, 0.0], &[0.0]).is_err());
        assert!(flow.inverse(&[0.0, 0.0], &[f64::INFINITY]).is_err());
    }

    #[test]
    fn identity_objective_at_origin() {
        let mut config = FlowConfig::new(1, 3, 1);
        config.kl_weight = 0.0;
        let flow = CouplingFlow::new(config, 0).unwrap();
        let prior = SkillPrior::new(3, 1, 4, 0);
        let loss = flow_objective(
            &flow,
            &prior,
            &[FlowSample {
                actions: vec![0.0; 3],
                s0: vec![0.2],
            }],
        )
        .unwrap();
        assert!((loss.loss - 1.5 * crate::nn::LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn scalar_actions_are_padded() {
        let config = FlowConfig::new(1, 1, 1);
        assert_eq!(config.flow_dim(), 2);
        let flow = CouplingFlow::new(config, 0).unwrap();
        let z = flow.encode(&[0.3], &[0.0]).unwrap();
        assert_eq!(z.len(), 2);
        assert_eq!(flow.decode(&z, &[0.0]).unwrap(), vec![0.3]);
    }

    fn perturbed(
        seed: u64,
        blocks: usize,
        kl_weight: f64,
    ) -> (CouplingFlow, SkillPrior, Vec<FlowSample>) {
        let mut config = FlowConfig::new(2, 2, 2);
        config.blocks = blocks;
        config.hidden = 6;
        config.kl_weight = kl_weight;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = CouplingFlow::new(config, seed).unwrap();
        for p in flow.params_mut() {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        let mut prior = SkillPrior::new(4, 2, 5, seed + 1);
        for p in prior.params_mut() {
            *p += 0.3 * rng.random_range(-1.0..1.0);
        }
        let batch = (0..3)
            .map(|_| FlowSample {
                actions: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                s0: (0..2).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        (flow, prior, batch)
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for (seed, blocks) in [(0, 1), (1, 2), (2, 3)] {
            let (flow, prior, batch) = perturbed(seed, blocks, 0.3);
            let (_, gf, gp) = flow_objective_grad(&flow, &prior, &batch).unwrap();
            let fc = crate::nn::check_gradient(
                |p| {
                    flow_objective_at(&flow, p, &prior, prior.params(), &batch)
                        .unwrap()
                        .loss
                },
                flow.params(),
                &gf,
                1e-5,
                1e-6,
            );
            assert!(fc.passes(1e-4), "flow {blocks}: {fc:?}");
            let pc = crate::nn::check_gradient(
                |p| {
                    flow_objective_at(&flow, flow.params(), &prior, p, &batch)
                        .unwrap()
                        .loss
                },
                prior.params(),
                &gp,
                1e-5,
                1e-6,
            );
            assert!(pc.passes(1e-4), "prior {blocks}: {pc:?}");
        }
    }

    #[test]
    fn perturbed_flow_round_trips() {
        let (flow, _, batch) = perturbed(7, 3, 0.1);
        for s in &batch {
            let z = flow.encode(&s.actions, &s.s0).unwrap();
            let back = flow.decode(&z, &s.s0).unwrap();
            for (a, b) in back.iter().zip(&s.actions) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
