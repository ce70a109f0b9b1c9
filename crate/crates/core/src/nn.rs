//! Small dense networks with hand-written backpropagation over flat
//! parameter slices, plus Adam and Gaussian helpers.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds applied to every emitted Gaussian log-standard-deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `input → tanh(hidden) → output`, parameters laid out as
/// `[W1 (hidden × input), b1, W2 (output × hidden), b2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    /// Uniform `±1/√fan_in` weights and zero biases; with `zero_output` the
    /// last layer starts at zero so the network outputs exactly 0.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, zero_output: bool) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        let a1 = 1.0 / (self.input.max(1) as f64).sqrt();
        for w in &mut p[..self.hidden * self.input] {
            *w = rng.random_range(-a1..a1);
        }
        if !zero_output {
            let a2 = 1.0 / (self.hidden.max(1) as f64).sqrt();
            let start = self.hidden * self.input + self.hidden;
            for w in &mut p[start..start + self.output * self.hidden] {
                *w = rng.random_range(-a2..a2);
            }
        }
        p
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = p.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.output * self.hidden);
        (w1, b1, w2, b2)
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> MlpTrace {
        debug_assert_eq!(p.len(), self.num_params());
        debug_assert_eq!(x.len(), self.input);
        let (w1, b1, w2, b2) = self.split(p);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &w1[j * self.input..(j + 1) * self.input];
                (b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let output = (0..self.output)
            .map(|k| {
                let row = &w2[k * self.hidden..(k + 1) * self.hidden];
                b2[k] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect();
        MlpTrace { hidden, output }
    }

    pub fn apply(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(p, x).output
    }

    /// Accumulate `∂L/∂p` into `grad` and optionally `∂L/∂x` into `grad_x`.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        trace: &MlpTrace,
        grad_out: &[f64],
        grad: &mut [f64],
        grad_x: Option<&mut [f64]>,
    ) {
        let (_, _, w2, _) = self.split(p);
        let (gw1, rest) = grad.split_at_mut(self.hidden * self.input);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.output * self.hidden);
        let mut g_hidden = vec![0.0; self.hidden];
        for k in 0..self.output {
            let g = grad_out[k];
            if g == 0.0 {
                continue;
            }
            gb2[k] += g;
            for j in 0..self.hidden {
                gw2[k * self.hidden + j] += g * trace.hidden[j];
                g_hidden[j] += g * w2[k * self.hidden + j];
            }
        }
        let (w1, _, _, _) = self.split(p);
        let mut gx = grad_x;
        for j in 0..self.hidden {
            let h = trace.hidden[j];
            let g_pre = g_hidden[j] * (1.0 - h * h);
            if g_pre == 0.0 {
                continue;
            }
            gb1[j] += g_pre;
            for i in 0..self.input {
                gw1[j * self.input + i] += g_pre * x[i];
            }
            if let Some(gx) = gx.as_deref_mut() {
                for i in 0..self.input {
                    gx[i] += g_pre * w1[j * self.input + i];
                }
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Clamp a raw log-std; the flag reports whether the gradient passes.
pub fn clamp_log_std(raw: f64) -> (f64, bool) {
    if raw < LOG_STD_MIN {
        (LOG_STD_MIN, false)
    } else if raw > LOG_STD_MAX {
        (LOG_STD_MAX, false)
    } else {
        (raw, true)
    }
}

/// `−log N(x; mean, exp(log_std)²)` summed over coordinates.
pub fn gaussian_nll(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let u = (x - m) * (-ls).exp();
            0.5 * u * u + ls + 0.5 * LN_2PI
        })
        .sum()
}

/// Gradients of [`gaussian_nll`] with respect to `mean` and `log_std`.
pub fn gaussian_nll_grad(x: &[f64], mean: &[f64], log_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gm = Vec::with_capacity(x.len());
    let mut gs = Vec::with_capacity(x.len());
    for ((x, m), ls) in x.iter().zip(mean).zip(log_std) {
        let inv_var = (-2.0 * ls).exp();
        let diff = x - m;
        gm.push(-diff * inv_var);
        gs.push(1.0 - diff * diff * inv_var);
    }
    (gm, gs)
}

/// `−log N(x; 0, I)`.
pub fn standard_normal_nll(x: &[f64]) -> f64 {
    x.iter().map(|v| 0.5 * v * v).sum::<f64>() + 0.5 * LN_2PI * x.len() as f64
}

/// Closed-form `KL(N(mq, sq²) ‖ N(mp, sp²))` for diagonal Gaussians given
/// log-standard-deviations.
pub fn gaussian_kl(mq: &[f64], lsq: &[f64], mp: &[f64], lsp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| {
            let var_ratio = (2.0 * (lsq[i] - lsp[i])).exp();
            let diff = (mq[i] - mp[i]) * (-lsp[i]).exp();
            lsp[i] - lsq[i] + 0.5 * (var_ratio + diff * diff) - 0.5
        })
        .sum()
}

/// Partial derivatives of [`gaussian_kl`]: `(∂/∂mq, ∂/∂lsq, ∂/∂mp, ∂/∂lsp)`.
pub fn gaussian_kl_grad(mq: &[f64], lsq: &[f64], mp: &[f64], lsp: &[f64]) -> [Vec<f64>; 4] {
    let n = mq.len();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let inv_vp = (-2.0 * lsp[i]).exp();
        let vq = (2.0 * lsq[i]).exp();
        let diff = mq[i] - mp[i];
        out[0][i] = diff * inv_vp;
        out[1][i] = -1.0 + vq * inv_vp;
        out[2][i] = -diff * inv_vp;
        out[3][i] = 1.0 - (vq + diff * diff) * inv_vp;
    }
    out
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Central differences with step `step`; entries where both gradients are
/// below `floor` in magnitude are skipped.
pub fn check_gradient<F: Fn(&[f64]) -> f64>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> GradCheck {
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = 0;
    let mut checked = 0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale <= floor {
            continue;
        }
        checked += 1;
        let rel = (numeric - analytic[i]).abs() / scale;
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    GradCheck {
        max_relative_error: worst,
        worst_index,
        checked,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.batch_size < 1 {
            return Err(invalid("steps", "steps and batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr", "learning rate must be positive"));
        }
        Ok(())
    }
}

/// Draw a minibatch of distinct indices, or all of them when the dataset
/// is no larger than the batch.
pub fn minibatch<R: Rng + ?Sized>(rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
    if len <= batch {
        (0..len).collect()
    } else {
        sample_indices(rng, len, batch).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_init_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(3, 5, 2);
        let p = net.init(&mut rng, true);
        assert_eq!(net.apply(&p, &[0.3, -1.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(3, 4, 2);
        let p = net.init(&mut rng, false);
        let x = [0.2, -0.7, 1.1];
        let weights = [0.6, -1.3];
        let loss = |p: &[f64]| {
            net.apply(p, &x)
                .iter()
                .zip(&weights)
                .map(|(o, w)| o * w)
                .sum::<f64>()
        };
        let trace = net.forward(&p, &x);
        let mut g = vec![0.0; p.len()];
        let mut gx = vec![0.0; 3];
        net.backward(&p, &x, &trace, &weights, &mut g, Some(&mut gx));
        assert!(check_gradient(loss, &p, &g, 1e-5, 1e-6).passes(1e-6));
        let loss_x = |x: &[f64]| {
            net.apply(&p, x)
                .iter()
                .zip(&weights)
                .map(|(o, w)| o * w)
                .sum::<f64>()
        };
        assert!(check_gradient(loss_x, &x, &gx, 1e-5, 1e-6).passes(1e-6));
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(gaussian_kl(&[0.0], &[0.0], &[0.0], &[0.0]), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
