//! Pessimistic value iteration on the hyper-MDP: ridge-regression Bellman
//! backups penalised by an elliptical uncertainty bonus.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::HighLevelDataset;
use crate::error::{invalid, HorlError, Result};
use crate::mdp::{argmax_lowest, FeatureTable, HyperMDP, PolicyKind, PolicyTable, TabularModel};

/// Theoretical bonus scale: `ζ = ln(4dN / ((1-γ^c) δ))` and
/// `β = C · d · r_max · √ζ / (1-γ^c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSchedule {
    pub constant: f64,
    pub delta: f64,
    pub zeta: f64,
    pub beta_scale: f64,
}

pub fn compute_beta_schedule(
    d: usize,
    n: usize,
    gamma: f64,
    c: usize,
    delta: f64,
    constant: f64,
    r_max: f64,
) -> Result<BoundSchedule> {
    if d < 1 || n < 1 {
        return Err(invalid("n", "d and N must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "must lie in (0, 1)"));
    }
    if !(constant >= 0.0) {
        return Err(invalid("constant", "must be nonnegative"));
    }
    let horizon_gap = 1.0 - gamma.powi(c as i32);
    if !(horizon_gap > 0.0) {
        return Err(invalid("gamma", "γ^c must be below 1"));
    }
    let zeta = (4.0 * d as f64 * n as f64 / (horizon_gap * delta)).ln();
    let beta_scale = constant * d as f64 * r_max * zeta.sqrt() / horizon_gap;
    Ok(BoundSchedule {
        constant,
        delta,
        zeta,
        beta_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeviConfig {
    pub lambda_reg: f64,
    pub beta_scale: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PeviConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            beta_scale: 1.0,
            tol: 1e-8,
            max_iters: 100_000,
        }
    }
}

impl PeviConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 1e-9) {
            return Err(invalid("lambda_reg", "must be at least 1e-9"));
        }
        if !(self.beta_scale >= 0.0 && self.beta_scale.is_finite()) {
            return Err(invalid("beta_scale", "must be finite and nonnegative"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PessimisticEstimate {
    pub num_states: usize,
    pub num_skills: usize,
    pub dim: usize,
    /// Ridge weights from the final backup.
    pub w_hat: Vec<f64>,
    /// `λI + Σ w φφᵀ`, row-major.
    pub lambda: Vec<f64>,
    pub beta_scale: f64,
    pub lambda_reg: f64,
    pub gamma_eff: f64,
    pub v_max: f64,
    /// Bonus `Γ(s, z)`, indexed `s * K + z`.
    pub bonus: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    /// Value function regressed in the final backup.
    pub v_backup: Vec<f64>,
    pub policy: PolicyTable,
    pub iterations: usize,
    pub converged: bool,
}

impl PessimisticEstimate {
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.lambda)
    }

    pub fn q(&self, s: usize, z: usize) -> f64 {
        self.q_hat[s * self.num_skills + z]
    }

    pub fn gamma_bonus(&self, s: usize, z: usize) -> f64 {
        self.bonus[s * self.num_skills + z]
    }

    pub fn chosen_skills(&self) -> Vec<usize> {
        self.policy.argmax_choices()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fit with the composed features `Φ_c` of the hyper-MDP.
pub fn fit_pessimistic_value(
    data: &HighLevelDataset<usize, usize>,
    hyper: &HyperMDP,
    config: &PeviConfig,
) -> Result<PessimisticEstimate> {
    fit_pessimistic_value_with(data, hyper, &hyper.composed_features(), config)
}

/// Fit with an explicit feature table over `(s, z)`.
pub fn fit_pessimistic_value_with(
    data: &HighLevelDataset<usize, usize>,
    hyper: &HyperMDP,
    features: &FeatureTable,
    config: &PeviConfig,
) -> Result<PessimisticEstimate> {
    config.validate()?;
    if data.is_empty() {
        return Err(HorlError::Empty("high-level dataset"));
    }
    let n = hyper.num_states();
    let k = hyper.num_skills();
    if features.num_states() != n || features.num_choices() != k {
        return Err(invalid(
            "features",
            "feature table does not cover the hyper-MDP's (state, skill) pairs",
        ));
    }
    let d = features.dim();
    let gamma = hyper.gamma_eff();
    let v_max = hyper.v_max();

    let lambda = covariance(data, features, config.lambda_reg)?;
    let chol = Cholesky::new(lambda.clone()).ok_or_else(|| {
        HorlError::Singular(format!(
            "regularised covariance with λ = {} is not positive definite",
            config.lambda_reg
        ))
    })?;

    // b(V) = b0 + next_map · V with b0 = Σ w φ R and next_map[:, s'] = Σ w φ 1[s_c = s'].
    let mut b0 = DVector::<f64>::zeros(d);
    let mut next_map = DMatrix::<f64>::zeros(d, n);
    for t in &data.tuples {
        let phi = features.get(t.s0, t.z);
        for i in 0..d {
            b0[i] += t.weight * phi[i] * t.reward;
            next_map[(i, t.s_c)] += t.weight * phi[i];
        }
    }
    let u0 = chol.solve(&b0);
    let gain = chol.solve(&next_map);

    let rows = n * k;
    let phi_all = DMatrix::from_fn(rows, d, |r, i| features.get(r / k, r % k)[i]);
    let q_base = &phi_all * &u0;
    let q_gain = &phi_all * &gain * gamma;
    let bonus = bonus_table(&chol, &phi_all, config.beta_scale);

    let mut v = vec![0.0; n];
    let mut q = vec![0.0; rows];
    let mut iterations = 0;
    let mut converged = false;
    let mut v_backup = v.clone();
    while iterations < config.max_iters {
        iterations += 1;
        let vv = DVector::from_column_slice(&v);
        let raw = &q_base + &q_gain * &vv;
        for r in 0..rows {
            q[r] = (raw[r] - bonus[r]).clamp(0.0, v_max);
        }
        let next: Vec<f64> = (0..n)
            .map(|s| {
                q[s * k..(s + 1) * k]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v_backup = std::mem::replace(&mut v, next);
        if delta <= config.tol {
            converged = true;
            break;
        }
    }
    let vb = DVector::from_column_slice(&v_backup);
    let w_hat = &u0 + &gain * &vb * gamma;

    let choices: Vec<usize> = (0..n)
        .map(|s| argmax_lowest(&q[s * k..(s + 1) * k]))
        .collect();
    let v_hat: Vec<f64> = (0..n).map(|s| q[s * k + choices[s]]).collect();
    let policy = PolicyTable::deterministic(PolicyKind::HighLevel, k, &choices)?;

    Ok(PessimisticEstimate {
        num_states: n,
        num_skills: k,
        dim: d,
        w_hat: w_hat.iter().copied().collect(),
        lambda: row_major(&lambda),
        beta_scale: config.beta_scale,
        lambda_reg: config.lambda_reg,
        gamma_eff: gamma,
        v_max,
        bonus,
        q_hat: q,
        v_hat,
        v_backup,
        policy,
        iterations,
        converged,
    })
}

/// `λI + Σ w φ(s_0, z) φ(s_0, z)ᵀ`.
pub fn covariance(
    data: &HighLevelDataset<usize, usize>,
    features: &FeatureTable,
    lambda_reg: f64,
) -> Result<DMatrix<f64>> {
    let d = features.dim();
    let mut lambda = DMatrix::<f64>::identity(d, d) * lambda_reg;
    for t in &data.tuples {
        if t.s0 >= features.num_states()
            || t.s_c >= features.num_states()
            || t.z >= features.num_choices()
        {
            return Err(HorlError::IndexOutOfRange {
                what: "high-level tuple",
                index: t.s0.max(t.s_c).max(t.z),
                limit: features.num_states().min(features.num_choices()),
            });
        }
        let phi = features.get(t.s0, t.z);
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                lambda[(i, j)] += t.weight * phi[i] * phi[j];
            }
        }
    }
    Ok(lambda)
}

fn bonus_table(chol: &Cholesky<f64, Dyn>, phi_all: &DMatrix<f64>, beta_scale: f64) -> Vec<f64> {
    let solved = chol.solve(&phi_all.transpose());
    (0..phi_all.nrows())
        .map(|r| {
            let quad: f64 = (0..phi_all.ncols())
                .map(|i| phi_all[(r, i)] * solved[(i, r)])
                .sum();
            beta_scale * quad.max(0.0).sqrt()
        })
        .collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn pevi_policy(estimate: &PessimisticEstimate) -> PolicyTable {
    estimate.policy.clone()
}

/// Empirical mean squared Bellman error gradient at `w` for value `v`:
/// `∇ = 2(λw − Σ w_τ φ(R + γ v(s_c) − φᵀw))`.
pub fn msbe_gradient(
    data: &HighLevelDataset<usize, usize>,
    features: &FeatureTable,
    gamma_eff: f64,
    lambda_reg: f64,
    v: &[f64],
    w: &[f64],
) -> Vec<f64> {
    let d = features.dim();
    let mut grad: Vec<f64> = w.iter().map(|x| 2.0 * lambda_reg * x).collect();
    for t in &data.tuples {
        let phi = features.get(t.s0, t.z);
        let pred: f64 = phi.iter().zip(w).map(|(a, b)| a * b).sum();
        let resid = t.reward + gamma_eff * v[t.s_c] - pred;
        for i in 0..d {
            grad[i] -= 2.0 * t.weight * phi[i] * resid;
        }
    }
    grad
}

/// Fraction of `(s, z)` where `|B̂V − BV| > Γ`, with `V` the value regressed
/// in the final backup and `B` the exact hyper-MDP Bellman operator.
pub fn uncertainty_quantifier_violation_rate(
    hyper: &HyperMDP,
    estimate: &PessimisticEstimate,
    features: &FeatureTable,
) -> Result<f64> {
    let n = hyper.num_states();
    let k = hyper.num_skills();
    if estimate.num_states != n || estimate.num_skills != k || features.dim() != estimate.dim {
        return Err(invalid("estimate", "estimate does not match the hyper-MDP"));
    }
    let exact = hyper.dense().q_values(&estimate.v_backup);
    let mut violations = 0usize;
    for s in 0..n {
        for z in 0..k {
            let fitted: f64 = features
                .get(s, z)
                .iter()
                .zip(&estimate.w_hat)
                .map(|(a, b)| a * b)
                .sum();
            if (fitted - exact[s * k + z]).abs() > estimate.gamma_bonus(s, z) {
                violations += 1;
            }
        }
    }
    Ok(violations as f64 / (n * k) as f64)
}
