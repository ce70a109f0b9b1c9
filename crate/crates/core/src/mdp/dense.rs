//! Dense tabular MDPs and the exact oracles built on them: value iteration,
//! policy evaluation by linear solve, induced kernels and visitation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::policy::{argmax_lowest, PolicyKind, PolicyTable};
use crate::error::{check_index, invalid, HorlError, Result};

/// Explicit kernel and expected-reward tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    kernel: Vec<f64>,
    reward: Vec<f64>,
    mu0: Vec<f64>,
}

/// Anything that can be viewed as a dense tabular MDP.
pub trait TabularModel {
    fn dense(&self) -> &DenseMdp;
}

impl TabularModel for DenseMdp {
    fn dense(&self) -> &DenseMdp {
        self
    }
}

pub const KERNEL_SUM_TOL: f64 = 1e-12;

impl DenseMdp {
    /// `kernel` is laid out `[s][a][s']`, `reward` as `[s][a]`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        kernel: Vec<f64>,
        reward: Vec<f64>,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("dims", "need at least one state and one action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid("gamma", format!("{gamma} is outside [0, 1)")));
        }
        if kernel.len() != num_states * num_actions * num_states {
            return Err(HorlError::DimensionMismatch {
                expected: num_states * num_actions * num_states,
                got: kernel.len(),
                context: "kernel",
            });
        }
        if reward.len() != num_states * num_actions {
            return Err(HorlError::DimensionMismatch {
                expected: num_states * num_actions,
                got: reward.len(),
                context: "reward",
            });
        }
        if mu0.len() != num_states {
            return Err(HorlError::DimensionMismatch {
                expected: num_states,
                got: mu0.len(),
                context: "mu0",
            });
        }
        let m = Self {
            num_states,
            num_actions,
            gamma,
            kernel,
            reward,
            mu0,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.kernel.chunks(self.num_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= -1e-15)) || (sum - 1.0).abs() > KERNEL_SUM_TOL {
                return Err(HorlError::InvariantViolated(format!(
                    "kernel row (s={}, a={}) is not a distribution (sum {sum})",
                    i / self.num_actions,
                    i % self.num_actions
                )));
            }
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(HorlError::NonFinite("reward table".into()));
        }
        let mu_sum: f64 = self.mu0.iter().sum();
        if self.mu0.iter().any(|&p| p < 0.0) || (mu_sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(HorlError::InvariantViolated(format!(
                "mu0 is not a distribution (sum {mu_sum})"
            )));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.kernel[start..start + self.num_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> Result<f64> {
        check_index("state", s, self.num_states)?;
        check_index("action", a, self.num_actions)?;
        check_index("next state", next, self.num_states)?;
        Ok(self.row(s, a)[next])
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn kernel_table(&self) -> &[f64] {
        &self.kernel
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_mu0(&self, mu0: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.gamma,
            self.kernel.clone(),
            self.reward.clone(),
            mu0,
        )
    }

    /// `Q(s, a) = r(s, a) + γ Σ P(s'|s,a) V(s')`.
    pub fn q_values(&self, v: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.num_states * self.num_actions];
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let ev: f64 = self.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
                q[s * self.num_actions + a] = self.reward(s, a) + self.gamma * ev;
            }
        }
        q
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.num_rows() != self.num_states || policy.num_choices() != self.num_actions {
            return Err(invalid(
                "policy",
                format!(
                    "table is {}x{}, model needs {}x{}",
                    policy.num_rows(),
                    policy.num_choices(),
                    self.num_states,
                    self.num_actions
                ),
            ));
        }
        Ok(())
    }
}

/// Optimal values with the greedy policy that attains them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub policy: PolicyTable,
    pub iterations: usize,
}

/// Apply the Bellman optimality operator once; returns `(TV, greedy actions)`.
pub fn bellman_optimality<M: TabularModel + ?Sized>(
    model: &M,
    v: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let m = model.dense();
    let q = m.q_values(v);
    let mut tv = Vec::with_capacity(m.num_states);
    let mut greedy = Vec::with_capacity(m.num_states);
    for row in q.chunks(m.num_actions) {
        let a = argmax_lowest(row);
        greedy.push(a);
        tv.push(row[a]);
    }
    (tv, greedy)
}

/// Value iteration to `tol` accuracy in sup-norm, with a greedy policy
/// (lowest action index on ties).
pub fn exact_value_iteration<M: TabularModel + ?Sized>(
    model: &M,
    tol: f64,
) -> Result<ValueSolution> {
    exact_value_iteration_as(model, tol, PolicyKind::Flat)
}

/// [`exact_value_iteration`] labelling the returned policy with `kind`.
pub fn exact_value_iteration_as<M: TabularModel + ?Sized>(
    model: &M,
    tol: f64,
    kind: PolicyKind,
) -> Result<ValueSolution> {
    if !(tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let m = model.dense();
    let threshold = if m.gamma > 0.0 {
        tol * (1.0 - m.gamma) / (2.0 * m.gamma)
    } else {
        f64::INFINITY
    };
    let mut v = vec![0.0; m.num_states];
    let mut iterations = 0;
    loop {
        let (next, _) = bellman_optimality(m, &v);
        iterations += 1;
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta <= threshold {
            break;
        }
    }
    // One more sweep so the returned policy is greedy w.r.t. the returned values.
    let (_, greedy) = bellman_optimality(m, &v);
    let policy = PolicyTable::deterministic(kind, m.num_actions, &greedy)?;
    Ok(ValueSolution {
        values: v,
        policy,
        iterations,
    })
}

/// State-to-state kernel `P_π(s'|s) = Σ_a π(a|s) P(s'|s,a)`.
pub fn induced_kernel<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
) -> Result<DMatrix<f64>> {
    let m = model.dense();
    m.check_policy(policy)?;
    let n = m.num_states;
    let mut k = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..m.num_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (next, p) in m.row(s, a).iter().enumerate() {
                k[(s, next)] += w * p;
            }
        }
    }
    Ok(k)
}

/// Expected one-step reward under the policy.
pub fn induced_reward<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
) -> Result<Vec<f64>> {
    let m = model.dense();
    m.check_policy(policy)?;
    Ok((0..m.num_states)
        .map(|s| {
            (0..m.num_actions)
                .map(|a| policy.prob(s, a) * m.reward(s, a))
                .sum()
        })
        .collect())
}

/// Exact `V^π` by solving `(I − γ P_π) V = r_π`.
pub fn policy_state_values<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
) -> Result<Vec<f64>> {
    let m = model.dense();
    let p = induced_kernel(m, policy)?;
    let r = DVector::from_vec(induced_reward(m, policy)?);
    let n = m.num_states;
    let a = DMatrix::<f64>::identity(n, n) - p * m.gamma;
    let lu = a.lu();
    let v = lu
        .solve(&r)
        .ok_or_else(|| HorlError::Singular("I - γ P_π".into()))?;
    Ok(v.iter().copied().collect())
}

/// `J(π) = Σ_s μ0(s) V^π(s)`.
pub fn policy_value<M: TabularModel + ?Sized>(model: &M, policy: &PolicyTable) -> Result<f64> {
    let v = policy_state_values(model, policy)?;
    Ok(model.dense().mu0.iter().zip(&v).map(|(p, x)| p * x).sum())
}

/// `k`-th power of the policy-induced kernel.
pub fn k_step_transition<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
    k: usize,
) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    let one = induced_kernel(model, policy)?;
    let mut out = one.clone();
    for _ in 1..k {
        out = &out * &one;
    }
    Ok(out)
}

/// Normalised discounted state visitation `(1−γ) μᵀ (I − γ P_π)^{-1}` from `start`.
pub fn discounted_visitation<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
    start: &[f64],
) -> Result<Vec<f64>> {
    let m = model.dense();
    let p = induced_kernel(m, policy)?;
    visitation_from_kernel(&p, m.gamma, start)
}

/// `(1−γ) μᵀ (I − γ K)^{-1}` for an arbitrary row-stochastic `K`.
pub fn visitation_from_kernel(
    kernel: &DMatrix<f64>,
    gamma: f64,
    start: &[f64],
) -> Result<Vec<f64>> {
    let n = kernel.nrows();
    if start.len() != n {
        return Err(HorlError::DimensionMismatch {
            expected: n,
            got: start.len(),
            context: "start distribution",
        });
    }
    let a = (DMatrix::<f64>::identity(n, n) - kernel * gamma).transpose();
    let mu = DVector::from_column_slice(start);
    let d = a
        .lu()
        .solve(&mu)
        .ok_or_else(|| HorlError::Singular("I - γ K".into()))?;
    Ok(d.iter().map(|x| x * (1.0 - gamma)).collect())
}

/// Draw an index from a probability vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last supported index.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Truncated Monte Carlo estimate of `J(π)`; returns `(mean, standard error)`.
pub fn monte_carlo_value<M: TabularModel + ?Sized>(
    model: &M,
    policy: &PolicyTable,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let m = model.dense();
    m.check_policy(policy)?;
    if episodes < 2 {
        return Err(invalid("episodes", "need at least two rollouts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        let mut s = sample_index(&mut rng, &m.mu0);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = sample_index(&mut rng, policy.row(s));
            ret += disc * m.reward(s, a);
            disc *= m.gamma;
            s = sample_index(&mut rng, m.row(s, a));
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Horizon `T` with `γ^T r_max / (1−γ) ≤ tol`.
pub fn truncation_horizon(gamma: f64, r_max: f64, tol: f64) -> usize {
    if gamma == 0.0 {
        return 1;
    }
    let t = (tol * (1.0 - gamma) / r_max).ln() / gamma.ln();
    t.ceil().max(1.0) as usize
}
