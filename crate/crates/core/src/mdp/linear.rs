//! Finite MDPs whose kernel and expected reward are linear in known features
//! sharing one weight vector: `P(s'|s,a) = Ψ(s,a,s')ᵀω`, `E r(s,a) = Φ(s,a)ᵀω`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dense::{DenseMdp, TabularModel, KERNEL_SUM_TOL};
use crate::error::{check_index, invalid, HorlError, Result};

/// Feature tables `Φ: S×A → R^d` and `Ψ: S×A×S → R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    num_states: usize,
    num_actions: usize,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

impl FeatureMap {
    /// `phi` is laid out `[s][a][i]`, `psi` as `[s][a][s'][i]`.
    pub fn new(
        dim: usize,
        num_states: usize,
        num_actions: usize,
        phi: Vec<f64>,
        psi: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("d", "feature dimension must be positive"));
        }
        let phi_len = num_states * num_actions * dim;
        let psi_len = num_states * num_actions * num_states * dim;
        if phi.len() != phi_len {
            return Err(HorlError::DimensionMismatch {
                expected: phi_len,
                got: phi.len(),
                context: "phi table",
            });
        }
        if psi.len() != psi_len {
            return Err(HorlError::DimensionMismatch {
                expected: psi_len,
                got: psi.len(),
                context: "psi table",
            });
        }
        let fm = Self {
            dim,
            num_states,
            num_actions,
            phi,
            psi,
        };
        fm.check_norms()?;
        Ok(fm)
    }

    fn check_norms(&self) -> Result<()> {
        let bad = |x: &f64| !(x.abs() <= 1.0);
        if self.phi.iter().any(bad) {
            return Err(HorlError::InvariantViolated(
                "an entry of Φ exceeds 1 in magnitude".into(),
            ));
        }
        if self.psi.iter().any(bad) {
            return Err(HorlError::InvariantViolated(
                "an entry of Ψ exceeds 1 in magnitude".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.dim;
        &self.phi[start..start + self.dim]
    }

    pub fn psi(&self, s: usize, a: usize, next: usize) -> &[f64] {
        let start = ((s * self.num_actions + a) * self.num_states + next) * self.dim;
        &self.psi[start..start + self.dim]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How realised rewards are emitted when sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Emit `E r(s,a)` exactly.
    #[default]
    Expected,
    /// Emit `r_max` with probability `E r(s,a) / r_max`, else 0.
    Bernoulli,
}

/// A linear MDP with its dense tables cached for the oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct LinearTabularMDP {
    num_states: usize,
    num_actions: usize,
    omega: Vec<f64>,
    features: FeatureMap,
    gamma: f64,
    r_max: f64,
    mu0: Vec<f64>,
    dense: DenseMdp,
}

impl TabularModel for LinearTabularMDP {
    fn dense(&self) -> &DenseMdp {
        &self.dense
    }
}

const MAX_GENERATOR_ATTEMPTS: usize = 64;

impl LinearTabularMDP {
    pub fn new(
        features: FeatureMap,
        omega: Vec<f64>,
        gamma: f64,
        r_max: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let d = features.dim;
        if omega.len() != d {
            return Err(HorlError::DimensionMismatch {
                expected: d,
                got: omega.len(),
                context: "omega",
            });
        }
        if !(r_max > 0.0) {
            return Err(invalid("r_max", "must be positive"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid("gamma", format!("{gamma} is outside [0, 1)")));
        }
        let norm = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > (d as f64).sqrt() * (1.0 + 1e-12) {
            return Err(HorlError::InvariantViolated(format!(
                "‖ω‖₂ = {norm} exceeds √d = {}",
                (d as f64).sqrt()
            )));
        }
        let (n, m) = (features.num_states, features.num_actions);
        let mut kernel = Vec::with_capacity(n * m * n);
        let mut reward = Vec::with_capacity(n * m);
        for s in 0..n {
            for a in 0..m {
                for next in 0..n {
                    let p = dot(features.psi(s, a, next), &omega);
                    if p < -1e-15 {
                        return Err(HorlError::InvariantViolated(format!(
                            "Ψ(s={s},a={a},s'={next})ᵀω = {p} is negative"
                        )));
                    }
                    kernel.push(p.max(0.0));
                }
                let r = dot(features.phi(s, a), &omega);
                if !(-1e-15..=r_max * (1.0 + 1e-12)).contains(&r) {
                    return Err(HorlError::InvariantViolated(format!(
                        "Φ(s={s},a={a})ᵀω = {r} is outside [0, r_max]"
                    )));
                }
                reward.push(r.clamp(0.0, r_max));
            }
        }
        let dense = DenseMdp::new(n, m, gamma, kernel, reward, mu0.clone())?;
        Ok(Self {
            num_states: n,
            num_actions: m,
            omega,
            features,
            gamma,
            r_max,
            mu0,
            dense,
        })
    }

    /// Seeded random instance built from a latent-factor construction:
    /// `P(s'|s,a) = Σ_i φ_i(s,a) μ_i(s')`, `r(s,a) = Σ_i φ_i(s,a) θ_i`, with
    /// `φ(s,a)` on the simplex, then rescaled so that `Ψ_i = φ_i μ_i / ω_i`,
    /// `Φ_i = φ_i θ_i / ω_i` satisfy the norm bounds. Transitions and rewards
    /// are therefore also linear in `Φ` itself whenever every `θ_i > 0`.
    pub fn generate(
        seed: u64,
        d: usize,
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        if d < 1 {
            return Err(invalid("d", "must be at least 1"));
        }
        if num_states < 2 {
            return Err(invalid("num_states", "must be at least 2"));
        }
        if num_actions < 2 {
            return Err(invalid("num_actions", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid("gamma", format!("{gamma} is outside [0, 1)")));
        }
        if !(r_max > 0.0) {
            return Err(invalid("r_max", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_failure = String::new();
        for _ in 0..MAX_GENERATOR_ATTEMPTS {
            match Self::try_generate(&mut rng, d, num_states, num_actions, gamma, r_max) {
                Ok(m) => return Ok(m),
                Err(e) => last_failure = e.to_string(),
            }
        }
        Err(HorlError::GenerationFailed {
            attempts: MAX_GENERATOR_ATTEMPTS,
            constraint: last_failure,
        })
    }

    fn try_generate(
        rng: &mut ChaCha8Rng,
        d: usize,
        n: usize,
        m: usize,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let mix: Vec<Vec<f64>> = (0..n * m).map(|_| dirichlet(rng, d, 0.7)).collect();
        let next_laws: Vec<Vec<f64>> = (0..d).map(|_| dirichlet(rng, n, 0.5)).collect();
        let theta: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.05..1.0) * r_max)
            .collect();

        let omega: Vec<f64> = (0..d)
            .map(|i| {
                let peak_p = mix
                    .iter()
                    .map(|f| f[i] * next_laws[i].iter().copied().fold(0.0, f64::max))
                    .fold(0.0, f64::max);
                let peak_r = mix.iter().map(|f| f[i] * theta[i]).fold(0.0, f64::max);
                let floor: f64 = rng.random_range(0.5..1.0);
                floor.max(peak_p).max(peak_r)
            })
            .collect();
        let norm = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > (d as f64).sqrt() {
            return Err(HorlError::InvariantViolated(format!(
                "‖ω‖₂ = {norm} exceeds √d (r_max too large for unit-bounded features)"
            )));
        }

        let mut phi = Vec::with_capacity(n * m * d);
        let mut psi = Vec::with_capacity(n * m * n * d);
        for f in &mix {
            for i in 0..d {
                phi.push(f[i] * theta[i] / omega[i]);
            }
        }
        for f in &mix {
            for next in 0..n {
                for i in 0..d {
                    psi.push(f[i] * next_laws[i][next] / omega[i]);
                }
            }
        }
        let features = FeatureMap::new(d, n, m, phi, psi)?;
        let mu0 = vec![1.0 / n as f64; n];
        Self::new(features, omega, gamma, r_max, mu0)
    }

    /// Exact linear embedding of an arbitrary tabular MDP: one coordinate per
    /// `(s,a,s')` carrying `P(s'|s,a)` and one per `(s,a)` carrying `r(s,a)`.
    pub fn tabular_embedding(
        num_states: usize,
        num_actions: usize,
        kernel: &[f64],
        reward: &[f64],
        gamma: f64,
        r_max: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let (n, m) = (num_states, num_actions);
        if kernel.len() != n * m * n || reward.len() != n * m {
            return Err(invalid("tables", "kernel or reward has the wrong length"));
        }
        if reward.iter().any(|&r| r > 1.0) {
            return Err(invalid(
                "reward",
                "the tabular embedding stores rewards in ω directly and needs r ≤ 1",
            ));
        }
        let trans = n * m * n;
        let d = trans + n * m;
        let mut omega = kernel.to_vec();
        omega.extend_from_slice(reward);
        let mut phi = vec![0.0; n * m * d];
        let mut psi = vec![0.0; n * m * n * d];
        for sa in 0..n * m {
            phi[sa * d + trans + sa] = 1.0;
            for next in 0..n {
                let idx = sa * n + next;
                psi[idx * d + idx] = 1.0;
            }
        }
        let features = FeatureMap::new(d, n, m, phi, psi)?;
        Self::new(features, omega, gamma, r_max, mu0)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// `Ψ(s,a,s')ᵀω`.
    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> Result<f64> {
        self.check_sa(s, a)?;
        check_index("next state", next, self.num_states)?;
        Ok(dot(self.features.psi(s, a, next), &self.omega).max(0.0))
    }

    /// `Φ(s,a)ᵀω`.
    pub fn expected_reward(&self, s: usize, a: usize) -> Result<f64> {
        self.check_sa(s, a)?;
        Ok(dot(self.features.phi(s, a), &self.omega).clamp(0.0, self.r_max))
    }

    fn check_sa(&self, s: usize, a: usize) -> Result<()> {
        check_index("state", s, self.num_states)?;
        check_index("action", a, self.num_actions)
    }

    /// Re-check every invariant of the instance.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim() as f64;
        let norm = self.omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > d.sqrt() * (1.0 + 1e-12) {
            return Err(HorlError::InvariantViolated(format!("‖ω‖₂ = {norm} > √d")));
        }
        self.features.check_norms()?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row: Vec<f64> = (0..self.num_states)
                    .map(|n| dot(self.features.psi(s, a, n), &self.omega))
                    .collect();
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < -1e-15) || (sum - 1.0).abs() > KERNEL_SUM_TOL {
                    return Err(HorlError::InvariantViolated(format!(
                        "kernel row (s={s}, a={a}) sums to {sum}"
                    )));
                }
                let r = dot(self.features.phi(s, a), &self.omega);
                if r < -1e-15 || r > self.r_max * (1.0 + 1e-12) {
                    return Err(HorlError::InvariantViolated(format!(
                        "reward {r} outside [0, r_max]"
                    )));
                }
            }
        }
        let mu_sum: f64 = self.mu0.iter().sum();
        if (mu_sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(HorlError::InvariantViolated("mu0 does not sum to 1".into()));
        }
        Ok(())
    }

    /// Same instance with a different initial distribution.
    pub fn with_mu0(&self, mu0: Vec<f64>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.omega.clone(),
            self.gamma,
            self.r_max,
            mu0,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Symmetric Dirichlet draw via normalised Gamma variates.
/// Draw from a symmetric Dirichlet via normalised Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let x: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let total: f64 = x.iter().sum();
        if total > 0.0 && total.is_finite() {
            return x.into_iter().map(|v| v / total).collect();
        }
    }
}

/// JSON schema for replaying instances: dimensions, nested feature tables,
/// `ω`, `γ`, `r_max`, `μ0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub num_states: usize,
    pub num_actions: usize,
    pub d: usize,
    /// `phi[s][a]` is a length-`d` vector.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `psi[s][a][s']` is a length-`d` vector.
    pub psi: Vec<Vec<Vec<Vec<f64>>>>,
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub r_max: f64,
    pub mu0: Vec<f64>,
}

impl From<LinearTabularMDP> for MdpDocument {
    fn from(m: LinearTabularMDP) -> Self {
        let f = &m.features;
        let phi = (0..m.num_states)
            .map(|s| (0..m.num_actions).map(|a| f.phi(s, a).to_vec()).collect())
            .collect();
        let psi = (0..m.num_states)
            .map(|s| {
                (0..m.num_actions)
                    .map(|a| (0..m.num_states).map(|n| f.psi(s, a, n).to_vec()).collect())
                    .collect()
            })
            .collect();
        Self {
            num_states: m.num_states,
            num_actions: m.num_actions,
            d: f.dim,
            phi,
            psi,
            omega: m.omega,
            gamma: m.gamma,
            r_max: m.r_max,
            mu0: m.mu0,
        }
    }
}

impl TryFrom<MdpDocument> for LinearTabularMDP {
    type Error = HorlError;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let phi: Vec<f64> = doc.phi.into_iter().flatten().flatten().collect();
        let psi: Vec<f64> = doc.psi.into_iter().flatten().flatten().flatten().collect();
        let features = FeatureMap::new(doc.d, doc.num_states, doc.num_actions, phi, psi)?;
        LinearTabularMDP::new(features, doc.omega, doc.gamma, doc.r_max, doc.mu0)
    }
}
