//! The every-`c`-step MDP whose actions are skills executed for `c` base steps.
//!
//! Composition follows the linear structure of the base instance:
//! `Ψ_1(s,z,s') = Σ_a β(a|s,z) Ψ(s,a,s')`, and
//! `Ψ_c(s,z,s'') = Σ_{s'} P_z^{c-1}(s'|s) Ψ_1(s',z,s'')`, so that
//! `Ψ_c(s,z,s'')ᵀω` is the `c`-step skill-conditioned kernel.
//! `Φ_c(s,z) = Σ_{k<c} γ^k Σ_{s'} P_z^k(s'|s) Φ_1(s',z)` gives the discounted
//! in-window reward `Φ_c(s,z)ᵀω`.

use nalgebra::DMatrix;

use super::dense::{DenseMdp, TabularModel};
use super::linear::{dot, LinearTabularMDP};
use super::policy::{PolicyKind, PolicyTable};
use crate::error::{invalid, HorlError, Result};

/// A feature table over `(state, choice)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    num_states: usize,
    num_choices: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(num_states: usize, num_choices: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_states * num_choices * dim {
            return Err(HorlError::DimensionMismatch {
                expected: num_states * num_choices * dim,
                got: data.len(),
                context: "feature table",
            });
        }
        if dim == 0 {
            return Err(invalid("dim", "feature dimension must be positive"));
        }
        Ok(Self {
            num_states,
            num_choices,
            dim,
            data,
        })
    }

    /// One-hot features over `(s, z)`: the exact tabular embedding.
    pub fn indicator(num_states: usize, num_choices: usize) -> Self {
        let dim = num_states * num_choices;
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            num_states,
            num_choices,
            dim,
            data,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, s: usize, z: usize) -> &[f64] {
        let start = (s * self.num_choices + z) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// The hyper-MDP induced by a base linear MDP, a skill table and a skill length.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperMDP {
    c: usize,
    num_states: usize,
    num_skills: usize,
    dim: usize,
    gamma_base: f64,
    gamma_eff: f64,
    r_max_base: f64,
    r_max_c: f64,
    omega: Vec<f64>,
    psi_c: Vec<f64>,
    phi_c: Vec<f64>,
    skills: PolicyTable,
    dense: DenseMdp,
}

impl TabularModel for HyperMDP {
    fn dense(&self) -> &DenseMdp {
        &self.dense
    }
}

/// `Σ_{k<c} γ^k`.
pub fn geometric_sum(gamma: f64, c: usize) -> f64 {
    (0..c).map(|k| gamma.powi(k as i32)).sum()
}

/// One-step state kernel while skill `z` is held.
pub fn skill_kernel(mdp: &LinearTabularMDP, skills: &PolicyTable, z: usize) -> DMatrix<f64> {
    let n = mdp.num_states();
    let dense = mdp.dense();
    let mut k = DMatrix::zeros(n, n);
    for s in 0..n {
        let probs = skills.skill_row(s, z);
        for (a, &w) in probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (next, &p) in dense.row(s, a).iter().enumerate() {
                k[(s, next)] += w * p;
            }
        }
    }
    k
}

pub(crate) fn check_skills(mdp: &LinearTabularMDP, skills: &PolicyTable) -> Result<()> {
    match skills.kind() {
        PolicyKind::LowLevel { num_skills } if num_skills > 0 => {}
        _ => {
            return Err(invalid(
                "skills",
                "expected a non-empty low-level (state, skill) table",
            ))
        }
    }
    if skills.num_states() != mdp.num_states() || skills.num_choices() != mdp.num_actions() {
        return Err(invalid(
            "skills",
            format!(
                "table covers {} states x {} actions, MDP has {} x {}",
                skills.num_states(),
                skills.num_choices(),
                mdp.num_states(),
                mdp.num_actions()
            ),
        ));
    }
    Ok(())
}

impl HyperMDP {
    pub fn build(mdp: &LinearTabularMDP, skills: &PolicyTable, c: usize) -> Result<Self> {
        if c < 1 {
            return Err(invalid(
                "c",
                "skill length must be at least 1 (SkillConfig invariant c ≥ 1)",
            ));
        }
        check_skills(mdp, skills)?;
        let n = mdp.num_states();
        let k_skills = skills.num_skills();
        let d = mdp.dim();
        let gamma = mdp.gamma();
        let feats = mdp.features();

        // Ψ_1 and Φ_1 per (s, z).
        let mut psi1 = vec![0.0; n * k_skills * n * d];
        let mut phi1 = vec![0.0; n * k_skills * d];
        for s in 0..n {
            for z in 0..k_skills {
                for (a, &w) in skills.skill_row(s, z).iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let base = (s * k_skills + z) * d;
                    for (i, x) in feats.phi(s, a).iter().enumerate() {
                        phi1[base + i] += w * x;
                    }
                    for next in 0..n {
                        let dst = ((s * k_skills + z) * n + next) * d;
                        for (i, x) in feats.psi(s, a, next).iter().enumerate() {
                            psi1[dst + i] += w * x;
                        }
                    }
                }
            }
        }

        let mut psi_c = vec![0.0; n * k_skills * n * d];
        let mut phi_c = vec![0.0; n * k_skills * d];
        for z in 0..k_skills {
            let step = skill_kernel(mdp, skills, z);
            // reach = P_z^k, starting at k = 0.
            let mut reach = DMatrix::<f64>::identity(n, n);
            for k in 0..c {
                let disc = gamma.powi(k as i32);
                for s in 0..n {
                    let dst = (s * k_skills + z) * d;
                    for mid in 0..n {
                        let w = reach[(s, mid)];
                        if w == 0.0 {
                            continue;
                        }
                        let src = (mid * k_skills + z) * d;
                        for i in 0..d {
                            phi_c[dst + i] += disc * w * phi1[src + i];
                        }
                        if k == c - 1 {
                            for next in 0..n {
                                let src = ((mid * k_skills + z) * n + next) * d;
                                let out = ((s * k_skills + z) * n + next) * d;
                                for i in 0..d {
                                    psi_c[out + i] += w * psi1[src + i];
                                }
                            }
                        }
                    }
                }
                if k + 1 < c {
                    reach = &reach * &step;
                }
            }
        }

        let omega = mdp.omega().to_vec();
        let mut kernel = Vec::with_capacity(n * k_skills * n);
        let mut reward = Vec::with_capacity(n * k_skills);
        for s in 0..n {
            for z in 0..k_skills {
                for next in 0..n {
                    let start = ((s * k_skills + z) * n + next) * d;
                    kernel.push(dot(&psi_c[start..start + d], &omega).max(0.0));
                }
                let start = (s * k_skills + z) * d;
                reward.push(dot(&phi_c[start..start + d], &omega));
            }
        }
        let gamma_eff = gamma.powi(c as i32);
        let dense = DenseMdp::new(n, k_skills, gamma_eff, kernel, reward, mdp.mu0().to_vec())?;
        Ok(Self {
            c,
            num_states: n,
            num_skills: k_skills,
            dim: d,
            gamma_base: gamma,
            gamma_eff,
            r_max_base: mdp.r_max(),
            r_max_c: geometric_sum(gamma, c) * mdp.r_max(),
            omega,
            psi_c,
            phi_c,
            skills: skills.clone(),
            dense,
        })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_skills(&self) -> usize {
        self.num_skills
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma_base(&self) -> f64 {
        self.gamma_base
    }

    pub fn gamma_eff(&self) -> f64 {
        self.gamma_eff
    }

    pub fn r_max_base(&self) -> f64 {
        self.r_max_base
    }

    pub fn r_max_c(&self) -> f64 {
        self.r_max_c
    }

    /// Upper end of the value range, `r_max_c / (1 − γ^c)`.
    pub fn v_max(&self) -> f64 {
        self.r_max_c / (1.0 - self.gamma_eff)
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn skills(&self) -> &PolicyTable {
        &self.skills
    }

    pub fn psi_c(&self, s: usize, z: usize, next: usize) -> &[f64] {
        let start = ((s * self.num_skills + z) * self.num_states + next) * self.dim;
        &self.psi_c[start..start + self.dim]
    }

    pub fn phi_c(&self, s: usize, z: usize) -> &[f64] {
        let start = (s * self.num_skills + z) * self.dim;
        &self.phi_c[start..start + self.dim]
    }

    /// `Φ_c` as a feature table for regression.
    pub fn composed_features(&self) -> FeatureTable {
        FeatureTable {
            num_states: self.num_states,
            num_choices: self.num_skills,
            dim: self.dim,
            data: self.phi_c.clone(),
        }
    }

    /// Check the structural invariants of the composition.
    pub fn validate(&self) -> Result<()> {
        let phi_bound = geometric_sum(self.gamma_base, self.c) * (1.0 + 1e-12);
        if self.psi_c.iter().any(|x| x.abs() > 1.0 + 1e-12) {
            return Err(HorlError::InvariantViolated(
                "an entry of Ψ_c exceeds 1".into(),
            ));
        }
        if self.phi_c.iter().any(|x| x.abs() > phi_bound) {
            return Err(HorlError::InvariantViolated(
                "an entry of Φ_c exceeds the discounted window length".into(),
            ));
        }
        let expected = (1.0 - self.gamma_eff) / (1.0 - self.gamma_base) * self.r_max_base;
        if (expected - self.r_max_c).abs() > 1e-12 * expected.max(1.0) {
            return Err(HorlError::InvariantViolated(
                "r_max_c is not the geometric sum".into(),
            ));
        }
        Ok(())
    }
}
