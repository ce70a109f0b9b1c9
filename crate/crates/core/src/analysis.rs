//! Error accounting: total-variation tools, the skill / offline /
//! representation decomposition of suboptimality, the coverage coefficient,
//! the combined bound, and the similarity metric for continuous decisions.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::HighLevelDataset;
use crate::error::{invalid, HorlError, Result};
use crate::mdp::{
    dirichlet, discounted_visitation, exact_value_iteration, exact_value_iteration_as,
    induced_kernel, policy_value, skill_kernel, FeatureTable, HyperMDP, LinearTabularMDP,
    PolicyKind, PolicyTable, TabularModel, VI_TOL,
};

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(HorlError::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
            context: "total variation operands",
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `√(ln(|Π|/δ) / N)`.
pub fn primitive_error_bound(class_size: f64, delta: f64, n: usize) -> Result<f64> {
    if !(class_size >= 1.0) {
        return Err(invalid(
            "class_size",
            "policy class must contain at least one policy",
        ));
    }
    primitive_error_bound_ln(class_size.ln(), delta, n)
}

/// As [`primitive_error_bound`] with `ln |Π|` given directly, for classes
/// too large to represent as a float.
pub fn primitive_error_bound_ln(ln_class_size: f64, delta: f64, n: usize) -> Result<f64> {
    if !(ln_class_size >= 0.0) {
        return Err(invalid(
            "class_size",
            "policy class must contain at least one policy",
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "must lie in (0, 1)"));
    }
    if n < 1 {
        return Err(invalid("n", "need at least one sample"));
    }
    Ok(((ln_class_size - delta.ln()) / n as f64).sqrt())
}

/// `ln` of the number of tables whose rows are empirical frequencies of `n`
/// draws over `num_actions` outcomes: `rows · ln C(n + A − 1, A − 1)`.
pub fn count_quantized_class_ln_size(num_rows: usize, num_actions: usize, n: usize) -> f64 {
    let k = num_actions.saturating_sub(1);
    let ln_binom: f64 = (1..=k)
        .map(|i| ((n + i) as f64).ln() - (i as f64).ln())
        .sum();
    num_rows as f64 * ln_binom
}

/// Shared coefficient of the skill-learning and representation terms:
/// `γ c (c+1) r_max / ((1−γ)(1−γ^c))`.
pub fn horizon_coefficient(gamma: f64, c: usize, r_max: f64) -> f64 {
    let c_f = c as f64;
    gamma * c_f * (c_f + 1.0) * r_max / ((1.0 - gamma) * (1.0 - gamma.powi(c as i32)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eps_theta: f64,
    pub eps_omega: f64,
    pub c_dagger: f64,
    pub d: usize,
    pub n: usize,
    pub c: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub delta: f64,
    pub constant: f64,
    pub zeta: f64,
}

impl BoundInputs {
    /// Fill `zeta` from the bonus schedule so the two stay consistent.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        eps_theta: f64,
        eps_omega: f64,
        c_dagger: f64,
        d: usize,
        n: usize,
        c: usize,
        gamma: f64,
        r_max: f64,
        delta: f64,
        constant: f64,
    ) -> Result<Self> {
        let schedule = crate::pevi::compute_beta_schedule(d, n, gamma, c, delta, constant, r_max)?;
        Ok(Self {
            eps_theta,
            eps_omega,
            c_dagger,
            d,
            n,
            c,
            gamma,
            r_max,
            delta,
            constant,
            zeta: schedule.zeta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub offline: f64,
    pub skill: f64,
    pub total: f64,
}

pub fn theorem1_terms(inputs: &BoundInputs) -> Result<BoundTerms> {
    if !inputs.c_dagger.is_finite() {
        return Err(HorlError::InfiniteCoverage);
    }
    if inputs.c < 1 || inputs.n < 1 {
        return Err(invalid("c", "c and N must be at least 1"));
    }
    let g = inputs.gamma;
    let gap = (1.0 - g) * (1.0 - g.powi(inputs.c as i32));
    let d = inputs.d as f64;
    let offline = 2.0 * inputs.constant * inputs.r_max / gap
        * (inputs.c_dagger * d.powi(3) * inputs.zeta / inputs.n as f64).sqrt();
    let skill =
        horizon_coefficient(g, inputs.c, inputs.r_max) * (inputs.eps_omega + inputs.eps_theta);
    Ok(BoundTerms {
        offline,
        skill,
        total: offline + skill,
    })
}

pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(theorem1_terms(inputs)?.total)
}

/// For each window start `s_t`, the chain followed inside the window and the
/// discrepancy against the comparison chain at every intermediate state.
/// Returns `ε_k` for `k = 1..=c`:
/// `ε_k = Σ_{s_t} d^c(s_t) Σ_{s'} K_{s_t}^{k-1}(s_t, s') δ_{s_t}(s')`, where
/// `d^c` is the every-`c`-step discounted visitation of the primary chain.
pub fn windowed_epsilon<K, D>(
    num_states: usize,
    c: usize,
    gamma: f64,
    mu0: &[f64],
    window_kernel: K,
    discrepancy: D,
) -> Result<Vec<f64>>
where
    K: Fn(usize) -> DMatrix<f64>,
    D: Fn(usize, usize) -> f64,
{
    if c < 1 {
        return Err(invalid("c", "skill length must be at least 1"));
    }
    let n = num_states;
    let mut reach_rows: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
    let mut c_step = DMatrix::<f64>::zeros(n, n);
    for st in 0..n {
        let kernel = window_kernel(st);
        let mut row = DVector::<f64>::zeros(n);
        row[st] = 1.0;
        let mut rows = Vec::with_capacity(c);
        for _ in 0..c {
            rows.push(row.clone());
            row = kernel.transpose() * row;
        }
        c_step.set_row(st, &row.transpose());
        reach_rows.push(rows);
    }
    let gc = gamma.powi(c as i32);
    let visitation = crate::mdp::visitation_from_kernel(&c_step, gc, mu0)?;
    let mut eps = vec![0.0; c];
    for st in 0..n {
        if visitation[st] == 0.0 {
            continue;
        }
        for (k, row) in reach_rows[st].iter().enumerate() {
            let inner: f64 = (0..n).map(|s| row[s] * discrepancy(st, s)).sum();
            eps[k] += visitation[st] * inner;
        }
    }
    Ok(eps)
}

/// Two state chains sharing a state space, a state reward and a start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvInstance {
    pub num_states: usize,
    /// Row-major `P_1(s' | s)`.
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub c: usize,
    pub start: usize,
}

impl TvInstance {
    /// Random instance with at most `max_states` states and `max_c` window
    /// length. The second kernel mixes the first with fresh rows at a random
    /// strength, from identical to unrelated.
    pub fn random(seed: u64, max_states: usize, max_c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=max_states.max(1));
        let c = rng.random_range(1..=max_c.max(1));
        let gamma = rng.random_range(0.3..0.99);
        let mix: f64 = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let point_masses = rng.random_bool(0.25);
        let draw_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if point_masses {
                let mut row = vec![0.0; n];
                row[rng.random_range(0..n)] = 1.0;
                row
            } else {
                dirichlet(rng, n, 0.5)
            }
        };
        let mut p1 = Vec::with_capacity(n * n);
        let mut p2 = Vec::with_capacity(n * n);
        for _ in 0..n {
            let a = draw_row(&mut rng);
            let b = draw_row(&mut rng);
            p2.extend(a.iter().zip(&b).map(|(x, y)| (1.0 - mix) * x + mix * y));
            p1.extend(a);
        }
        let reward = (0..n).map(|_| rng.random::<f64>()).collect();
        let start = rng.random_range(0..n);
        Self {
            num_states: n,
            p1,
            p2,
            reward,
            gamma,
            c,
            start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub epsilon: f64,
    pub holds: bool,
}

fn check_stochastic(kernel: &[f64], n: usize, what: &'static str) -> Result<()> {
    if kernel.len() != n * n {
        return Err(HorlError::DimensionMismatch {
            expected: n * n,
            got: kernel.len(),
            context: what,
        });
    }
    for row in kernel.chunks(n) {
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-10 {
            return Err(invalid(what, "kernel rows must be probability vectors"));
        }
    }
    Ok(())
}

/// `|J(M_1) − J(M_2)|` against `γ c (c+1) r_max / ((1−γ^c)(1−γ)) · ε`.
pub fn tv_subopt_check(inst: &TvInstance) -> Result<TvCheck> {
    let n = inst.num_states;
    check_stochastic(&inst.p1, n, "p1")?;
    check_stochastic(&inst.p2, n, "p2")?;
    if inst.reward.len() != n || inst.start >= n {
        return Err(invalid(
            "reward",
            "reward and start must index the state space",
        ));
    }
    let p1 = DMatrix::from_row_slice(n, n, &inst.p1);
    let p2 = DMatrix::from_row_slice(n, n, &inst.p2);
    let r = DVector::from_column_slice(&inst.reward);
    let value = |p: &DMatrix<f64>| -> Result<f64> {
        let sys = DMatrix::<f64>::identity(n, n) - p * inst.gamma;
        let v = sys
            .lu()
            .solve(&r)
            .ok_or_else(|| HorlError::Singular("I − γP".into()))?;
        Ok(v[inst.start])
    };
    let lhs = (value(&p1)? - value(&p2)?).abs();
    let mut mu = vec![0.0; n];
    mu[inst.start] = 1.0;
    let eps = windowed_epsilon(
        n,
        inst.c,
        inst.gamma,
        &mu,
        |_| p1.clone(),
        |_, s| tv_unchecked(&inst.p1[s * n..(s + 1) * n], &inst.p2[s * n..(s + 1) * n]),
    )?;
    let epsilon = eps.iter().copied().fold(0.0, f64::max);
    let r_max = inst.reward.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let g = inst.gamma;
    let c = inst.c as f64;
    let rhs = g * c * (c + 1.0) * r_max / ((1.0 - g.powi(inst.c as i32)) * (1.0 - g)) * epsilon;
    Ok(TvCheck {
        lhs,
        rhs,
        epsilon,
        holds: lhs <= rhs + 1e-10,
    })
}

/// Inverse primitive model and the worst windowed next-state mismatch it
/// leaves over a class of flat policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationError {
    pub eps_omega: f64,
    /// `omega[i][s]`: skill chosen for class member `i` at state `s`.
    pub omega: Vec<Vec<usize>>,
    /// `per_policy[i][k-1]`: `ε_k` for class member `i`.
    pub per_policy: Vec<Vec<f64>>,
}

/// Next-state law of a flat policy at `s`.
fn flat_next_law(mdp: &LinearTabularMDP, policy: &PolicyTable, s: usize) -> Vec<f64> {
    let dense = mdp.dense();
    let mut out = vec![0.0; mdp.num_states()];
    for (a, &p) in policy.row(s).iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(dense.row(s, a)) {
            *o += p * q;
        }
    }
    out
}

fn skill_next_law(mdp: &LinearTabularMDP, skills: &PolicyTable, s: usize, z: usize) -> Vec<f64> {
    let dense = mdp.dense();
    let mut out = vec![0.0; mdp.num_states()];
    for (a, &p) in skills.skill_row(s, z).iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(dense.row(s, a)) {
            *o += p * q;
        }
    }
    out
}

pub fn representation_error(
    mdp: &LinearTabularMDP,
    skills: &PolicyTable,
    class: &[PolicyTable],
    c: usize,
) -> Result<RepresentationError> {
    if class.is_empty() {
        return Err(HorlError::Empty("policy class"));
    }
    crate::mdp::check_skills(mdp, skills)?;
    let n = mdp.num_states();
    let k_skills = skills.num_skills();
    let skill_laws: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|s| {
            (0..k_skills)
                .map(|z| skill_next_law(mdp, skills, s, z))
                .collect()
        })
        .collect();
    let mut omega = Vec::with_capacity(class.len());
    let mut per_policy = Vec::with_capacity(class.len());
    let mut worst = 0.0f64;
    for policy in class {
        if policy.kind() != PolicyKind::Flat {
            return Err(invalid("class", "class members must be flat policies"));
        }
        let laws: Vec<Vec<f64>> = (0..n).map(|s| flat_next_law(mdp, policy, s)).collect();
        let choice: Vec<usize> = (0..n)
            .map(|s| {
                let mut best = 0;
                let mut best_tv = f64::INFINITY;
                for z in 0..k_skills {
                    let tv = tv_unchecked(&laws[s], &skill_laws[s][z]);
                    if tv < best_tv {
                        best_tv = tv;
                        best = z;
                    }
                }
                best
            })
            .collect();
        let kernel = induced_kernel(mdp, policy)?;
        let eps = windowed_epsilon(
            n,
            c,
            mdp.gamma(),
            mdp.mu0(),
            |_| kernel.clone(),
            |st, s| tv_unchecked(&laws[s], &skill_laws[s][choice[st]]),
        )?;
        worst = eps.iter().copied().fold(worst, f64::max);
        omega.push(choice);
        per_policy.push(eps);
    }
    Ok(RepresentationError {
        eps_omega: worst,
        omega,
        per_policy,
    })
}

/// Largest generalised eigenvalue of `(Σ_{π,s}, Σ_D)` over anchor states
/// with positive initial mass, where `Σ_{π,s}` is the feature second moment
/// under the normalised discounted visitation of `policy` from `s` and
/// `Σ_D` the dataset's mean feature outer product. Infinite when the data
/// leave a needed direction uncovered.
pub fn concentration_coefficient(
    data: &HighLevelDataset<usize, usize>,
    hyper: &HyperMDP,
    features: &FeatureTable,
    policy: &PolicyTable,
) -> Result<f64> {
    if data.is_empty() {
        return Err(HorlError::Empty("high-level dataset"));
    }
    let d = features.dim();
    let total_weight: f64 = data.tuples.iter().map(|t| t.weight).sum();
    let mut sigma_d = DMatrix::<f64>::zeros(d, d);
    for t in &data.tuples {
        let phi = DVector::from_column_slice(features.get(t.s0, t.z));
        sigma_d += &phi * phi.transpose() * (t.weight / total_weight);
    }
    let n = hyper.num_states();
    let mut worst = 0.0f64;
    for anchor in 0..n {
        if hyper.dense().mu0()[anchor] <= 0.0 {
            continue;
        }
        let mut start = vec![0.0; n];
        start[anchor] = 1.0;
        let visit = discounted_visitation(hyper, policy, &start)?;
        let mut sigma_pi = DMatrix::<f64>::zeros(d, d);
        for (s, &w) in visit.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (z, &p) in policy.row(s).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let phi = DVector::from_column_slice(features.get(s, z));
                sigma_pi += &phi * phi.transpose() * (w * p);
            }
        }
        worst = worst.max(generalized_max_eigenvalue(&sigma_pi, &sigma_d));
        if worst.is_infinite() {
            break;
        }
    }
    Ok(worst)
}

/// `sup_x xᵀAx / xᵀBx` for symmetric PSD `A`, `B`; infinite if `A` has mass
/// on the null space of `B`.
pub fn generalized_max_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = b.nrows();
    let scale = b.amax().max(a.amax()).max(1e-300);
    let tol = 1e-10 * scale;
    if let Some(chol) = Cholesky::new(b.clone()) {
        let eig_b = SymmetricEigen::new(b.clone());
        if eig_b.eigenvalues.min() > tol {
            let l = chol.l();
            let linv = l
                .clone()
                .try_inverse()
                .unwrap_or_else(|| DMatrix::identity(d, d));
            let m = &linv * a * linv.transpose();
            let m = (&m + m.transpose()) * 0.5;
            return SymmetricEigen::new(m).eigenvalues.max().max(0.0);
        }
    }
    let eig = SymmetricEigen::new(b.clone());
    let mut range = Vec::new();
    let mut null = Vec::new();
    for i in 0..d {
        if eig.eigenvalues[i] > tol {
            range.push(i);
        } else {
            null.push(i);
        }
    }
    for &i in &null {
        let v = eig.eigenvectors.column(i);
        let leak = (a * v).norm();
        if leak > tol {
            return f64::INFINITY;
        }
    }
    if range.is_empty() {
        return 0.0;
    }
    // Restrict to the range of B: whitened A = D^{-1/2} Uᵀ A U D^{-1/2}.
    let r = range.len();
    let mut m = DMatrix::<f64>::zeros(r, r);
    for (ii, &i) in range.iter().enumerate() {
        for (jj, &j) in range.iter().enumerate() {
            let vi = eig.eigenvectors.column(i);
            let vj = eig.eigenvectors.column(j);
            let aij = (vi.transpose() * a * vj)[(0, 0)];
            m[(ii, jj)] = aij / (eig.eigenvalues[i] * eig.eigenvalues[j]).sqrt();
        }
    }
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.max().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub j_learned: f64,
    pub j_pevi_behavior: f64,
    pub j_best_behavior: f64,
    pub j_optimal: f64,
    pub primitive_error: f64,
    pub offline_error: f64,
    pub representation_error: f64,
    pub total_subopt: f64,
}

impl DecompositionReport {
    pub fn from_values(
        j_learned: f64,
        j_pevi_behavior: f64,
        j_best_behavior: f64,
        j_optimal: f64,
    ) -> Self {
        Self {
            j_learned,
            j_pevi_behavior,
            j_best_behavior,
            j_optimal,
            primitive_error: j_pevi_behavior - j_learned,
            offline_error: j_best_behavior - j_pevi_behavior,
            representation_error: j_optimal - j_best_behavior,
            total_subopt: j_optimal - j_learned,
        }
    }

    pub fn residual(&self) -> f64 {
        (self.primitive_error + self.offline_error + self.representation_error - self.total_subopt)
            .abs()
    }
}

/// Exact decomposition of `J(π*) − J(π̂_θ)`, where the high-level policy
/// is executed once with the true primitives and once with the learned ones.
pub fn suboptimality_decomposition(
    mdp: &LinearTabularMDP,
    hyper: &HyperMDP,
    learned_low: &PolicyTable,
    high_policy: &PolicyTable,
) -> Result<DecompositionReport> {
    let learned_hyper = HyperMDP::build(mdp, learned_low, hyper.c())?;
    let j_learned = policy_value(&learned_hyper, high_policy)?;
    let j_pevi = policy_value(hyper, high_policy)?;
    let best_behavior = exact_value_iteration_as(hyper, VI_TOL, PolicyKind::HighLevel)?;
    let j_best = policy_value(hyper, &best_behavior.policy)?;
    let optimal = exact_value_iteration(mdp, VI_TOL)?;
    let j_opt = policy_value(mdp, &optimal.policy)?;
    Ok(DecompositionReport::from_values(
        j_learned, j_pevi, j_best, j_opt,
    ))
}

/// Skill-learning audit: the measured gap against the bound with the
/// windowed action-level TV between learned and true primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveAudit {
    pub measured: f64,
    pub eps_theta: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn primitive_audit(
    mdp: &LinearTabularMDP,
    true_low: &PolicyTable,
    learned_low: &PolicyTable,
    high_policy: &PolicyTable,
    c: usize,
) -> Result<PrimitiveAudit> {
    let hyper_true = HyperMDP::build(mdp, true_low, c)?;
    let hyper_learned = HyperMDP::build(mdp, learned_low, c)?;
    let measured =
        policy_value(&hyper_true, high_policy)? - policy_value(&hyper_learned, high_policy)?;
    let n = mdp.num_states();
    let k = true_low.num_skills();
    let kernels: Vec<DMatrix<f64>> = (0..k).map(|z| skill_kernel(mdp, true_low, z)).collect();
    let eps = windowed_epsilon(
        n,
        c,
        mdp.gamma(),
        mdp.mu0(),
        |st| {
            let mut m = DMatrix::<f64>::zeros(n, n);
            for (z, &p) in high_policy.row(st).iter().enumerate() {
                if p != 0.0 {
                    m += &kernels[z] * p;
                }
            }
            m
        },
        |st, s| {
            high_policy
                .row(st)
                .iter()
                .enumerate()
                .map(|(z, &p)| {
                    p * tv_unchecked(true_low.skill_row(s, z), learned_low.skill_row(s, z))
                })
                .sum()
        },
    )?;
    let eps_theta = eps.iter().copied().fold(0.0, f64::max);
    let bound = horizon_coefficient(mdp.gamma(), c, mdp.r_max()) * eps_theta;
    Ok(PrimitiveAudit {
        measured,
        eps_theta,
        bound,
        holds: measured <= bound + 1e-10,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationAudit {
    pub measured: f64,
    pub eps_omega: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Representation audit with the flat optimum as the policy class.
pub fn representation_audit(
    mdp: &LinearTabularMDP,
    skills: &PolicyTable,
    c: usize,
) -> Result<RepresentationAudit> {
    let hyper = HyperMDP::build(mdp, skills, c)?;
    let flat = exact_value_iteration(mdp, VI_TOL)?;
    let best = exact_value_iteration_as(&hyper, VI_TOL, PolicyKind::HighLevel)?;
    let measured = policy_value(mdp, &flat.policy)? - policy_value(&hyper, &best.policy)?;
    let rep = representation_error(mdp, skills, std::slice::from_ref(&flat.policy), c)?;
    let bound = horizon_coefficient(mdp.gamma(), c, mdp.r_max()) * rep.eps_omega;
    Ok(RepresentationAudit {
        measured,
        eps_omega: rep.eps_omega,
        bound,
        holds: measured <= bound + 1e-10,
    })
}

/// Per decision, the smallest L1 action distance to a dataset pair whose
/// state lies within `state_radius` (L1); `+∞` when no state is close enough.
pub fn similarity_map(
    decisions: &[(Vec<f64>, Vec<f64>)],
    dataset: &[(Vec<f64>, Vec<f64>)],
    state_radius: f64,
) -> Vec<f64> {
    decisions
        .iter()
        .map(|(s, a)| {
            dataset
                .iter()
                .filter(|(ds, _)| l1(s, ds) <= state_radius)
                .map(|(_, da)| l1(a, da))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Median of the finite entries, `None` if there are none.
pub fn finite_median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("x", "need at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(invalid("y", "log-log slope needs strictly positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.5, 0.5], &[0.9, 0.1]).unwrap() - 0.4).abs() < 1e-15);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn primitive_bound_examples() {
        let e = primitive_error_bound(1.0, (-1.0f64).exp(), 1).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let e = primitive_error_bound(16.0, 0.1, 1000).unwrap();
        assert!((e - 0.071_240).abs() < 1e-5);
        let e4 = primitive_error_bound(16.0, 0.1, 4000).unwrap();
        assert!((e4 - e / 2.0).abs() < 1e-12);
        assert!(primitive_error_bound(0.5, 0.1, 10).is_err());
    }

    #[test]
    fn generalized_eigen_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let b = DMatrix::identity(2, 2);
        assert!((generalized_max_eigenvalue(&a, &b) - 2.0).abs() < 1e-12);
        assert!((generalized_max_eigenvalue(&a, &a) - 1.0).abs() < 1e-12);
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(generalized_max_eigenvalue(&a, &singular).is_infinite());
        let inside = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        assert!((generalized_max_eigenvalue(&inside, &singular) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 10.0, 100.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let data = vec![(vec![0.0, 0.0], vec![1.0, 0.0])];
        let eps = similarity_map(&[(vec![0.0, 0.0], vec![1.0, 0.0])], &data, 0.1);
        assert_eq!(eps, vec![0.0]);
        let eps = similarity_map(&[(vec![0.5, 0.0], vec![1.0, 0.0])], &data, 0.0);
        assert!(eps[0].is_infinite());
        assert_eq!(finite_median(&[1.0, f64::INFINITY, 3.0]), Some(2.0));
    }
}
