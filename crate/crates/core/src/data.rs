//! Behavior policies with latent skills, trajectory sampling, segmentation
//! into fixed-length skill windows, relabelling into high-level transitions,
//! and count-based skill estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HorlError, Result};
use crate::mdp::{
    check_skills, geometric_sum, sample_index, LinearTabularMDP, PointMassEnv, PolicyKind,
    PolicyTable, RewardMode, TabularModel,
};

/// A skill prior `Z(z | s)` together with the primitives `β(a | s, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    prior: PolicyTable,
    skills: PolicyTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkillStyle {
    /// Skill `k` always plays action `k`.
    ActionsAsSkills,
    /// Each `(s, z)` plays one uniformly drawn action.
    RandomDeterministic,
    /// Each `(s, z)` is a softmax of Gaussian logits.
    SoftmaxDiverse,
}

impl BehaviorPolicy {
    pub fn new(prior: PolicyTable, skills: PolicyTable) -> Result<Self> {
        if prior.kind() != PolicyKind::HighLevel {
            return Err(invalid("prior", "skill prior must be a high-level table"));
        }
        let PolicyKind::LowLevel { num_skills } = skills.kind() else {
            return Err(invalid("skills", "primitives must be a low-level table"));
        };
        if prior.num_choices() != num_skills || prior.num_rows() != skills.num_states() {
            return Err(invalid(
                "prior",
                format!(
                    "prior is {}x{} but primitives cover {} states and {} skills",
                    prior.num_rows(),
                    prior.num_choices(),
                    skills.num_states(),
                    num_skills
                ),
            ));
        }
        Ok(Self { prior, skills })
    }

    /// Primitives with a state-independent uniform prior.
    pub fn with_uniform_prior(skills: PolicyTable) -> Result<Self> {
        let prior = PolicyTable::uniform(
            PolicyKind::HighLevel,
            skills.num_states(),
            skills.num_skills(),
        )?;
        Self::new(prior, skills)
    }

    pub fn prior(&self) -> &PolicyTable {
        &self.prior
    }

    pub fn skills(&self) -> &PolicyTable {
        &self.skills
    }

    pub fn num_skills(&self) -> usize {
        self.skills.num_skills()
    }

    pub fn num_states(&self) -> usize {
        self.skills.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.skills.num_choices()
    }
}

pub fn make_behavior_policy(
    mdp: &LinearTabularMDP,
    k: usize,
    style: SkillStyle,
    seed: u64,
) -> Result<BehaviorPolicy> {
    if k < 1 {
        return Err(invalid("num_skills", "need at least one skill"));
    }
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let kind = PolicyKind::LowLevel { num_skills: k };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skills = match style {
        SkillStyle::ActionsAsSkills => {
            if k != na {
                return Err(invalid(
                    "num_skills",
                    format!("actions-as-skills needs K = num_actions = {na}, got {k}"),
                ));
            }
            let choices: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
            PolicyTable::deterministic(kind, na, &choices)?
        }
        SkillStyle::RandomDeterministic => {
            let choices: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..na)).collect();
            PolicyTable::deterministic(kind, na, &choices)?
        }
        SkillStyle::SoftmaxDiverse => {
            let logit = Normal::new(0.0, 2.0).expect("valid normal");
            let mut probs = vec![0.0; n * k * na];
            for row in probs.chunks_mut(na) {
                for p in row.iter_mut() {
                    *p = logit.sample(&mut rng);
                }
                softmax_in_place(row);
            }
            let table = PolicyTable::new(kind, n * k, na, probs)?;
            for z1 in 0..k {
                for z2 in z1 + 1..k {
                    let differs = (0..n).any(|s| {
                        table
                            .skill_row(s, z1)
                            .iter()
                            .zip(table.skill_row(s, z2))
                            .any(|(a, b)| a != b)
                    });
                    if !differs {
                        return Err(HorlError::InvariantViolated(format!(
                            "skills {z1} and {z2} coincide"
                        )));
                    }
                }
            }
            table
        }
    };
    check_skills(mdp, &skills)?;
    BehaviorPolicy::with_uniform_prior(skills)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in row.iter_mut() {
        *p = (*p - m).exp();
        total += *p;
    }
    for p in row.iter_mut() {
        *p /= total;
    }
    // Renormalise once more so the row sum is exact to rounding.
    let total: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= total;
    }
}

/// One rollout. `states` has one more entry than `actions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    /// Hidden skill active at each step.
    pub skills: Vec<usize>,
    /// Steps at which a fresh skill was drawn.
    pub skill_draws: Vec<usize>,
}

impl<S, A> Trajectory<S, A> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub type TabularTrajectory = Trajectory<usize, usize>;
pub type ContinuousTrajectory = Trajectory<Vec<f64>, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub num_trajectories: usize,
    pub horizon: usize,
    pub resample_skill_every: usize,
    /// Shifts skill boundaries away from the segmentation grid; 0 keeps them aligned.
    #[serde(default)]
    pub phase_offset: usize,
    #[serde(default)]
    pub reward_mode: RewardMode,
}

impl SamplingConfig {
    pub fn aligned(num_trajectories: usize, horizon: usize, c: usize) -> Self {
        Self {
            num_trajectories,
            horizon,
            resample_skill_every: c,
            phase_offset: 0,
            reward_mode: RewardMode::Expected,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trajectories < 1 {
            return Err(invalid("num_trajectories", "need at least one trajectory"));
        }
        if self.resample_skill_every < 1 {
            return Err(invalid("resample_skill_every", "must be at least 1"));
        }
        if self.horizon < self.resample_skill_every {
            return Err(invalid("horizon", "must be at least resample_skill_every"));
        }
        Ok(())
    }

    fn draws_at(&self, t: usize) -> bool {
        t == 0 || (t + self.phase_offset) % self.resample_skill_every == 0
    }
}

/// Roll out the behavior policy from `μ0`; a pure function of the inputs.
pub fn sample_trajectories(
    mdp: &LinearTabularMDP,
    behavior: &BehaviorPolicy,
    config: &SamplingConfig,
    seed: u64,
) -> Result<Vec<TabularTrajectory>> {
    config.validate()?;
    check_skills(mdp, behavior.skills())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = mdp.dense();
    let mut out = Vec::with_capacity(config.num_trajectories);
    for _ in 0..config.num_trajectories {
        let mut s = sample_index(&mut rng, mdp.mu0());
        let mut traj = Trajectory {
            states: vec![s],
            actions: Vec::with_capacity(config.horizon),
            rewards: Vec::with_capacity(config.horizon),
            skills: Vec::with_capacity(config.horizon),
            skill_draws: Vec::new(),
        };
        let mut z = 0;
        for t in 0..config.horizon {
            if config.draws_at(t) {
                z = sample_index(&mut rng, behavior.prior().row(s));
                traj.skill_draws.push(t);
            }
            let a = sample_index(&mut rng, behavior.skills().skill_row(s, z));
            let mean = dense.reward(s, a);
            let r = match config.reward_mode {
                RewardMode::Expected => mean,
                RewardMode::Bernoulli => {
                    if rng.random::<f64>() < mean / mdp.r_max() {
                        mdp.r_max()
                    } else {
                        0.0
                    }
                }
            };
            let next = sample_index(&mut rng, dense.row(s, a));
            traj.actions.push(a);
            traj.rewards.push(r);
            traj.skills.push(z);
            traj.states.push(next);
            s = next;
        }
        out.push(traj);
    }
    Ok(out)
}

/// Scripted two-route behavior on the point-mass testbed: skill 0 runs right
/// along the bottom corridor then up, skill 1 runs up then right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorBehavior {
    pub speed: f64,
    pub noise: f64,
    pub turn_at: f64,
}

impl Default for CorridorBehavior {
    fn default() -> Self {
        Self {
            speed: 0.08,
            noise: 0.02,
            turn_at: 0.85,
        }
    }
}

impl CorridorBehavior {
    pub fn mean_action(&self, s: [f64; 2], route: usize) -> [f64; 2] {
        let (lead, other) = if route == 0 { (0, 1) } else { (1, 0) };
        let mut a = [0.0; 2];
        if s[lead] < self.turn_at {
            a[lead] = self.speed;
        } else {
            a[other] = self.speed;
        }
        a
    }
}

/// Roll out the corridor behavior; the route is drawn once per trajectory
/// with equal probability and recorded as the hidden skill.
pub fn sample_point_mass(
    env: &PointMassEnv,
    behavior: &CorridorBehavior,
    num_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ContinuousTrajectory>> {
    if num_trajectories < 1 || horizon < 1 {
        return Err(invalid(
            "num_trajectories",
            "need at least one trajectory of one step",
        ));
    }
    let noise = Normal::new(0.0, behavior.noise).map_err(|e| invalid("noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_trajectories);
    for _ in 0..num_trajectories {
        let route = rng.random_range(0..2usize);
        let mut s = env.reset(&mut rng);
        let mut traj = Trajectory {
            states: vec![s.to_vec()],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            skills: vec![route; horizon],
            skill_draws: vec![0],
        };
        for _ in 0..horizon {
            let mean = behavior.mean_action(s, route);
            let a = env.clip_action([
                mean[0] + noise.sample(&mut rng),
                mean[1] + noise.sample(&mut rng),
            ]);
            let (next, r) = env.step(s, a);
            traj.actions.push(a.to_vec());
            traj.rewards.push(r);
            traj.states.push(next.to_vec());
            s = next;
        }
        out.push(traj);
    }
    Ok(out)
}

/// A length-`c` window of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment<S, A> {
    /// `s_0 .. s_{c-1}`.
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    /// Hidden skill at each step; the segment's label is the first entry.
    pub skills: Vec<usize>,
    /// `s_c`, the state after the window.
    pub next_state: S,
    pub trajectory: usize,
    pub offset: usize,
}

impl<S, A> Segment<S, A> {
    pub fn start(&self) -> &S {
        &self.states[0]
    }

    pub fn skill(&self) -> usize {
        self.skills[0]
    }
}

/// The primitive-learning dataset: non-overlapping windows of exactly `c` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDataset<S, A> {
    pub c: usize,
    pub segments: Vec<Segment<S, A>>,
    /// Trailing steps that did not fill a window.
    pub dropped: usize,
    pub total_steps: usize,
}

impl<S, A> SkillDataset<S, A> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

pub fn segment_low_dataset<S: Clone, A: Clone>(
    trajectories: &[Trajectory<S, A>],
    c: usize,
) -> Result<SkillDataset<S, A>> {
    if c < 1 {
        return Err(invalid(
            "c",
            "skill length must be at least 1 (SkillConfig invariant c ≥ 1)",
        ));
    }
    let mut segments = Vec::new();
    let mut dropped = 0;
    let mut total_steps = 0;
    for (ti, traj) in trajectories.iter().enumerate() {
        let len = traj.len();
        total_steps += len;
        dropped += len % c;
        for w in 0..len / c {
            let lo = w * c;
            let hi = lo + c;
            segments.push(Segment {
                states: traj.states[lo..hi].to_vec(),
                actions: traj.actions[lo..hi].to_vec(),
                rewards: traj.rewards[lo..hi].to_vec(),
                skills: traj.skills[lo..hi].to_vec(),
                next_state: traj.states[hi].clone(),
                trajectory: ti,
                offset: lo,
            });
        }
    }
    if segments.is_empty() {
        return Err(invalid(
            "c",
            format!("skill length {c} exceeds every trajectory length"),
        ));
    }
    Ok(SkillDataset {
        c,
        segments,
        dropped,
        total_steps,
    })
}

/// `(s_0, z, R, s_c)` with `R = Σ_{t<c} γ^t r_t`. `weight` is 1 for sampled
/// data; exact-expectation datasets use it to carry transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighTuple<S, Z> {
    pub s0: S,
    pub z: Z,
    pub reward: f64,
    pub s_c: S,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLevelDataset<S, Z> {
    pub c: usize,
    pub gamma: f64,
    pub tuples: Vec<HighTuple<S, Z>>,
}

impl<S, Z> HighLevelDataset<S, Z> {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Check every aggregated reward lies in `[0, r_max_c]`.
    pub fn check_reward_range(&self, r_max: f64) -> Result<()> {
        let hi = geometric_sum(self.gamma, self.c) * r_max;
        for (i, t) in self.tuples.iter().enumerate() {
            if !(t.reward >= -1e-12 && t.reward <= hi + 1e-12) {
                return Err(HorlError::InvariantViolated(format!(
                    "tuple {i}: aggregated reward {} outside [0, {hi}]",
                    t.reward
                )));
            }
        }
        Ok(())
    }
}

/// Assigns a high-level skill to a segment.
pub trait SkillLabeler<S, A> {
    type Skill;
    fn label(&self, segment: &Segment<S, A>) -> Result<Self::Skill>;
}

/// Uses the hidden skill recorded at the window start.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruth;

impl<S, A> SkillLabeler<S, A> for GroundTruth {
    type Skill = usize;

    fn label(&self, segment: &Segment<S, A>) -> Result<usize> {
        Ok(segment.skill())
    }
}

pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        total += disc * r;
        disc *= gamma;
    }
    total
}

pub fn relabel_high_dataset<S: Clone, A, L: SkillLabeler<S, A>>(
    dataset: &SkillDataset<S, A>,
    labeler: &L,
    gamma: f64,
) -> Result<HighLevelDataset<S, L::Skill>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid("gamma", "must lie in [0, 1)"));
    }
    let tuples = dataset
        .segments
        .iter()
        .map(|seg| {
            Ok(HighTuple {
                s0: seg.start().clone(),
                z: labeler.label(seg)?,
                reward: discounted_sum(&seg.rewards, gamma),
                s_c: seg.next_state.clone(),
                weight: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HighLevelDataset {
        c: dataset.c,
        gamma,
        tuples,
    })
}

/// Count-based estimate of `β(a | s, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPrimitive {
    pub table: PolicyTable,
    /// Visits per `(s, z)` row.
    pub visits: Vec<usize>,
}

/// Smoothed empirical action frequencies per `(s, z)`, keyed by the hidden
/// skill active at each step. Unseen rows are uniform.
pub fn fit_tabular_primitive(
    dataset: &SkillDataset<usize, usize>,
    num_states: usize,
    num_skills: usize,
    num_actions: usize,
    smoothing: f64,
) -> Result<TabularPrimitive> {
    if dataset.is_empty() {
        return Err(HorlError::Empty("skill dataset"));
    }
    if !(smoothing >= 0.0) {
        return Err(invalid("smoothing", "must be nonnegative"));
    }
    let rows = num_states * num_skills;
    let mut counts = vec![0.0; rows * num_actions];
    let mut visits = vec![0usize; rows];
    for seg in &dataset.segments {
        for ((&s, &a), &z) in seg.states.iter().zip(&seg.actions).zip(&seg.skills) {
            if s >= num_states || z >= num_skills || a >= num_actions {
                return Err(HorlError::IndexOutOfRange {
                    what: "dataset entry",
                    index: s.max(z).max(a),
                    limit: num_states.min(num_skills).min(num_actions),
                });
            }
            let row = s * num_skills + z;
            counts[row * num_actions + a] += 1.0;
            visits[row] += 1;
        }
    }
    let uniform = 1.0 / num_actions as f64;
    for (row, &n) in visits.iter().enumerate() {
        let cells = &mut counts[row * num_actions..(row + 1) * num_actions];
        let denom = n as f64 + smoothing * num_actions as f64;
        if denom == 0.0 {
            cells.fill(uniform);
        } else {
            for x in cells.iter_mut() {
                *x = (*x + smoothing) / denom;
            }
        }
    }
    let table = PolicyTable::new(
        PolicyKind::LowLevel { num_skills },
        rows,
        num_actions,
        counts,
    )?;
    Ok(TabularPrimitive { table, visits })
}

/// `Σ_{s,z} w(s,z) · TV(π̂(·|s,z), β(·|s,z))` for a row weighting `w`.
pub fn weighted_primitive_tv(
    estimate: &PolicyTable,
    truth: &PolicyTable,
    weights: &[f64],
) -> Result<f64> {
    if estimate.num_rows() != truth.num_rows() || estimate.num_choices() != truth.num_choices() {
        return Err(invalid(
            "estimate",
            "shape differs from the reference primitives",
        ));
    }
    if weights.len() != truth.num_rows() {
        return Err(HorlError::DimensionMismatch {
            expected: truth.num_rows(),
            got: weights.len(),
            context: "row weights",
        });
    }
    Ok((0..truth.num_rows())
        .map(|r| {
            let tv: f64 = estimate
                .row(r)
                .iter()
                .zip(truth.row(r))
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                * 0.5;
            weights[r] * tv
        })
        .sum())
}

/// Largest per-row TV between two equally shaped tables.
pub fn max_row_tv(estimate: &PolicyTable, truth: &PolicyTable) -> Result<f64> {
    let rows = truth.num_rows();
    let mut worst = 0.0f64;
    for r in 0..rows {
        let mut w = vec![0.0; rows];
        w[r] = 1.0;
        worst = worst.max(weighted_primitive_tv(estimate, truth, &w)?);
    }
    Ok(worst)
}

/// Summary written next to exported datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub c: usize,
    pub gamma: f64,
    pub seed: u64,
    pub num_trajectories: usize,
    pub total_steps: usize,
    pub num_segments: usize,
    pub dropped_steps: usize,
}

impl DatasetManifest {
    pub fn describe<S, A>(
        dataset: &SkillDataset<S, A>,
        gamma: f64,
        seed: u64,
        num_trajectories: usize,
    ) -> Self {
        Self {
            c: dataset.c,
            gamma,
            seed,
            num_trajectories,
            total_steps: dataset.total_steps,
            num_segments: dataset.len(),
            dropped_steps: dataset.dropped,
        }
    }
}
