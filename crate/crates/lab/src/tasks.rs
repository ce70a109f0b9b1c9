//! Tabular task constructors shared by the experiments.

use anyhow::{Context, Result};
use horl_core::data::{make_behavior_policy, BehaviorPolicy};
use horl_core::mdp::{LinearTabularMDP, PolicyKind, PolicyTable};

use crate::config::{ChainTask, GeneratedTask, GradedGapTask, TaskSpec};

/// A tabular MDP with the behavior that generated its data.
#[derive(Debug, Clone)]
pub struct TabularTask {
    pub mdp: LinearTabularMDP,
    pub behavior: BehaviorPolicy,
    /// Skill windows per sampled trajectory.
    pub windows: usize,
}

impl TabularTask {
    pub fn num_skills(&self) -> usize {
        self.behavior.num_skills()
    }
}

/// `m` decision states and one absorbing terminal. Both actions end the
/// episode; action 1 beats action 0 by a gap that grows log-uniformly from
/// `5e−5` to `0.5` across states. Skills are the actions, and the behavior
/// prefers the worse one.
pub fn graded_gap(task: &GradedGapTask) -> Result<TabularTask> {
    let m = task.decision_states;
    let n = m + 1;
    let a = 2;
    let mut kernel = vec![0.0; n * a * n];
    let mut reward = vec![0.0; n * a];
    for s in 0..n {
        for act in 0..a {
            kernel[(s * a + act) * n + m] = 1.0;
        }
    }
    for s in 0..m {
        let gap = 10f64.powf(-4.0 + 4.0 * s as f64 / (m - 1) as f64);
        reward[s * a] = 0.5;
        reward[s * a + 1] = 0.5 + 0.5 * gap;
    }
    let mut mu0 = vec![1.0 / m as f64; n];
    mu0[m] = 0.0;
    let mdp = LinearTabularMDP::tabular_embedding(n, a, &kernel, &reward, task.gamma, 1.0, mu0)?;
    let choices: Vec<usize> = (0..n).flat_map(|_| 0..a).collect();
    let skills = PolicyTable::deterministic(PolicyKind::LowLevel { num_skills: a }, a, &choices)?;
    let prior: Vec<f64> = (0..n).flat_map(|_| [1.0 - task.better_share, task.better_share]).collect();
    let prior = PolicyTable::new(PolicyKind::HighLevel, n, a, prior)?;
    Ok(TabularTask {
        mdp,
        behavior: BehaviorPolicy::new(prior, skills)?,
        windows: task.windows,
    })
}

/// Chain of `length` states with actions left/stay/right, each slipping in
/// place with probability `slip`. Reward 1 at the right end. Skill `z`
/// repeats action `z` except for `noise` mass spread over all actions.
pub fn sparse_chain(task: &ChainTask) -> Result<TabularTask> {
    let n = task.length;
    let a = 3;
    let mut kernel = vec![0.0; n * a * n];
    let mut reward = vec![0.0; n * a];
    for s in 0..n {
        for act in 0..a {
            let target = match act {
                0 => s.saturating_sub(1),
                1 => s,
                _ => (s + 1).min(n - 1),
            };
            kernel[(s * a + act) * n + target] += 1.0 - task.slip;
            kernel[(s * a + act) * n + s] += task.slip;
            if s == n - 1 {
                reward[s * a + act] = 1.0;
            }
        }
    }
    let mu0 = vec![1.0 / n as f64; n];
    let mdp = LinearTabularMDP::tabular_embedding(n, a, &kernel, &reward, task.gamma, 1.0, mu0)?;
    let spread = task.noise / a as f64;
    let probs: Vec<f64> = (0..n * a)
        .flat_map(|row| {
            let z = row % a;
            (0..a).map(move |act| if act == z { 1.0 - task.noise + spread } else { spread })
        })
        .collect();
    let skills = PolicyTable::new(PolicyKind::LowLevel { num_skills: a }, n * a, a, probs)?;
    Ok(TabularTask {
        mdp,
        behavior: BehaviorPolicy::with_uniform_prior(skills)?,
        windows: task.windows,
    })
}

fn pick(range: [usize; 2], seed: u64) -> usize {
    range[0] + (seed % (range[1] - range[0] + 1) as u64) as usize
}

/// Random instance for `seed` (or the pinned instance seed).
pub fn generated(task: &GeneratedTask, seed: u64) -> Result<TabularTask> {
    let seed = task.instance_seed.unwrap_or(seed);
    let d = pick(task.d, seed);
    let num_states = pick(task.num_states, seed);
    let style = task.styles[(seed % task.styles.len() as u64) as usize];
    let mdp = LinearTabularMDP::generate(seed, d, num_states, task.num_actions, task.gamma, task.r_max)
        .with_context(|| format!("generating instance {seed}"))?;
    let behavior = make_behavior_policy(&mdp, task.num_skills, style, seed)?;
    Ok(TabularTask {
        mdp,
        behavior,
        windows: task.windows,
    })
}

pub fn tabular_task(spec: &TaskSpec, seed: u64) -> Result<TabularTask> {
    match spec {
        TaskSpec::Generated(t) => generated(t, seed),
        TaskSpec::GradedGap(t) => graded_gap(t),
        TaskSpec::Chain(t) => sparse_chain(t),
        TaskSpec::Bimodal(_) | TaskSpec::RandomChains(_) => {
            anyhow::bail!("task is not tabular")
        }
    }
}

/// Whether every seed shares one instance, so per-`c` work can be cached.
pub fn is_fixed_instance(spec: &TaskSpec) -> bool {
    match spec {
        TaskSpec::Generated(t) => t.instance_seed.is_some(),
        TaskSpec::GradedGap(_) | TaskSpec::Chain(_) => true,
        TaskSpec::Bimodal(_) | TaskSpec::RandomChains(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use horl_core::mdp::{exact_value_iteration, TabularModel};

    #[test]
    fn graded_gap_spans_four_decades() {
        let task = graded_gap(&GradedGapTask {
            decision_states: 5,
            better_share: 0.2,
            gamma: 0.9,
            windows: 1,
        })
        .unwrap();
        let mdp = &task.mdp;
        let gap = |s| mdp.expected_reward(s, 1).unwrap() - mdp.expected_reward(s, 0).unwrap();
        assert!((gap(0) - 0.5e-4).abs() < 1e-15);
        assert!((gap(4) - 0.5).abs() < 1e-15);
        assert_eq!(mdp.transition_prob(2, 0, 5).unwrap(), 1.0);
        assert_eq!(task.behavior.prior().row(0), &[0.8, 0.2]);
    }

    #[test]
    fn chain_optimum_walks_right() {
        let task = sparse_chain(&ChainTask {
            length: 6,
            slip: 0.1,
            noise: 0.1,
            gamma: 0.9,
            windows: 1,
        })
        .unwrap();
        let vi = exact_value_iteration(&task.mdp, 1e-10).unwrap();
        assert!(vi.policy.argmax_choices()[..5].iter().all(|&a| a == 2));
        let row = task.behavior.skills().skill_row(3, 0);
        assert!((row[0] - (0.9 + 0.1 / 3.0)).abs() < 1e-15);
        assert!((task.mdp.dense().row(0, 0)[0] - 1.0).abs() < 1e-15);
    }
}
