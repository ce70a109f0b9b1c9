//! Independent reference computations for the integration tests, written
//! with plain nested vectors so they share no code with the library.

#![allow(dead_code)]

use horl_core::mdp::{LinearTabularMDP, PolicyTable};

pub type Matrix = Vec<Vec<f64>>;

pub fn identity(n: usize) -> Matrix {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let m = b[0].len();
    let inner = b.len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..inner {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn mat_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn mat_pow(a: &Matrix, k: usize) -> Matrix {
    (0..k).fold(identity(a.len()), |acc, _| mat_mul(&acc, a))
}

/// `K_z(s, s') = Σ_a β(a|s,z) P(s'|s,a)` from the linear parameterisation.
pub fn skill_step(mdp: &LinearTabularMDP, skills: &PolicyTable, z: usize) -> Matrix {
    let n = mdp.num_states();
    (0..n)
        .map(|s| {
            (0..n)
                .map(|next| {
                    skills
                        .skill_row(s, z)
                        .iter()
                        .enumerate()
                        .map(|(a, w)| w * mdp.transition_prob(s, a, next).unwrap())
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// `r_z(s) = Σ_a β(a|s,z) r(s,a)`.
pub fn skill_reward(mdp: &LinearTabularMDP, skills: &PolicyTable, z: usize) -> Vec<f64> {
    (0..mdp.num_states())
        .map(|s| {
            skills
                .skill_row(s, z)
                .iter()
                .enumerate()
                .map(|(a, w)| w * mdp.expected_reward(s, a).unwrap())
                .sum()
        })
        .collect()
}

/// `Σ_{k<c} γ^k K_z^k r_z`.
pub fn c_step_reward(mdp: &LinearTabularMDP, skills: &PolicyTable, z: usize, c: usize) -> Vec<f64> {
    let k = skill_step(mdp, skills, z);
    let r = skill_reward(mdp, skills, z);
    let mut out = vec![0.0; r.len()];
    let mut reach = identity(r.len());
    for t in 0..c {
        let term = mat_vec(&reach, &r);
        for (o, x) in out.iter_mut().zip(term) {
            *o += mdp.gamma().powi(t as i32) * x;
        }
        reach = mat_mul(&reach, &k);
    }
    out
}

/// Value of a row-stochastic chain with state reward, by summing the
/// discounted series until the tail is negligible.
pub fn series_value(p: &Matrix, r: &[f64], gamma: f64) -> Vec<f64> {
    let mut v = vec![0.0; r.len()];
    let mut term = r.to_vec();
    let mut disc = 1.0;
    while disc > 1e-16 {
        for (vi, ti) in v.iter_mut().zip(&term) {
            *vi += disc * ti;
        }
        term = mat_vec(p, &term);
        disc *= gamma;
    }
    v
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
