//! Continuous 2-d point mass in the unit square with a central obstacle, so
//! that the start and goal are joined by two disjoint corridors.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Axis-aligned rectangle `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    pub bounds: Rect,
    pub max_step: f64,
    pub goals: Vec<Disc>,
    pub obstacles: Vec<Rect>,
    pub start: [f64; 2],
    pub start_jitter: f64,
}

impl PointMassEnv {
    /// Unit square, start bottom-left, goal top-right, obstacle in the middle.
    pub fn bimodal() -> Self {
        Self {
            bounds: Rect {
                lo: [0.0, 0.0],
                hi: [1.0, 1.0],
            },
            max_step: 0.1,
            goals: vec![Disc {
                center: [0.9, 0.9],
                radius: 0.1,
            }],
            obstacles: vec![Rect {
                lo: [0.25, 0.25],
                hi: [0.75, 0.75],
            }],
            start: [0.1, 0.1],
            start_jitter: 0.03,
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let j = self.start_jitter;
        let mut s = self.start;
        if j > 0.0 {
            s[0] += rng.random_range(-j..=j);
            s[1] += rng.random_range(-j..=j);
        }
        self.clip_state(s)
    }

    pub fn clip_action(&self, a: [f64; 2]) -> [f64; 2] {
        [
            a[0].clamp(-self.max_step, self.max_step),
            a[1].clamp(-self.max_step, self.max_step),
        ]
    }

    fn clip_state(&self, s: [f64; 2]) -> [f64; 2] {
        [
            s[0].clamp(self.bounds.lo[0], self.bounds.hi[0]),
            s[1].clamp(self.bounds.lo[1], self.bounds.hi[1]),
        ]
    }

    /// Apply a (clipped) action. Moves that would end inside an obstacle
    /// leave the agent in place. Reward is 1 when the new state is in a goal.
    pub fn step(&self, s: [f64; 2], a: [f64; 2]) -> ([f64; 2], f64) {
        let a = self.clip_action(a);
        let candidate = self.clip_state([s[0] + a[0], s[1] + a[1]]);
        let next = if self.obstacles.iter().any(|o| o.contains(candidate)) {
            s
        } else {
            candidate
        };
        let r = if self.goals.iter().any(|g| g.contains(next)) {
            1.0
        } else {
            0.0
        };
        (next, r)
    }
}
