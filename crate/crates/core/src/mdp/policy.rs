use serde::{Deserialize, Serialize};

use crate::error::{check_index, invalid, HorlError, Result};

/// What a [`PolicyTable`] conditions on and what it chooses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PolicyKind {
    /// Primitive `β(a | s, z)`: rows indexed by `s * num_skills + z`, choices are actions.
    LowLevel { num_skills: usize },
    /// `π(z | s)` over skills.
    HighLevel,
    /// `π(a | s)` over base actions.
    Flat,
}

/// Row-stochastic table of conditional distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    kind: PolicyKind,
    num_rows: usize,
    num_choices: usize,
    probs: Vec<f64>,
}

pub const ROW_SUM_TOL: f64 = 1e-12;

impl PolicyTable {
    pub fn new(
        kind: PolicyKind,
        num_rows: usize,
        num_choices: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if num_rows == 0 || num_choices == 0 {
            return Err(invalid(
                "policy",
                "table must have at least one row and one choice",
            ));
        }
        if let PolicyKind::LowLevel { num_skills } = kind {
            if num_skills == 0 || num_rows % num_skills != 0 {
                return Err(invalid(
                    "policy",
                    format!("low-level table with {num_rows} rows is not divisible by {num_skills} skills"),
                ));
            }
        }
        if probs.len() != num_rows * num_choices {
            return Err(HorlError::DimensionMismatch {
                expected: num_rows * num_choices,
                got: probs.len(),
                context: "policy probabilities",
            });
        }
        let table = Self {
            kind,
            num_rows,
            num_choices,
            probs,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn uniform(kind: PolicyKind, num_rows: usize, num_choices: usize) -> Result<Self> {
        let p = 1.0 / num_choices as f64;
        Self::new(kind, num_rows, num_choices, vec![p; num_rows * num_choices])
    }

    /// Deterministic table picking `choices[row]` in each row.
    pub fn deterministic(kind: PolicyKind, num_choices: usize, choices: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; choices.len() * num_choices];
        for (row, &c) in choices.iter().enumerate() {
            check_index("choice", c, num_choices)?;
            probs[row * num_choices + c] = 1.0;
        }
        Self::new(kind, choices.len(), num_choices, probs)
    }

    pub fn validate(&self) -> Result<()> {
        for (row, p) in self.probs.chunks(self.num_choices).enumerate() {
            if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(HorlError::InvariantViolated(format!(
                    "policy row {row} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(HorlError::InvariantViolated(format!(
                    "policy row {row} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_choices(&self) -> usize {
        self.num_choices
    }

    /// Number of skills for a low-level table, 1 otherwise.
    pub fn num_skills(&self) -> usize {
        match self.kind {
            PolicyKind::LowLevel { num_skills } => num_skills,
            _ => 1,
        }
    }

    /// Number of distinct states the table conditions on.
    pub fn num_states(&self) -> usize {
        self.num_rows / self.num_skills()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.probs[row * self.num_choices..(row + 1) * self.num_choices]
    }

    /// Low-level row for `(s, z)`.
    pub fn skill_row(&self, s: usize, z: usize) -> &[f64] {
        self.row(s * self.num_skills() + z)
    }

    pub fn prob(&self, row: usize, choice: usize) -> f64 {
        self.probs[row * self.num_choices + choice]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest entry per row (ties to the lowest index).
    pub fn argmax_choices(&self) -> Vec<usize> {
        self.probs
            .chunks(self.num_choices)
            .map(argmax_lowest)
            .collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
