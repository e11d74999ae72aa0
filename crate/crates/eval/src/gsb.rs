//! The Good/Same/Bad preference metric.

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

/// `(G + S) / (B + S)`; undefined when `B + S = 0`.
pub fn gsb_ratio(good: u64, same: u64, bad: u64) -> Result<f64> {
    let den = bad + same;
    if den == 0 {
        return Err(EvalError::UndefinedRatio);
    }
    Ok((good + same) as f64 / den as f64)
}

/// Round to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Outcome of one comparison from the point of view of our model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Good,
    Same,
    Bad,
}

/// What the voter clicked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Same,
    Right,
}

impl Choice {
    /// Map a click to an outcome given whether our video was on the left.
    pub fn outcome(self, left_is_ours: bool) -> Outcome {
        match (self, left_is_ours) {
            (Choice::Same, _) => Outcome::Same,
            (Choice::Left, true) | (Choice::Right, false) => Outcome::Good,
            (Choice::Left, false) | (Choice::Right, true) => Outcome::Bad,
        }
    }

    /// The click that expresses `outcome` given the side mapping.
    pub fn expressing(outcome: Outcome, left_is_ours: bool) -> Self {
        match (outcome, left_is_ours) {
            (Outcome::Same, _) => Choice::Same,
            (Outcome::Good, true) | (Outcome::Bad, false) => Choice::Left,
            (Outcome::Good, false) | (Outcome::Bad, true) => Choice::Right,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbTally {
    pub competitor: String,
    pub good: u64,
    pub same: u64,
    pub bad: u64,
}

impl GsbTally {
    pub fn new(competitor: impl Into<String>) -> Self {
        Self {
            competitor: competitor.into(),
            ..Default::default()
        }
    }

    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Good => self.good += 1,
            Outcome::Same => self.same += 1,
            Outcome::Bad => self.bad += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.good + self.same + self.bad
    }

    pub fn ratio(&self) -> Option<f64> {
        gsb_ratio(self.good, self.same, self.bad).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undefined_ratio() {
        assert!(matches!(gsb_ratio(5, 0, 0), Err(EvalError::UndefinedRatio)));
        assert_eq!(GsbTally::new("x").ratio(), None);
    }

    #[test]
    fn all_same_is_one() {
        for n in [1, 7, 1000] {
            assert_eq!(gsb_ratio(0, n, 0).unwrap(), 1.0);
        }
    }

    #[test]
    fn click_mapping() {
        assert_eq!(Choice::Left.outcome(true), Outcome::Good);
        assert_eq!(Choice::Left.outcome(false), Outcome::Bad);
        assert_eq!(Choice::Right.outcome(false), Outcome::Good);
        assert_eq!(Choice::Same.outcome(true), Outcome::Same);
        assert_eq!(Choice::Same.outcome(false), Outcome::Same);
        for o in [Outcome::Good, Outcome::Same, Outcome::Bad] {
            for side in [true, false] {
                assert_eq!(Choice::expressing(o, side).outcome(side), o);
            }
        }
    }
}
