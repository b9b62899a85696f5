//! Pipeline constants of the two studied exercises.
//!
//! Movement 1 is the deep squat and Movement 2 the standing shoulder
//! abduction. Both are padded by [`DEFAULT_PAD`] rows per side, so their
//! sequence lengths are 260 and 251.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PipelineConfig, DEFAULT_PAD};
use crate::error::{Error, Result};

/// Dimension counts the presets are defined for.
pub const PRESET_DIMS: [usize; 2] = [3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Movement1,
    Movement2,
}

impl Movement {
    pub const ALL: [Movement; 2] = [Movement::Movement1, Movement::Movement2];

    pub fn name(self) -> &'static str {
        match self {
            Movement::Movement1 => "movement1",
            Movement::Movement2 => "movement2",
        }
    }

    /// Common length before padding.
    pub fn target_len(self) -> usize {
        match self {
            Movement::Movement1 => 240,
            Movement::Movement2 => 231,
        }
    }

    pub fn seq_len(self) -> usize {
        self.target_len() + 2 * DEFAULT_PAD
    }

    pub fn tau(self) -> f64 {
        match self {
            Movement::Movement1 => 100.0,
            Movement::Movement2 => 200.0,
        }
    }

    pub fn train_per_class(self) -> usize {
        match self {
            Movement::Movement1 => 70,
            Movement::Movement2 => 49,
        }
    }

    /// Validation repetitions per class on a full recording set.
    pub fn validation_per_class(self) -> usize {
        match self {
            Movement::Movement1 => 20,
            Movement::Movement2 => 14,
        }
    }

    pub fn pipeline(self, dims: usize) -> Result<PipelineConfig> {
        if !PRESET_DIMS.contains(&dims) {
            return Err(Error::invalid(format!(
                "{self} is defined for 3 or 10 dimensions, not {dims}"
            )));
        }
        Ok(PipelineConfig {
            target_len: Some(self.target_len()),
            dims,
            pad: DEFAULT_PAD,
            tau: self.tau(),
            train_correct: self.train_per_class(),
            train_incorrect: self.train_per_class(),
        })
    }
}

impl fmt::Display for Movement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Movement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Movement::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown movement {s:?}; expected movement1 or movement2"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_constants() {
        let m1 = Movement::Movement1.pipeline(10).unwrap();
        assert_eq!(Movement::Movement1.seq_len(), 260);
        assert_eq!(
            (m1.tau, m1.train_correct, m1.train_incorrect, m1.pad),
            (100.0, 70, 70, 10)
        );
        let m2 = Movement::Movement2.pipeline(3).unwrap();
        assert_eq!(Movement::Movement2.seq_len(), 251);
        assert_eq!((m2.tau, m2.train_correct, m2.dims), (200.0, 49, 3));
        assert_eq!(Movement::Movement2.validation_per_class(), 14);
        assert!(Movement::Movement1.pipeline(4).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Movement::ALL {
            assert_eq!(m.to_string().parse::<Movement>().unwrap(), m);
        }
        assert!("squat".parse::<Movement>().is_err());
    }
}
