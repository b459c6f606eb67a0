use std::fmt;
use std::str::FromStr;

use crate::error::{PmlError, Result};

/// Strictly increasing list of dyadic levels; the last entry is the
/// prediction level `L`, the rest are the sub-resolutions `n_0 < ... < n_k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResolutionSet {
    levels: Vec<usize>,
}

impl ResolutionSet {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(PmlError::InvalidResolutionSet("no levels given".into()));
        }
        if let Some(w) = levels.windows(2).find(|w| w[0] >= w[1]) {
            return Err(PmlError::InvalidResolutionSet(format!(
                "levels must be strictly increasing, found {} before {}",
                w[0], w[1]
            )));
        }
        Ok(Self { levels })
    }

    /// `{0, 1, ..., n} ∪ {L}`.
    pub fn dense(n: usize, prediction_level: usize) -> Result<Self> {
        if n > prediction_level {
            return Err(PmlError::InvalidResolutionSet(format!(
                "sub-level {n} exceeds prediction level {prediction_level}"
            )));
        }
        let mut levels: Vec<usize> = (0..=n).collect();
        if n < prediction_level {
            levels.push(prediction_level);
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn prediction_level(&self) -> usize {
        *self.levels.last().expect("non-empty by construction")
    }

    /// Every level except the prediction level.
    pub fn sub_levels(&self) -> &[usize] {
        &self.levels[..self.levels.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for ResolutionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, "}}")
    }
}

impl FromStr for ResolutionSet {
    type Err = PmlError;

    /// Parses a comma-separated list such as `0,1,2,6`.
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|e| {
                    PmlError::InvalidResolutionSet(format!("bad level {:?}: {e}", t.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}
