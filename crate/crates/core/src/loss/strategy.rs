use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default `k` for the fixed-k (BiLD) baselines.
pub const DEFAULT_FIXED_K: usize = 8;

/// Which direction of KL divergence compares teacher-side `p` with student-side `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Divergence {
    /// `Σ p log(p / q)`
    Forward,
    /// `Σ q log(q / p)`
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Fkl,
    Rkl,
    BildFkl,
    BildRkl,
    DbildFkl,
    DbildRkl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Fkl,
        StrategyKind::Rkl,
        StrategyKind::BildFkl,
        StrategyKind::BildRkl,
        StrategyKind::DbildFkl,
        StrategyKind::DbildRkl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Fkl => "fkl",
            StrategyKind::Rkl => "rkl",
            StrategyKind::BildFkl => "bild-fkl",
            StrategyKind::BildRkl => "bild-rkl",
            StrategyKind::DbildFkl => "dbild-fkl",
            StrategyKind::DbildRkl => "dbild-rkl",
        }
    }

    /// Row label used in result tables, e.g. `DBiLD-RKL`.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Fkl => "FKL",
            StrategyKind::Rkl => "RKL",
            StrategyKind::BildFkl => "BiLD-FKL",
            StrategyKind::BildRkl => "BiLD-RKL",
            StrategyKind::DbildFkl => "DBiLD-FKL",
            StrategyKind::DbildRkl => "DBiLD-RKL",
        }
    }

    pub fn divergence(self) -> Divergence {
        match self {
            StrategyKind::Fkl | StrategyKind::BildFkl | StrategyKind::DbildFkl => Divergence::Forward,
            StrategyKind::Rkl | StrategyKind::BildRkl | StrategyKind::DbildRkl => Divergence::Reverse,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower)
            .ok_or_else(|| {
                let valid: Vec<_> = StrategyKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!(
                    "unknown strategy `{s}`; valid values: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// A distillation loss choice. `fixed_k` is only read by the BiLD variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossStrategy {
    pub kind: StrategyKind,
    #[serde(default = "default_fixed_k")]
    pub fixed_k: usize,
}

fn default_fixed_k() -> usize {
    DEFAULT_FIXED_K
}

impl LossStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            fixed_k: DEFAULT_FIXED_K,
        }
    }

    pub fn with_fixed_k(kind: StrategyKind, fixed_k: usize) -> Result<Self> {
        let s = Self { kind, fixed_k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed_k < 2 {
            return Err(Error::Config(format!("fixed_k must be >= 2, got {}", self.fixed_k)));
        }
        Ok(())
    }
}

impl Default for LossStrategy {
    fn default() -> Self {
        Self::new(StrategyKind::DbildRkl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert_eq!("DBiLD_RKL".parse::<StrategyKind>().unwrap(), StrategyKind::DbildRkl);
    }

    #[test]
    fn unknown_name_lists_valid_values() {
        let err = "kl".parse::<StrategyKind>().unwrap_err().to_string();
        assert!(err.contains("dbild-rkl") && err.contains("bild-fkl"), "{err}");
    }

    #[test]
    fn fixed_k_floor() {
        assert!(LossStrategy::with_fixed_k(StrategyKind::BildRkl, 1).is_err());
        assert_eq!(LossStrategy::default().fixed_k, 8);
    }
}
