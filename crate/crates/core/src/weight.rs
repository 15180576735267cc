//! Monotone weight functions `w_p` and their generalized inverses.

use std::fmt;
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::contest::Contest;
use crate::error::{AuditError, Result};
use crate::rational::int;

pub const DEFAULT_THRESHOLD_VOTES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum WeightFamily {
    /// `w_p(z) = z`
    Identity,
    /// `w_p(z) = z / b_p`
    PerOpportunity,
    /// `w_p(z) = (z - m)_+ / b_p`
    Thresholded { m: u64 },
}

impl WeightFamily {
    fn needs_opportunities(self) -> bool {
        !matches!(self, WeightFamily::Identity)
    }
}

impl fmt::Display for WeightFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFamily::Identity => f.write_str("identity"),
            WeightFamily::PerOpportunity => f.write_str("per-opportunity"),
            WeightFamily::Thresholded { m } => write!(f, "thresholded:{m}"),
        }
    }
}

impl FromStr for WeightFamily {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "per-opportunity" => Ok(Self::PerOpportunity),
            "thresholded" => Ok(Self::Thresholded {
                m: DEFAULT_THRESHOLD_VOTES,
            }),
            other => match other.strip_prefix("thresholded:") {
                Some(m) => m
                    .parse()
                    .map(|m| Self::Thresholded { m })
                    .map_err(|_| AuditError::InvalidInput(format!("bad threshold in {other:?}"))),
                None => Err(AuditError::InvalidInput(format!("unknown weight family {other:?}"))),
            },
        }
    }
}

/// `w_p(z)` for a precinct with `b_p` voting opportunities.
pub fn weight_apply(family: WeightFamily, opportunities: u64, z: &BigRational) -> BigRational {
    match family {
        WeightFamily::Identity => z.clone(),
        WeightFamily::PerOpportunity => z / int(opportunities),
        WeightFamily::Thresholded { m } => {
            let excess = z - int(m);
            if excess.is_positive() {
                excess / int(opportunities)
            } else {
                BigRational::zero()
            }
        }
    }
}

/// `w_p^{-1}(t) = sup { z >= 0 : w_p(z) <= t }`.
pub fn weight_invert(family: WeightFamily, opportunities: u64, t: &BigRational) -> Result<BigRational> {
    // Every family has w_p(0) = 0.
    if t.is_negative() {
        return Err(AuditError::BelowRange(t.to_string()));
    }
    Ok(match family {
        WeightFamily::Identity => t.clone(),
        WeightFamily::PerOpportunity => t * int(opportunities),
        WeightFamily::Thresholded { m } => int(m) + t * int(opportunities),
    })
}

/// One weight family applied across a list of precincts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weights {
    family: WeightFamily,
    opportunities: Vec<u64>,
}

impl Weights {
    pub fn new(family: WeightFamily, opportunities: Vec<u64>) -> Result<Self> {
        if family.needs_opportunities() {
            if let Some(p) = opportunities.iter().position(|&b| b == 0) {
                return Err(AuditError::ZeroOpportunities {
                    family: family.to_string(),
                    precinct: p.to_string(),
                });
            }
        }
        Ok(Self { family, opportunities })
    }

    pub fn for_contest(family: WeightFamily, contest: &Contest) -> Result<Self> {
        Self::new(family, contest.precincts.iter().map(|p| p.opportunities()).collect()).map_err(|e| match e {
            AuditError::ZeroOpportunities { family, precinct } => AuditError::ZeroOpportunities {
                family,
                precinct: contest.precincts[precinct.parse::<usize>().unwrap()].id.clone(),
            },
            other => other,
        })
    }

    pub fn family(&self) -> WeightFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.opportunities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opportunities.is_empty()
    }

    pub fn apply(&self, p: usize, z: &BigRational) -> BigRational {
        weight_apply(self.family, self.opportunities[p], z)
    }

    pub fn invert(&self, p: usize, t: &BigRational) -> Result<BigRational> {
        weight_invert(self.family, self.opportunities[p], t)
    }

    /// Restriction to a subset of precincts, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            family: self.family,
            opportunities: indices.iter().map(|&p| self.opportunities[p]).collect(),
        }
    }
}
