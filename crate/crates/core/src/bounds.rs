//! A-priori upper bounds `u_p` on the potential margin overstatement.

use std::fmt;
use std::io;
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::contest::Contest;
use crate::error::{AuditError, Result};
use crate::pooling::{Measure, PooledContest};
use crate::rational::{self, int, ratio};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum BoundMethod {
    /// Every one of the `r_p` possible valid votes could belong to the weakest loser.
    EPlus,
    /// `⌈λ b_p⌉`.
    Fraction {
        #[serde(with = "rational::as_string")]
        lambda: BigRational,
    },
    /// Effective-margin bound for a two-position measure passing at 2/3.
    Supermajority,
    /// Supplied by the caller.
    Custom,
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundMethod::EPlus => f.write_str("e-plus"),
            BoundMethod::Fraction { lambda } => write!(f, "fraction:{lambda}"),
            BoundMethod::Supermajority => f.write_str("supermajority"),
            BoundMethod::Custom => f.write_str("custom"),
        }
    }
}

impl FromStr for BoundMethod {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e-plus" => Ok(Self::EPlus),
            "supermajority" => Ok(Self::Supermajority),
            other => match other.strip_prefix("fraction:") {
                Some(lambda) => Ok(Self::Fraction {
                    lambda: rational::parse_rational(lambda)?,
                }),
                None => Err(AuditError::InvalidInput(format!("unknown bound method {other:?}"))),
            },
        }
    }
}

/// Per-precinct bounds with the method and caps that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBounds {
    pub bounds: Vec<u64>,
    pub method: BoundMethod,
    /// `r_p` for each precinct.
    pub caps: Vec<u64>,
}

impl ErrorBounds {
    pub fn custom(bounds: Vec<u64>) -> Self {
        let caps = vec![0; bounds.len()];
        Self {
            bounds,
            method: BoundMethod::Custom,
            caps,
        }
    }

    pub fn total(&self) -> u64 {
        self.bounds.iter().sum()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            bounds: indices.iter().map(|&p| self.bounds[p]).collect(),
            method: self.method.clone(),
            caps: indices.iter().map(|&p| self.caps[p]).collect(),
        }
    }

    /// CSV for public verification: `precinct_id,cap,bound`.
    pub fn write_csv<W: io::Write>(&self, contest: &Contest, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| AuditError::InvalidInput(e.to_string());
        csv.write_record(["precinct_id", "cap", "bound"]).map_err(err)?;
        for ((p, cap), bound) in contest.precincts.iter().zip(&self.caps).zip(&self.bounds) {
            csv.write_record([p.id.as_str(), &cap.to_string(), &bound.to_string()])
                .map_err(err)?;
        }
        csv.flush().map_err(|e| AuditError::InvalidInput(e.to_string()))
    }
}

/// `e_p^+(r_p) = r_p + Σ_{K_w} v_kp − min_{K_ℓ} v_kp`, the largest overstatement
/// any actual tally with at most `r_p` valid votes could produce.
///
/// When `r_p` is below the weakest loser's reported votes the maximum is reached by
/// zeroing the winners instead, so the result is never below `Σ_{K_w} v_kp`.
pub fn bound_e_plus(row: &[u64], winners: &[usize], losers: &[usize], cap: u64) -> Result<u64> {
    let weakest = losers.iter().map(|&k| row[k]).min().ok_or(AuditError::NoLosers)?;
    let winner_votes: u64 = winners.iter().map(|&k| row[k]).sum();
    Ok(winner_votes + cap.saturating_sub(weakest))
}

/// `⌈λ b_p⌉`.
pub fn bound_fraction(opportunities: u64, lambda: &BigRational) -> u64 {
    rational::ceil_u64(&(lambda * int(opportunities)))
}

/// `⌈(2/3)(r_p + v_1p/2 − v_2p)⌉`, floored at zero.
pub fn bound_supermajority(v_yes: u64, v_no: u64, cap: u64) -> u64 {
    let inner = int(cap) + ratio(v_yes, 2) - int(v_no);
    rational::ceil_u64(&(ratio(2, 3) * inner))
}

/// Bounds for every precinct of a pooled contest.
pub fn compute_bounds(contest: &Contest, pooled: &PooledContest, method: &BoundMethod) -> Result<ErrorBounds> {
    let caps: Vec<u64> = contest.precincts.iter().map(|p| p.cap()).collect();
    let bounds = match method {
        BoundMethod::EPlus => pooled
            .votes
            .iter()
            .zip(&caps)
            .map(|(row, &cap)| bound_e_plus(row, pooled.winners(), pooled.losers(), cap))
            .collect::<Result<Vec<_>>>()?,
        BoundMethod::Fraction { lambda } => {
            if *lambda < BigRational::zero() || *lambda > BigRational::one() {
                return Err(AuditError::InvalidInput(format!("fraction {lambda} must lie in [0, 1]")));
            }
            contest
                .precincts
                .iter()
                .map(|p| bound_fraction(p.opportunities(), lambda))
                .collect()
        }
        BoundMethod::Supermajority => match &pooled.measure {
            Measure::Supermajority { threshold } if *threshold == ratio(2, 3) => pooled
                .votes
                .iter()
                .zip(&caps)
                .map(|(row, &cap)| bound_supermajority(row[0], row[1], cap))
                .collect(),
            _ => {
                return Err(AuditError::InvalidInput(
                    "the super-majority bound applies only to yes/no measures with a 2/3 threshold".into(),
                ))
            }
        },
        BoundMethod::Custom => {
            return Err(AuditError::InvalidInput("custom bounds must be supplied directly".into()))
        }
    };
    Ok(ErrorBounds {
        bounds,
        method: method.clone(),
        caps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e_plus_examples() {
        // Sausalito 3001: winners 296 + 309 + 283, losers 271, 60, 5, 780.
        let row = [296, 309, 283, 271, 60, 5, 780];
        assert_eq!(bound_e_plus(&row, &[0, 1, 2], &[3, 4, 5, 6], 2004).unwrap(), 2887);
        let pooled_row = [296, 309, 283, 271, 65, 780];
        assert_eq!(bound_e_plus(&pooled_row, &[0, 1, 2], &[3, 4, 5], 2004).unwrap(), 2827);
        assert_eq!(bound_e_plus(&[0, 0], &[0], &[1], 0).unwrap(), 0);
    }

    #[test]
    fn e_plus_needs_a_loser() {
        assert_eq!(bound_e_plus(&[5], &[0], &[], 5).unwrap_err(), AuditError::NoLosers);
    }

    #[test]
    fn e_plus_with_cap_below_weakest_loser() {
        assert_eq!(bound_e_plus(&[10, 50], &[0], &[1], 20).unwrap(), 10);
    }

    #[test]
    fn fraction_examples() {
        let lambda = ratio(2, 5);
        assert_eq!(bound_fraction(2004, &lambda), 802);
        assert_eq!(bound_fraction(1698, &lambda), 680);
        assert_eq!(bound_fraction(1234, &int(0)), 0);
    }

    #[test]
    fn supermajority_examples() {
        assert_eq!(bound_supermajority(100, 50, 150), 100);
        assert_eq!(bound_supermajority(0, 0, 0), 0);
        assert_eq!(bound_supermajority(90, 0, 90), 90);
        assert_eq!(bound_supermajority(0, 100, 10), 0);
    }

    #[test]
    fn parse_methods() {
        assert_eq!("e-plus".parse::<BoundMethod>().unwrap(), BoundMethod::EPlus);
        assert_eq!(
            "fraction:0.4".parse::<BoundMethod>().unwrap(),
            BoundMethod::Fraction { lambda: ratio(2, 5) }
        );
        assert!("bogus".parse::<BoundMethod>().is_err());
    }
}
