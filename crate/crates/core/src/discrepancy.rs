//! Hand tallies and the potential margin overstatement they reveal.

use std::io;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::contest::{CandidateKind, Contest};
use crate::error::{AuditError, Result};
use crate::pooling::{Measure, PooledContest};
use crate::rational::{self, int};
use crate::weight::Weights;

/// The hand count of one precinct, by real candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandTally {
    pub precinct_id: String,
    pub votes: Vec<u64>,
    pub undervotes: u64,
    pub invalid_ballots: u64,
    pub ballots: u64,
}

impl HandTally {
    /// A tally that matches the reported counts exactly.
    pub fn matching_reported(contest: &Contest, p: usize) -> Self {
        let precinct = &contest.precincts[p];
        Self {
            precinct_id: precinct.id.clone(),
            votes: precinct.votes.clone(),
            undervotes: precinct.undervotes,
            invalid_ballots: precinct.invalid_ballots,
            ballots: precinct.ballots,
        }
    }

    pub fn undervote_bucket(&self, f: u64) -> u64 {
        self.undervotes + f * self.invalid_ballots
    }
}

/// `Σ_{K_w} (v − a)_+ + Σ_{K_ℓ} (a − v)_+` over pseudo-candidate rows.
pub fn overstatement(reported: &[u64], actual: &[u64], winners: &[usize], losers: &[usize]) -> u64 {
    let over = winners.iter().map(|&k| reported[k].saturating_sub(actual[k]));
    let under = losers.iter().map(|&k| actual[k].saturating_sub(reported[k]));
    over.chain(under).sum()
}

/// Overstatement of the effective margin `(1 − τ) V_yes − τ V_no` in one precinct,
/// rounded up and clipped at zero.
pub fn supermajority_overstatement(reported: &[u64], actual: &[u64], threshold: &BigRational) -> u64 {
    let one_minus = int(1) - threshold;
    let yes = int(reported[0]) - int(actual[0]);
    let no = int(reported[1]) - int(actual[1]);
    rational::ceil_u64(&(one_minus * yes - threshold * no))
}

/// `e_p` for precinct `p` of the contest given its hand tally.
pub fn precinct_overstatement(contest: &Contest, pooled: &PooledContest, p: usize, tally: &HandTally) -> Result<u64> {
    let precinct = &contest.precincts[p];
    if tally.precinct_id != precinct.id || tally.votes.len() != contest.candidates.len() {
        return Err(AuditError::PrecinctMismatch(tally.precinct_id.clone()));
    }
    let actual = pooled.aggregate(&tally.votes, tally.undervote_bucket(contest.f));
    let reported = &pooled.votes[p];
    Ok(match &pooled.measure {
        Measure::Plurality => overstatement(reported, &actual, pooled.winners(), pooled.losers()),
        Measure::Supermajority { threshold } => supermajority_overstatement(reported, &actual, threshold),
    })
}

/// `E = Σ e_p`.
pub fn total_overstatement(overstatements: &[u64]) -> u64 {
    overstatements.iter().sum()
}

/// `ℰ = Σ_{K_w} (V_k − A_k)_+ + Σ_{K_ℓ} (A_k − V_k)_+` over contest totals.
pub fn net_overstatement(reported: &[u64], actual: &[u64], winners: &[usize], losers: &[usize]) -> u64 {
    overstatement(reported, actual, winners, losers)
}

/// `max_{p ∈ J} w_p(e_p)` over `(precinct, e_p)` pairs.
pub fn sample_statistic(weights: &Weights, sample: &[(usize, u64)]) -> Result<BigRational> {
    sample
        .iter()
        .map(|&(p, e)| weights.apply(p, &int(e)))
        .max()
        .ok_or(AuditError::EmptySample)
}

fn csv_err(e: csv::Error) -> AuditError {
    AuditError::InvalidInput(format!("csv: {e}"))
}

/// Reads hand tallies: `precinct_id,ballots,invalid,undervotes,<candidate>...`, with
/// candidate columns named and ordered as in the contest.
pub fn read_tallies_csv<R: io::Read>(reader: R, contest: &Contest) -> Result<Vec<HandTally>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(csv_err)?.clone();
    let expected: Vec<String> = ["precinct_id", "ballots", "invalid", "undervotes"]
        .into_iter()
        .map(String::from)
        .chain(contest.candidates.iter().map(|c| c.name.clone()))
        .collect();
    let got: Vec<&str> = headers
        .iter()
        .map(|h| h.strip_suffix(" [write-in]").unwrap_or(h))
        .collect();
    if got != expected {
        return Err(AuditError::InvalidInput(format!(
            "tally CSV header must be {}",
            expected.join(",")
        )));
    }
    let mut tallies = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let count = |i: usize| -> Result<u64> {
            record[i].parse::<u64>().map_err(|_| {
                AuditError::InvalidInput(format!(
                    "row {}, column {}: {:?} is not a nonnegative integer",
                    row + 2,
                    &headers[i],
                    &record[i]
                ))
            })
        };
        tallies.push(HandTally {
            precinct_id: record[0].to_string(),
            ballots: count(1)?,
            invalid_ballots: count(2)?,
            undervotes: count(3)?,
            votes: (4..record.len()).map(count).collect::<Result<_>>()?,
        });
    }
    Ok(tallies)
}

pub fn write_tallies_csv<W: io::Write>(tallies: &[HandTally], contest: &Contest, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["precinct_id".to_string(), "ballots".into(), "invalid".into(), "undervotes".into()];
    header.extend(contest.candidates.iter().map(|c| match c.kind {
        CandidateKind::Listed => c.name.clone(),
        CandidateKind::WriteIn => format!("{} [write-in]", c.name),
    }));
    csv.write_record(&header).map_err(csv_err)?;
    for t in tallies {
        let mut row = vec![
            t.precinct_id.clone(),
            t.ballots.to_string(),
            t.invalid_ballots.to_string(),
            t.undervotes.to_string(),
        ];
        row.extend(t.votes.iter().map(u64::to_string));
        csv.write_record(&row).map_err(csv_err)?;
    }
    csv.flush().map_err(|e| AuditError::InvalidInput(e.to_string()))
}
