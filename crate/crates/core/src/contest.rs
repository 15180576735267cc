//! Reported contest data: ingestion, validation and derived totals.
//!
//! A contest of the form "vote for up to `f`" is described precinct by precinct.
//! Every ballot carries `f` voting opportunities; each opportunity is a vote for a
//! candidate, an undervote, or part of an invalid (overvoted) ballot. Validation
//! enforces that identity in every precinct.

use std::collections::{BTreeMap, HashSet};
use std::io;

use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::rational::{self, ratio};

pub const CONTEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    #[default]
    Listed,
    WriteIn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    #[serde(default)]
    pub kind: CandidateKind,
}

/// A precinct row as it arrives from an external file. Counts are signed so that
/// negative values can be reported instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecinctRecord {
    pub precinct_id: String,
    pub county_id: String,
    pub reported_votes: Vec<i64>,
    pub reported_undervotes: i64,
    pub reported_invalid_ballots: i64,
    pub reported_ballots: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_cap: Option<i64>,
}

/// The unvalidated contest document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContestSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub contest_id: String,
    pub f: i64,
    pub candidates: Vec<Candidate>,
    pub precincts: Vec<PrecinctRecord>,
    /// Passing threshold for a two-position measure, e.g. `"2/3"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supermajority: Option<String>,
}

fn default_schema_version() -> u32 {
    CONTEST_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Precinct {
    pub id: String,
    pub county: String,
    pub votes: Vec<u64>,
    pub undervotes: u64,
    pub invalid_ballots: u64,
    pub ballots: u64,
    pub vote_cap: Option<u64>,
    opportunities: u64,
    f: u64,
}

impl Precinct {
    /// `b_p`: `f` times the reported ballots.
    pub fn opportunities(&self) -> u64 {
        self.opportunities
    }

    /// Undervotes plus `f` opportunities for every invalid ballot.
    pub fn undervote_bucket(&self) -> u64 {
        self.undervotes + self.f * self.invalid_ballots
    }

    /// `r_p`: the cap on actual valid votes, defaulting to `b_p`.
    pub fn cap(&self) -> u64 {
        self.vote_cap.unwrap_or(self.opportunities)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct County {
    pub id: String,
    /// Indices into [`Contest::precincts`].
    pub precincts: Vec<usize>,
    /// `B_c`.
    pub opportunities: u64,
}

/// A validated contest. Immutable; derived totals are computed once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ContestSpec", into = "ContestSpec")]
pub struct Contest {
    pub id: String,
    pub f: u64,
    pub candidates: Vec<Candidate>,
    pub precincts: Vec<Precinct>,
    pub supermajority: Option<BigRational>,
    counties: Vec<County>,
    opportunities: u64,
}

impl TryFrom<ContestSpec> for Contest {
    type Error = AuditError;

    fn try_from(spec: ContestSpec) -> Result<Self> {
        validate_contest(spec)
    }
}

impl From<Contest> for ContestSpec {
    fn from(contest: Contest) -> Self {
        contest.to_spec()
    }
}

fn nonnegative(precinct: &str, field: &str, value: i64) -> Result<u64> {
    u64::try_from(value).map_err(|_| AuditError::NegativeCount {
        precinct: precinct.to_string(),
        field: field.to_string(),
        value,
    })
}

fn overflow() -> AuditError {
    AuditError::InvalidInput("count overflow".into())
}

/// Checks the accounting identities and populates derived fields.
pub fn validate_contest(raw: ContestSpec) -> Result<Contest> {
    if raw.schema_version != CONTEST_SCHEMA_VERSION {
        return Err(AuditError::InvalidInput(format!(
            "unsupported contest schema version {}",
            raw.schema_version
        )));
    }
    if raw.f < 1 {
        return Err(AuditError::ZeroVotesAllowed);
    }
    let f = raw.f as u64;
    if raw.candidates.is_empty() {
        return Err(AuditError::NoCandidates);
    }
    if raw.precincts.is_empty() {
        return Err(AuditError::EmptyContest);
    }

    let mut seen = HashSet::new();
    let mut precincts = Vec::with_capacity(raw.precincts.len());
    for record in raw.precincts {
        let id = record.precinct_id.clone();
        if !seen.insert(id.clone()) {
            return Err(AuditError::DuplicatePrecinct(id));
        }
        if record.reported_votes.len() != raw.candidates.len() {
            return Err(AuditError::CandidateCountMismatch {
                precinct: id,
                expected: raw.candidates.len(),
                got: record.reported_votes.len(),
            });
        }
        let votes = record
            .reported_votes
            .iter()
            .enumerate()
            .map(|(k, &v)| nonnegative(&id, &format!("reported_votes[{k}]"), v))
            .collect::<Result<Vec<_>>>()?;
        let undervotes = nonnegative(&id, "reported_undervotes", record.reported_undervotes)?;
        let invalid = nonnegative(&id, "reported_invalid_ballots", record.reported_invalid_ballots)?;
        let ballots = nonnegative(&id, "reported_ballots", record.reported_ballots)?;
        let vote_cap = record
            .vote_cap
            .map(|cap| nonnegative(&id, "vote_cap", cap))
            .transpose()?;

        let opportunities = ballots.checked_mul(f).ok_or_else(overflow)?;
        let vote_sum = votes
            .iter()
            .try_fold(0u64, |acc, &v| acc.checked_add(v))
            .ok_or_else(overflow)?;
        let accounted = f
            .checked_mul(invalid)
            .and_then(|x| x.checked_add(undervotes))
            .and_then(|x| x.checked_add(vote_sum))
            .ok_or_else(overflow)?;
        if accounted != opportunities {
            return Err(AuditError::AccountingMismatch {
                precinct: id,
                votes: vote_sum,
                undervotes,
                invalid,
                f,
                opportunities,
            });
        }
        precincts.push(Precinct {
            id,
            county: record.county_id,
            votes,
            undervotes,
            invalid_ballots: invalid,
            ballots,
            vote_cap,
            opportunities,
            f,
        });
    }

    let supermajority = match raw.supermajority.as_deref() {
        None => None,
        Some(text) => {
            let threshold = rational::parse_rational(text)?;
            if raw.candidates.len() != 2 || f != 1 {
                return Err(AuditError::InvalidInput(
                    "a super-majority measure needs exactly two positions and f = 1".into(),
                ));
            }
            if threshold <= ratio(1, 2) || threshold >= BigRational::one() {
                return Err(AuditError::InvalidInput(format!(
                    "super-majority threshold {threshold} must lie strictly between 1/2 and 1"
                )));
            }
            Some(threshold)
        }
    };

    let mut by_county: BTreeMap<String, County> = BTreeMap::new();
    for (index, precinct) in precincts.iter().enumerate() {
        let county = by_county.entry(precinct.county.clone()).or_insert_with(|| County {
            id: precinct.county.clone(),
            precincts: Vec::new(),
            opportunities: 0,
        });
        county.precincts.push(index);
        county.opportunities += precinct.opportunities;
    }
    let opportunities = precincts.iter().map(|p| p.opportunities).sum();

    Ok(Contest {
        id: raw.contest_id,
        f,
        candidates: raw.candidates,
        precincts,
        supermajority,
        counties: by_county.into_values().collect(),
        opportunities,
    })
}

impl Contest {
    /// `N`.
    pub fn num_precincts(&self) -> usize {
        self.precincts.len()
    }

    /// `B`.
    pub fn opportunities(&self) -> u64 {
        self.opportunities
    }

    /// Counties sorted by id.
    pub fn counties(&self) -> &[County] {
        &self.counties
    }

    pub fn precinct_index(&self, id: &str) -> Option<usize> {
        self.precincts.iter().position(|p| p.id == id)
    }

    /// Reported totals `V_k` per real candidate.
    pub fn candidate_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.candidates.len()];
        for precinct in &self.precincts {
            for (total, v) in totals.iter_mut().zip(&precinct.votes) {
                *total += v;
            }
        }
        totals
    }

    pub fn undervote_total(&self) -> u64 {
        self.precincts.iter().map(Precinct::undervote_bucket).sum()
    }

    pub fn to_spec(&self) -> ContestSpec {
        ContestSpec {
            schema_version: CONTEST_SCHEMA_VERSION,
            contest_id: self.id.clone(),
            f: self.f as i64,
            candidates: self.candidates.clone(),
            precincts: self
                .precincts
                .iter()
                .map(|p| PrecinctRecord {
                    precinct_id: p.id.clone(),
                    county_id: p.county.clone(),
                    reported_votes: p.votes.iter().map(|&v| v as i64).collect(),
                    reported_undervotes: p.undervotes as i64,
                    reported_invalid_ballots: p.invalid_ballots as i64,
                    reported_ballots: p.ballots as i64,
                    vote_cap: p.vote_cap.map(|c| c as i64),
                })
                .collect(),
            supermajority: self.supermajority.as_ref().map(ToString::to_string),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ContestSpec =
            serde_json::from_str(text).map_err(|e| AuditError::InvalidInput(e.to_string()))?;
        validate_contest(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("contest serializes")
    }
}

const WRITE_IN_SUFFIX: &str = " [write-in]";
const CSV_FIXED_COLUMNS: [&str; 5] = ["precinct_id", "county_id", "ballots", "invalid", "undervotes"];

fn csv_error(err: csv::Error) -> AuditError {
    AuditError::InvalidInput(format!("csv: {err}"))
}

fn parse_count(field: &str, column: &str, row: usize) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| {
        AuditError::InvalidInput(format!("row {row}, column {column}: {field:?} is not an integer"))
    })
}

/// Reads the one-row-per-precinct CSV layout:
/// `precinct_id,county_id,ballots,invalid,undervotes,<candidate>...`.
/// A candidate column whose header ends in ` [write-in]` is a write-in.
pub fn read_contest_csv<R: io::Read>(reader: R, contest_id: &str, f: u64) -> Result<Contest> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(csv_error)?.clone();
    if headers.len() <= CSV_FIXED_COLUMNS.len()
        || headers.iter().zip(CSV_FIXED_COLUMNS).any(|(h, want)| h != want)
    {
        return Err(AuditError::InvalidInput(format!(
            "contest CSV header must start with {} followed by candidate columns",
            CSV_FIXED_COLUMNS.join(",")
        )));
    }
    let candidates = headers
        .iter()
        .skip(CSV_FIXED_COLUMNS.len())
        .map(|h| match h.strip_suffix(WRITE_IN_SUFFIX) {
            Some(name) => Candidate {
                name: name.to_string(),
                kind: CandidateKind::WriteIn,
            },
            None => Candidate {
                name: h.to_string(),
                kind: CandidateKind::Listed,
            },
        })
        .collect::<Vec<_>>();

    let mut precincts = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let row = row + 2;
        let count = |i: usize| parse_count(&record[i], &headers[i], row);
        precincts.push(PrecinctRecord {
            precinct_id: record[0].to_string(),
            county_id: record[1].to_string(),
            reported_ballots: count(2)?,
            reported_invalid_ballots: count(3)?,
            reported_undervotes: count(4)?,
            reported_votes: (CSV_FIXED_COLUMNS.len()..record.len())
                .map(count)
                .collect::<Result<_>>()?,
            vote_cap: None,
        });
    }
    validate_contest(ContestSpec {
        schema_version: CONTEST_SCHEMA_VERSION,
        contest_id: contest_id.to_string(),
        f: f as i64,
        candidates,
        precincts,
        supermajority: None,
    })
}

pub fn write_contest_csv<W: io::Write>(contest: &Contest, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(contest.candidates.iter().map(|c| match c.kind {
        CandidateKind::Listed => c.name.clone(),
        CandidateKind::WriteIn => format!("{}{WRITE_IN_SUFFIX}", c.name),
    }));
    csv.write_record(&header).map_err(csv_error)?;
    for p in &contest.precincts {
        let mut row = vec![
            p.id.clone(),
            p.county.clone(),
            p.ballots.to_string(),
            p.invalid_ballots.to_string(),
            p.undervotes.to_string(),
        ];
        row.extend(p.votes.iter().map(u64::to_string));
        csv.write_record(&row).map_err(csv_error)?;
    }
    csv.flush().map_err(|e| AuditError::InvalidInput(e.to_string()))
}
