use thiserror::Error;

/// Everything that can go wrong while validating a contest or running an audit.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("negative count in {field} of precinct {precinct}: {value}")]
    NegativeCount {
        precinct: String,
        field: String,
        value: i64,
    },
    #[error(
        "accounting mismatch in precinct {precinct}: votes {votes} + undervotes {undervotes} + {f} x invalid {invalid} != {opportunities} voting opportunities"
    )]
    AccountingMismatch {
        precinct: String,
        votes: u64,
        undervotes: u64,
        invalid: u64,
        f: u64,
        opportunities: u64,
    },
    #[error("contest has no precincts")]
    EmptyContest,
    #[error("contest has no candidates")]
    NoCandidates,
    #[error("votes allowed per ballot must be at least 1")]
    ZeroVotesAllowed,
    #[error("precinct {precinct} reports {got} candidate columns, expected {expected}")]
    CandidateCountMismatch {
        precinct: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate precinct id {0}")]
    DuplicatePrecinct(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("super-majority measure apparently failed; auditing a failing measure is not supported")]
    NotPassed,
    #[error("no apparent losers; the contest is unopposed")]
    NoLosers,

    #[error("hand tally for precinct {0} does not match the contest layout")]
    PrecinctMismatch(String),
    #[error("weight threshold {0} is below the range of the weight function")]
    BelowRange(String),
    #[error("weight family {family} is undefined for precinct {precinct} with zero voting opportunities")]
    ZeroOpportunities { family: String, precinct: String },
    #[error("sample is empty")]
    EmptySample,

    #[error("sample size {n} exceeds population size {population}")]
    SampleTooLarge { n: usize, population: usize },
    #[error("enumeration of {0} subsets is too large for the exhaustive oracle")]
    TooLarge(u128),

    #[error("stage {stage} is beyond the fixed schedule of {stages} stages")]
    StageBeyondS { stage: u32, stages: u32 },
    #[error("the audit is already complete")]
    AlreadyComplete,
    #[error("cannot draw {requested} more precincts; only {available} remain")]
    ExhaustedPopulation { requested: usize, available: usize },
    #[error("precinct {0} is not in the current sample")]
    NotInSample(String),
    #[error("precinct {0} already has a recorded tally")]
    DuplicateTally(String),
    #[error("missing hand tallies for {} sampled precinct(s): {}", .0.len(), .0.join(", "))]
    MissingTallies(Vec<String>),
    #[error("no stage is open; draw a sample first")]
    NoOpenStage,
    #[error("a sample has already been drawn for stage {0} and has not been evaluated")]
    StageAlreadyDrawn(u32),
    #[error("session file is stale or corrupt: {0}")]
    CorruptSession(String),
    #[error("unknown precinct {0}")]
    UnknownPrecinct(String),
}

impl AuditError {
    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Self::NegativeCount { .. } => "negative_count",
            Self::AccountingMismatch { .. } => "accounting_mismatch",
            Self::EmptyContest => "empty_contest",
            Self::NoCandidates => "no_candidates",
            Self::ZeroVotesAllowed => "zero_votes_allowed",
            Self::CandidateCountMismatch { .. } => "candidate_count_mismatch",
            Self::DuplicatePrecinct(_) => "duplicate_precinct",
            Self::InvalidInput(_) => "invalid_input",
            Self::NotPassed => "not_passed",
            Self::NoLosers => "no_losers",
            Self::PrecinctMismatch(_) => "precinct_mismatch",
            Self::BelowRange(_) => "below_range",
            Self::ZeroOpportunities { .. } => "zero_opportunities",
            Self::EmptySample => "empty_sample",
            Self::SampleTooLarge { .. } => "sample_too_large",
            Self::TooLarge(_) => "too_large",
            Self::StageBeyondS { .. } => "stage_beyond_schedule",
            Self::AlreadyComplete => "already_complete",
            Self::ExhaustedPopulation { .. } => "exhausted_population",
            Self::NotInSample(_) => "not_in_sample",
            Self::DuplicateTally(_) => "duplicate_tally",
            Self::MissingTallies(_) => "missing_tallies",
            Self::NoOpenStage => "no_open_stage",
            Self::StageAlreadyDrawn(_) => "stage_already_drawn",
            Self::CorruptSession(_) => "corrupt_session",
            Self::UnknownPrecinct(_) => "unknown_precinct",
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
