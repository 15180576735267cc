//! The sequential escalate-or-confirm audit as an event-sourced state machine.
//!
//! Every mutation appends an [`Event`]. A saved session is its event log plus a
//! SHA-256 of that log; loading replays the log through the same operations and
//! rejects the file if any draw, overstatement or stage decision comes out
//! differently.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{compute_bounds, BoundMethod, ErrorBounds};
use crate::contest::{Contest, County};
use crate::discrepancy::{precinct_overstatement, sample_statistic, HandTally};
use crate::error::{AuditError, Result};
use crate::pooling::{apparent_outcome, pool_losers, supermajority_margin, PoolingRule, PooledContest};
use crate::rational::{self, int, Probability};
use crate::sampling::{draw_precincts, AuditRng};
use crate::tail::{
    compute_q, county_margin_threshold, initial_sample_size, per_county_pvalue, pi_diamond, pi_star,
    proportional_allocation, smallest_satisfying, stratified_pvalue_proportional, tail_without_replacement,
    CountyQuery, DesignKind, InitialSampleSize,
};
use crate::weight::{WeightFamily, Weights};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

/// How the overall risk limit is split across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum AlphaRule {
    /// `α_s = α / 2^s`.
    #[default]
    Halving,
    /// `α_s = α / S` for `s ≤ S`.
    Fixed { stages: u32 },
}

impl fmt::Display for AlphaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaRule::Halving => f.write_str("halving"),
            AlphaRule::Fixed { stages } => write!(f, "fixed:{stages}"),
        }
    }
}

impl FromStr for AlphaRule {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "halving" {
            return Ok(Self::Halving);
        }
        s.strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .filter(|&stages| stages > 0)
            .map(|stages| Self::Fixed { stages })
            .ok_or_else(|| AuditError::InvalidInput(format!("unknown alpha rule {s:?}; use halving or fixed:S")))
    }
}

pub fn alpha_for_stage(alpha: &BigRational, rule: AlphaRule, stage: u32) -> Result<BigRational> {
    if stage == 0 {
        return Err(AuditError::InvalidInput("stages are numbered from 1".into()));
    }
    match rule {
        AlphaRule::Halving => Ok(alpha / BigRational::from_integer(num_traits::pow(BigInt::from(2), stage as usize))),
        AlphaRule::Fixed { stages } if stage > stages => Err(AuditError::StageBeyondS { stage, stages }),
        AlphaRule::Fixed { stages } => Ok(alpha / int(stages as u64)),
    }
}

/// How many precincts to add after a stage fails to confirm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum EscalationRule {
    /// Add a fixed number of precincts; `None` means `⌈0.02 N⌉`.
    FixedIncrement { increment: Option<usize> },
    /// Grow to the smallest sample that would confirm at the next stage's level if
    /// no larger discrepancy turns up.
    #[default]
    MinimalConfirming,
}

impl fmt::Display for EscalationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EscalationRule::FixedIncrement { increment: None } => f.write_str("fixed-increment"),
            EscalationRule::FixedIncrement { increment: Some(d) } => write!(f, "fixed-increment:{d}"),
            EscalationRule::MinimalConfirming => f.write_str("minimal-confirming"),
        }
    }
}

impl FromStr for EscalationRule {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimal-confirming" => Ok(Self::MinimalConfirming),
            "fixed-increment" => Ok(Self::FixedIncrement { increment: None }),
            other => other
                .strip_prefix("fixed-increment:")
                .and_then(|d| d.parse().ok())
                .filter(|&d| d > 0)
                .map(|d| Self::FixedIncrement { increment: Some(d) })
                .ok_or_else(|| AuditError::InvalidInput(format!("unknown escalation rule {other:?}"))),
        }
    }
}

/// `⌈0.02 N⌉`, at least one.
pub fn default_increment(population: usize) -> usize {
    (2 * population).div_ceil(100).max(1)
}

/// First-stage sample size: given directly, or planned from a tolerated statistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialSize {
    Count {
        n: usize,
    },
    Threshold {
        #[serde(with = "rational::as_string")]
        t: BigRational,
    },
}

impl Default for InitialSize {
    fn default() -> Self {
        Self::Threshold { t: BigRational::zero() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(with = "rational::as_string")]
    pub alpha: BigRational,
    #[serde(default)]
    pub alpha_rule: AlphaRule,
    #[serde(default)]
    pub escalation: EscalationRule,
    #[serde(default)]
    pub design: DesignKind,
    pub seed: u64,
    #[serde(default)]
    pub pooling: PoolingRule,
    #[serde(default = "default_weight")]
    pub weight: WeightFamily,
    #[serde(default = "default_bound")]
    pub bound: BoundMethod,
    #[serde(default)]
    pub initial: InitialSize,
}

fn default_weight() -> WeightFamily {
    WeightFamily::PerOpportunity
}

fn default_bound() -> BoundMethod {
    BoundMethod::EPlus
}

impl SessionConfig {
    pub fn new(alpha: BigRational, seed: u64) -> Self {
        Self {
            alpha,
            alpha_rule: AlphaRule::default(),
            escalation: EscalationRule::default(),
            design: DesignKind::default(),
            seed,
            pooling: PoolingRule::default(),
            weight: default_weight(),
            bound: default_bound(),
            initial: InitialSize::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha < BigRational::zero() || self.alpha >= BigRational::one() {
            return Err(AuditError::InvalidInput(format!("risk limit {} must lie in [0, 1)", self.alpha)));
        }
        if self.alpha_rule == (AlphaRule::Fixed { stages: 0 }) {
            return Err(AuditError::InvalidInput("a fixed schedule needs at least one stage".into()));
        }
        if self.escalation == (EscalationRule::FixedIncrement { increment: Some(0) }) {
            return Err(AuditError::InvalidInput("escalation increment must be positive".into()));
        }
        if let InitialSize::Threshold { t } = &self.initial {
            if *t < BigRational::zero() {
                return Err(AuditError::BelowRange(t.to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Open,
    Confirmed,
    /// Escalation has reached every precinct; the remaining ones must be counted.
    FullCountRequired,
    FullCountComplete,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Confirmed | Status::FullCountComplete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Confirmed,
    Escalate,
    /// Every precinct was hand counted; the hand count decides.
    FullCount,
}

/// Cumulative sample sizes for a stage, one per stratum. The simple design has a
/// single stratum; the county designs have one per county.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    /// `n_s`: the overall size the strata sizes were derived from.
    pub nominal: usize,
    pub strata: Vec<usize>,
}

impl Targets {
    pub fn total(&self) -> usize {
        self.strata.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountyResult {
    pub county_id: String,
    pub n: usize,
    pub margin: u64,
    #[serde(with = "rational::as_string")]
    pub statistic: BigRational,
    pub q: usize,
    pub p_value: Probability,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullCountResult {
    pub reported_winners: Vec<String>,
    pub hand_count_winners: Vec<String>,
    pub outcome_confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u32,
    /// Cumulative number of precincts audited.
    pub n: usize,
    pub strata_sizes: Vec<usize>,
    /// Sample size used for the with-replacement bound in the proportional design.
    pub n_eff: Option<usize>,
    /// `α_s`; absent for a full count past a fixed schedule.
    #[serde(with = "rational::opt_as_string")]
    pub alpha: Option<BigRational>,
    #[serde(with = "rational::as_string")]
    pub statistic: BigRational,
    pub q: usize,
    pub p_value: Probability,
    pub counties: Vec<CountyResult>,
    pub zero_sample_counties: Vec<String>,
    pub decision: Decision,
    pub next: Option<Targets>,
    pub full_count: Option<FullCountResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum Event {
    Created { contest: Contest, config: SessionConfig },
    Drawn { stage: u32, precincts: Vec<String> },
    TallyRecorded { tally: HandTally, overstatement: u64 },
    Evaluated { record: StageRecord },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    /// Hypothetical tallies for sampled precincts not yet recorded.
    #[serde(default)]
    pub tallies: Vec<HandTally>,
    /// Hypothetical cumulative sample size, assuming no larger statistic appears.
    #[serde(default)]
    pub sample_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub projection: bool,
    pub stage: u32,
    pub n: usize,
    #[serde(with = "rational::opt_as_string")]
    pub alpha: Option<BigRational>,
    #[serde(with = "rational::as_string")]
    pub statistic: BigRational,
    pub q: usize,
    pub p_value: Probability,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
struct StageDraw {
    targets: Targets,
    precincts: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Recorded {
    tally: HandTally,
    overstatement: u64,
}

#[derive(Debug, Clone)]
pub struct AuditSession {
    id: String,
    contest: Contest,
    config: SessionConfig,
    pooled: PooledContest,
    bounds: ErrorBounds,
    weights: Weights,
    strata: Vec<County>,
    plan: InitialSampleSize,
    initial: Targets,
    draws: Vec<StageDraw>,
    sampled: Vec<bool>,
    tallies: BTreeMap<usize, Recorded>,
    records: Vec<StageRecord>,
    status: Status,
    events: Vec<Event>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the canonical JSON encoding of an event log.
pub fn log_hash(events: &[Event]) -> String {
    sha256_hex(&serde_json::to_vec(events).expect("events serialize"))
}

impl AuditSession {
    pub fn create(contest: Contest, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let pooled = pool_losers(&contest, config.pooling);
        let weights = Weights::for_contest(config.weight, &contest)?;
        let bounds = compute_bounds(&contest, &pooled, &config.bound)?;
        let population = contest.num_precincts();
        let strata = match config.design {
            DesignKind::Simple => vec![County {
                id: String::new(),
                precincts: (0..population).collect(),
                opportunities: contest.opportunities(),
            }],
            _ => contest.counties().to_vec(),
        };
        let sizes: Vec<usize> = strata.iter().map(|s| s.precincts.len()).collect();

        let alpha1 = alpha_for_stage(&config.alpha, config.alpha_rule, 1)?;
        let plan = match &config.initial {
            InitialSize::Count { n } => {
                if *n == 0 || *n > population {
                    return Err(AuditError::InvalidInput(format!(
                        "initial sample size {n} must lie in 1..={population}"
                    )));
                }
                let alloc = match config.design {
                    DesignKind::Simple => vec![*n],
                    _ => proportional_allocation(*n, &sizes),
                };
                InitialSampleSize {
                    design: config.design,
                    n: *n,
                    population,
                    counties: Vec::new(),
                }
                .with_allocation(&strata, alloc, config.design, pooled.margin(), contest.opportunities())
            }
            InitialSize::Threshold { t } => initial_sample_size(
                t,
                &alpha1,
                &bounds.bounds,
                &weights,
                pooled.margin(),
                config.design,
                contest.counties(),
                contest.opportunities(),
            )?,
        };
        let initial = match config.design {
            DesignKind::Simple => Targets {
                nominal: plan.n,
                strata: vec![plan.n],
            },
            DesignKind::StratifiedProportional => Targets {
                nominal: plan.n,
                strata: plan.counties.iter().map(|c| c.n).collect(),
            },
            DesignKind::PerCounty => Targets {
                nominal: plan.n,
                strata: plan.counties.iter().map(|c| c.n).collect(),
            },
        };

        let created = Event::Created { contest, config };
        let id = sha256_hex(&serde_json::to_vec(&created).expect("event serializes"))[..16].to_string();
        let Event::Created { contest, config } = created.clone() else { unreachable!() };
        Ok(Self {
            id,
            sampled: vec![false; population],
            contest,
            config,
            pooled,
            bounds,
            weights,
            strata,
            plan,
            initial,
            draws: Vec::new(),
            tallies: BTreeMap::new(),
            records: Vec::new(),
            status: Status::Open,
            events: vec![created],
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn contest(&self) -> &Contest {
        &self.contest
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn pooled(&self) -> &PooledContest {
        &self.pooled
    }

    pub fn bounds(&self) -> &ErrorBounds {
        &self.bounds
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn plan(&self) -> &InitialSampleSize {
        &self.plan
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn log_hash(&self) -> String {
        log_hash(&self.events)
    }

    /// Number of stages drawn so far.
    pub fn stage(&self) -> u32 {
        self.draws.len() as u32
    }

    /// The drawn stage awaiting evaluation, if any.
    pub fn pending_stage(&self) -> Option<u32> {
        (self.draws.len() > self.records.len()).then_some(self.draws.len() as u32)
    }

    /// Cumulative sample, in draw order.
    pub fn sample(&self) -> Vec<usize> {
        self.draws.iter().flat_map(|d| d.precincts.iter().copied()).collect()
    }

    /// Precincts drawn at each stage.
    pub fn stage_samples(&self) -> Vec<Vec<usize>> {
        self.draws.iter().map(|d| d.precincts.clone()).collect()
    }

    pub fn overstatement(&self, p: usize) -> Option<u64> {
        self.tallies.get(&p).map(|r| r.overstatement)
    }

    pub fn tally(&self, p: usize) -> Option<&HandTally> {
        self.tallies.get(&p).map(|r| &r.tally)
    }

    fn stage_alpha(&self, stage: u32) -> Option<BigRational> {
        alpha_for_stage(&self.config.alpha, self.config.alpha_rule, stage).ok()
    }

    fn full_targets(&self) -> Targets {
        Targets {
            nominal: self.contest.num_precincts(),
            strata: self.strata.iter().map(|s| s.precincts.len()).collect(),
        }
    }

    /// Targets for the next stage to be drawn.
    pub fn next_targets(&self) -> Result<Targets> {
        if self.status.is_terminal() {
            return Err(AuditError::AlreadyComplete);
        }
        if let Some(stage) = self.pending_stage() {
            return Err(AuditError::StageAlreadyDrawn(stage));
        }
        Ok(match self.records.last() {
            None => self.initial.clone(),
            Some(record) => record.next.clone().ok_or(AuditError::AlreadyComplete)?,
        })
    }

    /// Draws the next stage's additional precincts and returns their ids in draw
    /// order.
    pub fn draw(&mut self) -> Result<Vec<String>> {
        let targets = self.next_targets()?;
        let stage = self.stage() + 1;
        let mut drawn = Vec::new();
        for (stratum, &target) in self.strata.iter().zip(&targets.strata) {
            let eligible: Vec<usize> = stratum.precincts.iter().copied().filter(|&p| !self.sampled[p]).collect();
            let current = stratum.precincts.len() - eligible.len();
            let k = target.checked_sub(current).ok_or_else(|| {
                AuditError::InvalidInput(format!("stage {stage} target {target} is below the current sample"))
            })?;
            let mut rng = AuditRng::new(self.config.seed, &self.contest.id, stage, &stratum.id);
            drawn.extend(draw_precincts(&mut rng, &self.contest, &eligible, k)?);
        }
        for &p in &drawn {
            self.sampled[p] = true;
        }
        let ids: Vec<String> = drawn.iter().map(|&p| self.contest.precincts[p].id.clone()).collect();
        self.draws.push(StageDraw {
            targets,
            precincts: drawn,
        });
        self.events.push(Event::Drawn {
            stage,
            precincts: ids.clone(),
        });
        Ok(ids)
    }

    /// Records hand tallies for sampled precincts. The batch is checked in full
    /// before anything is stored. Returns `(precinct_id, e_p)` pairs.
    pub fn record(&mut self, tallies: Vec<HandTally>) -> Result<Vec<(String, u64)>> {
        if self.status.is_terminal() {
            return Err(AuditError::AlreadyComplete);
        }
        let mut checked = Vec::with_capacity(tallies.len());
        for tally in tallies {
            let p = self
                .contest
                .precinct_index(&tally.precinct_id)
                .ok_or_else(|| AuditError::UnknownPrecinct(tally.precinct_id.clone()))?;
            if !self.sampled[p] {
                return Err(AuditError::NotInSample(tally.precinct_id));
            }
            if self.tallies.contains_key(&p) || checked.iter().any(|(q, _, _)| *q == p) {
                return Err(AuditError::DuplicateTally(tally.precinct_id));
            }
            let e = precinct_overstatement(&self.contest, &self.pooled, p, &tally)?;
            checked.push((p, tally, e));
        }
        let mut out = Vec::with_capacity(checked.len());
        for (p, tally, overstatement) in checked {
            out.push((tally.precinct_id.clone(), overstatement));
            self.events.push(Event::TallyRecorded {
                tally: tally.clone(),
                overstatement,
            });
            self.tallies.insert(p, Recorded { tally, overstatement });
        }
        Ok(out)
    }

    /// Sampled precincts with no recorded tally, by id.
    pub fn missing_tallies(&self) -> Vec<String> {
        self.sample()
            .into_iter()
            .filter(|p| !self.tallies.contains_key(p))
            .map(|p| self.contest.precincts[p].id.clone())
            .collect()
    }

    /// Evaluates the open stage: confirm, escalate, or settle by full count.
    pub fn evaluate(&mut self) -> Result<StageRecord> {
        if self.status.is_terminal() {
            return Err(AuditError::AlreadyComplete);
        }
        let stage = self.pending_stage().ok_or(AuditError::NoOpenStage)?;
        let missing = self.missing_tallies();
        if !missing.is_empty() {
            return Err(AuditError::MissingTallies(missing));
        }
        let targets = self.draws.last().expect("pending stage").targets.clone();
        let record = self.assess(stage, &targets)?;
        self.status = match record.decision {
            Decision::Confirmed => Status::Confirmed,
            Decision::FullCount => Status::FullCountComplete,
            Decision::Escalate => {
                let next = record.next.as_ref().expect("escalation has targets");
                if next.total() == self.contest.num_precincts() {
                    Status::FullCountRequired
                } else {
                    Status::Open
                }
            }
        };
        self.records.push(record.clone());
        self.events.push(Event::Evaluated { record: record.clone() });
        Ok(record)
    }

    fn stratum_sample(&self, stratum: &County) -> Vec<usize> {
        stratum.precincts.iter().copied().filter(|&p| self.tallies.contains_key(&p)).collect()
    }

    fn statistic_over(&self, precincts: &[usize]) -> Result<BigRational> {
        if precincts.is_empty() {
            return Ok(BigRational::zero());
        }
        let pairs: Vec<(usize, u64)> = precincts.iter().map(|&p| (p, self.tallies[&p].overstatement)).collect();
        sample_statistic(&self.weights, &pairs)
    }

    fn county_queries(&self, sizes: &[usize]) -> Result<Vec<(CountyQuery, BigRational)>> {
        let margin = self.pooled.margin();
        self.strata
            .iter()
            .zip(sizes)
            .map(|(county, &n)| {
                let t = self.statistic_over(&self.stratum_sample(county))?;
                let query = CountyQuery {
                    t: t.clone(),
                    n,
                    bounds: self.bounds.subset(&county.precincts).bounds,
                    weights: self.weights.subset(&county.precincts),
                    margin: county_margin_threshold(margin, county.opportunities, self.contest.opportunities()),
                };
                Ok((query, t))
            })
            .collect()
    }

    fn assess(&self, stage: u32, targets: &Targets) -> Result<StageRecord> {
        let population = self.contest.num_precincts();
        let sample = self.sample();
        let n = sample.len();
        let alpha = self.stage_alpha(stage);
        let statistic = self.statistic_over(&sample)?;
        let margin = self.pooled.margin();
        let mut n_eff = None;
        let mut counties = Vec::new();
        let mut zero_sample_counties = Vec::new();

        let (q, p_value) = match self.config.design {
            DesignKind::Simple => {
                let tail = tail_without_replacement(&statistic, n, &self.bounds.bounds, &self.weights, margin)?;
                (tail.q, tail.p_value)
            }
            DesignKind::StratifiedProportional => {
                let sizes: Vec<usize> = self.strata.iter().map(|s| s.precincts.len()).collect();
                let result = stratified_pvalue_proportional(
                    &statistic,
                    &targets.strata,
                    &sizes,
                    &self.bounds.bounds,
                    &self.weights,
                    margin,
                    Some(targets.nominal),
                )?;
                n_eff = Some(result.n_eff);
                zero_sample_counties = result
                    .zero_sample_counties
                    .iter()
                    .map(|&c| self.strata[c].id.clone())
                    .collect();
                (result.tail.q, result.tail.p_value)
            }
            DesignKind::PerCounty => {
                let queries = self.county_queries(&targets.strata)?;
                let plain: Vec<CountyQuery> = queries.iter().map(|(q, _)| q.clone()).collect();
                let (worst, results) = per_county_pvalue(&plain)?;
                for ((county, (query, t)), result) in self.strata.iter().zip(queries).zip(&results) {
                    counties.push(CountyResult {
                        county_id: county.id.clone(),
                        n: query.n,
                        margin: query.margin,
                        statistic: t,
                        q: result.q,
                        p_value: result.p_value.clone(),
                    });
                }
                let worst_q = results.iter().find(|r| r.p_value == worst).map_or(0, |r| r.q);
                (worst_q, worst)
            }
        };

        let mut record = StageRecord {
            stage,
            n,
            strata_sizes: targets.strata.clone(),
            n_eff,
            alpha: alpha.clone(),
            statistic,
            q,
            p_value,
            counties,
            zero_sample_counties,
            decision: Decision::Escalate,
            next: None,
            full_count: None,
        };
        if n == population {
            record.decision = Decision::FullCount;
            record.full_count = Some(self.full_count_result());
        } else if alpha.as_ref().is_some_and(|a| record.p_value.exact() <= a) {
            record.decision = Decision::Confirmed;
        } else {
            record.next = Some(self.escalate(stage, targets, &record)?);
        }
        Ok(record)
    }

    fn full_count_result(&self) -> FullCountResult {
        let k = self.contest.candidates.len();
        let mut actual = vec![0u64; k];
        for recorded in self.tallies.values() {
            for (total, v) in actual.iter_mut().zip(&recorded.tally.votes) {
                *total += v;
            }
        }
        let names = |ks: &[usize]| ks.iter().map(|&k| self.contest.candidates[k].name.clone()).collect::<Vec<_>>();
        let (reported, hand) = match &self.contest.supermajority {
            Some(threshold) => {
                let passes = |v: &[u64]| supermajority_margin(v[0], v[1], threshold).is_ok();
                let side = |pass: bool| if pass { vec![0] } else { vec![1] };
                (side(passes(&self.contest.candidate_totals())), side(passes(&actual)))
            }
            None => {
                let f = self.contest.f as usize;
                (
                    apparent_outcome(&self.contest.candidate_totals(), f, None).winners,
                    apparent_outcome(&actual, f, None).winners,
                )
            }
        };
        FullCountResult {
            outcome_confirmed: reported == hand,
            reported_winners: names(&reported),
            hand_count_winners: names(&hand),
        }
    }

    /// Next stage's targets after `record` failed to confirm at `stage`.
    fn escalate(&self, stage: u32, current: &Targets, record: &StageRecord) -> Result<Targets> {
        let population = self.contest.num_precincts();
        let next_alpha = match self.config.alpha_rule {
            AlphaRule::Fixed { stages } if stage >= stages => return Ok(self.full_targets()),
            rule => alpha_for_stage(&self.config.alpha, rule, stage + 1)?,
        };
        let margin = self.pooled.margin();
        let grow = |n: usize, size: usize, p_below: &dyn Fn(usize) -> Result<bool>| -> Result<usize> {
            let next = match self.config.escalation {
                EscalationRule::FixedIncrement { increment } => n + increment.unwrap_or_else(|| default_increment(size)),
                EscalationRule::MinimalConfirming => smallest_satisfying(size, p_below)?,
            };
            Ok(next.max(n + 1).min(size))
        };

        let targets = match self.config.design {
            DesignKind::Simple => {
                let q = compute_q(&record.statistic, &self.bounds.bounds, &self.weights, margin)?;
                let n = grow(current.nominal, population, &|m| {
                    Ok(pi_star(q, m, population)?.exact() < &next_alpha)
                })?;
                Targets {
                    nominal: n,
                    strata: vec![n],
                }
            }
            DesignKind::StratifiedProportional => {
                let sizes: Vec<usize> = self.strata.iter().map(|s| s.precincts.len()).collect();
                let q = compute_q(&record.statistic, &self.bounds.bounds, &self.weights, margin)?;
                let mut n = grow(current.nominal, population, &|m| {
                    Ok(pi_diamond(q, m, population).exact() < &next_alpha)
                })?;
                let current_total = current.total();
                while n < population && proportional_allocation(n, &sizes).iter().sum::<usize>() <= current_total {
                    n += 1;
                }
                Targets {
                    nominal: n,
                    strata: proportional_allocation(n, &sizes),
                }
            }
            DesignKind::PerCounty => {
                let mut strata = current.strata.clone();
                for (c, county) in record.counties.iter().enumerate() {
                    let size = self.strata[c].precincts.len();
                    if county.p_value.exact() <= &next_alpha || current.strata[c] >= size {
                        continue;
                    }
                    let q = county.q;
                    strata[c] = grow(current.strata[c], size, &|m| Ok(pi_star(q, m, size)?.exact() < &next_alpha))?;
                }
                if strata == current.strata {
                    return Ok(self.full_targets());
                }
                Targets {
                    nominal: strata.iter().sum(),
                    strata,
                }
            }
        };
        if targets.total() >= population {
            return Ok(self.full_targets());
        }
        Ok(targets)
    }

    /// Projects a decision without changing the session.
    pub fn what_if(&self, request: &WhatIfRequest) -> Result<WhatIfResult> {
        let mut sim = self.clone();
        if !request.tallies.is_empty() {
            sim.record(request.tallies.clone())?;
        }
        let Some(n) = request.sample_size else {
            let record = sim.evaluate()?;
            return Ok(WhatIfResult {
                projection: true,
                stage: record.stage,
                n: record.n,
                alpha: record.alpha,
                statistic: record.statistic,
                q: record.q,
                p_value: record.p_value,
                decision: record.decision,
            });
        };

        let population = self.contest.num_precincts();
        if n > population {
            return Err(AuditError::SampleTooLarge { n, population });
        }
        if n == 0 {
            return Err(AuditError::InvalidInput("projected sample size must be positive".into()));
        }
        if sim.status.is_terminal() {
            return Err(AuditError::AlreadyComplete);
        }
        let stage = sim.pending_stage().unwrap_or(sim.stage() + 1);
        let alpha = sim.stage_alpha(stage);
        let tallied: Vec<usize> = sim.tallies.keys().copied().collect();
        let statistic = sim.statistic_over(&tallied)?;
        let margin = sim.pooled.margin();
        let (q, p_value) = match sim.config.design {
            DesignKind::Simple => {
                let q = compute_q(&statistic, &sim.bounds.bounds, &sim.weights, margin)?;
                (q, pi_star(q, n, population)?)
            }
            DesignKind::StratifiedProportional => {
                let q = compute_q(&statistic, &sim.bounds.bounds, &sim.weights, margin)?;
                (q, pi_diamond(q, n, population))
            }
            DesignKind::PerCounty => {
                let sizes: Vec<usize> = sim.strata.iter().map(|s| s.precincts.len()).collect();
                let queries: Vec<CountyQuery> = sim
                    .county_queries(&proportional_allocation(n, &sizes))?
                    .into_iter()
                    .map(|(q, _)| q)
                    .collect();
                let (worst, results) = per_county_pvalue(&queries)?;
                let q = results.iter().find(|r| r.p_value == worst).map_or(0, |r| r.q);
                (q, worst)
            }
        };
        let decision = if n == population {
            Decision::FullCount
        } else if alpha.as_ref().is_some_and(|a| p_value.exact() <= a) {
            Decision::Confirmed
        } else {
            Decision::Escalate
        };
        Ok(WhatIfResult {
            projection: true,
            stage,
            n,
            alpha,
            statistic,
            q,
            p_value,
            decision,
        })
    }

    /// Rebuilds a session by re-running every event, checking each outcome.
    pub fn replay(events: &[Event]) -> Result<Self> {
        let corrupt = |what: String| AuditError::CorruptSession(what);
        let Some(Event::Created { contest, config }) = events.first() else {
            return Err(corrupt("event log does not start with session creation".into()));
        };
        let mut session = Self::create(contest.clone(), config.clone())?;
        for event in &events[1..] {
            match event {
                Event::Created { .. } => return Err(corrupt("duplicate creation event".into())),
                Event::Drawn { stage, precincts } => {
                    let drawn = session.draw()?;
                    if drawn != *precincts || session.stage() != *stage {
                        return Err(corrupt(format!("stage {stage} draw does not reproduce from the seed")));
                    }
                }
                Event::TallyRecorded { tally, overstatement } => {
                    let out = session.record(vec![tally.clone()])?;
                    if out[0].1 != *overstatement {
                        return Err(corrupt(format!("overstatement for {} does not reproduce", tally.precinct_id)));
                    }
                }
                Event::Evaluated { record } => {
                    if session.evaluate()? != *record {
                        return Err(corrupt(format!("stage {} evaluation does not reproduce", record.stage)));
                    }
                }
            }
        }
        Ok(session)
    }

    pub fn to_file(&self) -> SessionFile {
        SessionFile {
            schema_version: SESSION_SCHEMA_VERSION,
            session_id: self.id.clone(),
            status: self.status,
            stage: self.stage(),
            log_hash: self.log_hash(),
            events: self.events.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("session serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SessionFile =
            serde_json::from_str(text).map_err(|e| AuditError::CorruptSession(format!("unreadable session: {e}")))?;
        Self::from_file(file)
    }

    pub fn from_file(file: SessionFile) -> Result<Self> {
        if file.schema_version != SESSION_SCHEMA_VERSION {
            return Err(AuditError::CorruptSession(format!(
                "unsupported schema version {}",
                file.schema_version
            )));
        }
        if log_hash(&file.events) != file.log_hash {
            return Err(AuditError::CorruptSession("event log hash mismatch".into()));
        }
        let session = Self::replay(&file.events).map_err(|e| match e {
            AuditError::CorruptSession(_) => e,
            other => AuditError::CorruptSession(format!("replay failed: {other}")),
        })?;
        if session.id != file.session_id || session.status != file.status || session.stage() != file.stage {
            return Err(AuditError::CorruptSession("summary fields disagree with the event log".into()));
        }
        Ok(session)
    }

    /// Full state for clients.
    pub fn state(&self) -> SessionState {
        let stage_of: BTreeMap<usize, u32> = self
            .draws
            .iter()
            .enumerate()
            .flat_map(|(s, d)| d.precincts.iter().map(move |&p| (p, s as u32 + 1)))
            .collect();
        SessionState {
            session_id: self.id.clone(),
            contest_id: self.contest.id.clone(),
            config: self.config.clone(),
            status: self.status,
            stage: self.stage(),
            pending_stage: self.pending_stage(),
            population: self.contest.num_precincts(),
            margin: self.pooled.margin(),
            pooled: self.pooled.clone(),
            bounds: self.bounds.clone(),
            plan: self.plan.clone(),
            next_targets: self.next_targets().ok(),
            sample: self
                .sample()
                .into_iter()
                .map(|p| SampledPrecinct {
                    precinct_id: self.contest.precincts[p].id.clone(),
                    county_id: self.contest.precincts[p].county.clone(),
                    stage: stage_of[&p],
                    overstatement: self.overstatement(p),
                })
                .collect(),
            stages: self.records.clone(),
            log_hash: self.log_hash(),
        }
    }
}

impl InitialSampleSize {
    fn with_allocation(
        mut self,
        strata: &[County],
        alloc: Vec<usize>,
        design: DesignKind,
        margin: u64,
        opportunities: u64,
    ) -> Self {
        if design != DesignKind::Simple {
            self.counties = strata
                .iter()
                .zip(alloc)
                .map(|(c, n)| crate::tail::CountyPlan {
                    county_id: c.id.clone(),
                    precincts: c.precincts.len(),
                    margin: if design == DesignKind::PerCounty {
                        county_margin_threshold(margin, c.opportunities, opportunities)
                    } else {
                        margin
                    },
                    n,
                })
                .collect();
        }
        self
    }
}

/// The persisted form of a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFile {
    pub schema_version: u32,
    pub session_id: String,
    pub status: Status,
    pub stage: u32,
    pub log_hash: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledPrecinct {
    pub precinct_id: String,
    pub county_id: String,
    pub stage: u32,
    /// `e_p` once the hand tally is in.
    pub overstatement: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub contest_id: String,
    pub config: SessionConfig,
    pub status: Status,
    pub stage: u32,
    pub pending_stage: Option<u32>,
    pub population: usize,
    pub margin: u64,
    pub pooled: PooledContest,
    pub bounds: ErrorBounds,
    pub plan: InitialSampleSize,
    pub next_targets: Option<Targets>,
    pub sample: Vec<SampledPrecinct>,
    pub stages: Vec<StageRecord>,
    pub log_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::sausalito;
    use crate::rational::ratio;

    fn sausalito_session(n1: usize, alpha: BigRational) -> AuditSession {
        let mut config = SessionConfig::new(alpha, 20061107);
        config.initial = InitialSize::Count { n: n1 };
        AuditSession::create(sausalito(), config).unwrap()
    }

    fn tally_all(session: &mut AuditSession, ids: &[String]) {
        let tallies = ids
            .iter()
            .map(|id| HandTally::matching_reported(session.contest(), session.contest().precinct_index(id).unwrap()))
            .collect();
        session.record(tallies).unwrap();
    }

    #[test]
    fn alpha_schedules() {
        let alpha = ratio(1, 10);
        assert_eq!(alpha_for_stage(&alpha, AlphaRule::Halving, 1).unwrap(), ratio(1, 20));
        assert_eq!(alpha_for_stage(&alpha, AlphaRule::Halving, 3).unwrap(), ratio(1, 80));
        assert_eq!(alpha_for_stage(&alpha, AlphaRule::Fixed { stages: 5 }, 4).unwrap(), ratio(1, 50));
        assert_eq!(
            alpha_for_stage(&alpha, AlphaRule::Fixed { stages: 5 }, 6).unwrap_err(),
            AuditError::StageBeyondS { stage: 6, stages: 5 }
        );
    }

    #[test]
    fn default_increment_is_two_percent_rounded_up() {
        assert_eq!(default_increment(4123), 83);
        assert_eq!(default_increment(9), 1);
    }

    #[test]
    fn parse_rules() {
        assert_eq!("fixed:4".parse::<AlphaRule>().unwrap(), AlphaRule::Fixed { stages: 4 });
        assert!("fixed:0".parse::<AlphaRule>().is_err());
        assert_eq!(
            "fixed-increment:5".parse::<EscalationRule>().unwrap(),
            EscalationRule::FixedIncrement { increment: Some(5) }
        );
    }

    #[test]
    fn draws_are_disjoint_and_deterministic() {
        let mut a = sausalito_session(3, ratio(1, 10));
        let mut b = sausalito_session(3, ratio(1, 10));
        let first = a.draw().unwrap();
        assert_eq!(first, b.draw().unwrap());
        assert_eq!(first.len(), 3);
        assert_eq!(a.draw().unwrap_err(), AuditError::StageAlreadyDrawn(1));
    }

    #[test]
    fn full_sample_draws_everything() {
        let mut session = sausalito_session(9, ratio(1, 10));
        let mut ids = session.draw().unwrap();
        ids.sort();
        let mut all: Vec<String> = session.contest().precincts.iter().map(|p| p.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn record_rejects_unsampled_and_duplicate() {
        let mut session = sausalito_session(1, ratio(1, 10));
        let drawn = session.draw().unwrap();
        let other = session
            .contest()
            .precincts
            .iter()
            .position(|p| p.id != drawn[0])
            .unwrap();
        let err = session
            .record(vec![HandTally::matching_reported(session.contest(), other)])
            .unwrap_err();
        assert!(matches!(err, AuditError::NotInSample(_)));
        tally_all(&mut session, &drawn);
        let p = session.contest().precinct_index(&drawn[0]).unwrap();
        let err = session
            .record(vec![HandTally::matching_reported(session.contest(), p)])
            .unwrap_err();
        assert!(matches!(err, AuditError::DuplicateTally(_)));
    }

    #[test]
    fn evaluate_requires_tallies() {
        let mut session = sausalito_session(2, ratio(1, 10));
        assert_eq!(session.evaluate().unwrap_err(), AuditError::NoOpenStage);
        session.draw().unwrap();
        assert!(matches!(session.evaluate().unwrap_err(), AuditError::MissingTallies(v) if v.len() == 2));
    }

    #[test]
    fn clean_full_count_confirms_reported_winners() {
        let mut session = sausalito_session(9, ratio(1, 10));
        let ids = session.draw().unwrap();
        tally_all(&mut session, &ids);
        let record = session.evaluate().unwrap();
        assert_eq!(record.decision, Decision::FullCount);
        assert_eq!(session.status(), Status::FullCountComplete);
        let full = record.full_count.unwrap();
        assert!(full.outcome_confirmed);
        assert_eq!(full.hand_count_winners, vec!["Thornton", "Hoyt", "Trotter"]);
        assert_eq!(session.draw().unwrap_err(), AuditError::AlreadyComplete);
    }

    #[test]
    fn escalation_increases_sample_until_resolution() {
        let mut session = sausalito_session(1, ratio(1, 10));
        let mut last = 0;
        while !session.status().is_terminal() {
            let ids = session.draw().unwrap();
            tally_all(&mut session, &ids);
            let record = session.evaluate().unwrap();
            assert!(record.n > last);
            last = record.n;
        }
        assert!(session.records().len() <= 9);
    }

    #[test]
    fn what_if_leaves_session_unchanged() {
        let mut session = sausalito_session(1, ratio(1, 10));
        let ids = session.draw().unwrap();
        let before = session.log_hash();
        let p = session.contest().precinct_index(&ids[0]).unwrap();
        let request = WhatIfRequest {
            tallies: vec![HandTally::matching_reported(session.contest(), p)],
            sample_size: None,
        };
        let projected = session.what_if(&request).unwrap();
        assert!(projected.projection);
        assert_eq!(session.log_hash(), before);
        assert!(session.what_if(&WhatIfRequest { tallies: vec![], sample_size: Some(10) }).is_err());
    }

    #[test]
    fn session_round_trips_through_json() {
        let mut session = sausalito_session(2, ratio(1, 10));
        let ids = session.draw().unwrap();
        tally_all(&mut session, &ids);
        session.evaluate().unwrap();
        let text = session.to_json();
        let loaded = AuditSession::from_json(&text).unwrap();
        assert_eq!(loaded.to_json(), text);
    }

    #[test]
    fn tampered_log_is_rejected() {
        let mut session = sausalito_session(2, ratio(1, 10));
        session.draw().unwrap();
        let mut file = session.to_file();
        if let Event::Drawn { precincts, .. } = &mut file.events[1] {
            precincts.reverse();
        }
        let err = AuditSession::from_file(file.clone()).unwrap_err();
        assert!(matches!(err, AuditError::CorruptSession(_)));
        file.log_hash = log_hash(&file.events);
        let err = AuditSession::from_file(file).unwrap_err();
        assert!(matches!(err, AuditError::CorruptSession(_)));
    }
}
