//! Workflow steps shared by the command line and the HTTP service, with the JSON
//! shapes both emit and their plain-text renderings.

use ballotaudit_core::bounds::{compute_bounds, BoundMethod};
use ballotaudit_core::contest::Contest;
use ballotaudit_core::discrepancy::HandTally;
use ballotaudit_core::pooling::{pool_losers, PoolingRule};
use ballotaudit_core::rational::{self, Probability};
use ballotaudit_core::session::{AuditSession, Decision, SessionConfig, StageRecord, Status};
use ballotaudit_core::tail::{initial_sample_size, DesignKind, InitialSampleSize};
use ballotaudit_core::weight::{WeightFamily, Weights};
use ballotaudit_core::Result;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

/// `α` with a subscript stage number, e.g. `α₁₂`.
pub fn alpha_symbol(stage: u32) -> String {
    let digits: String = stage
        .to_string()
        .chars()
        .map(|d| char::from_u32('₀' as u32 + d.to_digit(10).unwrap()).unwrap())
        .collect();
    format!("α{digits}")
}

/// `8/9 ≈ 88.9%`, or just the percentage when the fraction is unwieldy.
pub fn probability_text(p: &Probability) -> String {
    let exact = p.exact();
    if exact.is_integer() {
        return exact.to_string();
    }
    let fraction = exact.to_string();
    if fraction.len() <= 40 {
        format!("{fraction} ≈ {}", p.percent())
    } else {
        format!("≈ {}", p.percent())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContestSummary {
    pub contest_id: String,
    pub f: u64,
    pub precincts: usize,
    pub counties: Vec<String>,
    pub opportunities: u64,
    pub candidates: Vec<String>,
}

impl ContestSummary {
    pub fn of(contest: &Contest) -> Self {
        Self {
            contest_id: contest.id.clone(),
            f: contest.f,
            precincts: contest.num_precincts(),
            counties: contest.counties().iter().map(|c| c.id.clone()).collect(),
            opportunities: contest.opportunities(),
            candidates: contest.candidates.iter().map(|c| c.name.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub method: String,
    pub total: u64,
    pub largest: u64,
    pub largest_precinct: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanView {
    pub contest: ContestSummary,
    pub reported_winners: Vec<String>,
    pub margin: u64,
    pub pooling: String,
    pub pseudo_candidates: Vec<String>,
    pub bounds: BoundSummary,
    pub weight: String,
    pub design: String,
    #[serde(with = "rational::as_string")]
    pub alpha: BigRational,
    #[serde(with = "rational::as_string")]
    pub threshold: BigRational,
    pub plan: InitialSampleSize,
}

pub struct PlanRequest {
    pub alpha: BigRational,
    pub threshold: BigRational,
    pub weight: WeightFamily,
    pub bound: BoundMethod,
    pub pooling: PoolingRule,
    pub design: DesignKind,
}

pub fn plan(contest: &Contest, request: &PlanRequest) -> Result<PlanView> {
    let pooled = pool_losers(contest, request.pooling);
    let bounds = compute_bounds(contest, &pooled, &request.bound)?;
    let weights = Weights::for_contest(request.weight, contest)?;
    let plan = initial_sample_size(
        &request.threshold,
        &request.alpha,
        &bounds.bounds,
        &weights,
        pooled.margin(),
        request.design,
        contest.counties(),
        contest.opportunities(),
    )?;
    let (largest_index, largest) = bounds
        .bounds
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap_or((0, 0));
    Ok(PlanView {
        contest: ContestSummary::of(contest),
        reported_winners: pooled.winners().iter().map(|&k| pooled.candidates[k].label.clone()).collect(),
        margin: pooled.margin(),
        pooling: pooled.rule.to_string(),
        pseudo_candidates: pooled.losers().iter().map(|&k| pooled.candidates[k].label.clone()).collect(),
        bounds: BoundSummary {
            method: request.bound.to_string(),
            total: bounds.total(),
            largest,
            largest_precinct: contest.precincts[largest_index].id.clone(),
        },
        weight: request.weight.to_string(),
        design: request.design.to_string(),
        alpha: request.alpha.clone(),
        threshold: request.threshold.clone(),
        plan,
    })
}

impl PlanView {
    pub fn to_text(&self) -> String {
        let c = &self.contest;
        let mut out = format!(
            "contest {}: {} precincts in {} county(ies), vote for {}, {} voting opportunities\n",
            c.contest_id,
            c.precincts,
            c.counties.len(),
            c.f,
            c.opportunities
        );
        out += &format!(
            "reported winners: {}; margin M = {}\n",
            self.reported_winners.join(", "),
            self.margin
        );
        out += &format!("apparent losers ({}): {}\n", self.pooling, self.pseudo_candidates.join("; "));
        out += &format!(
            "error bounds ({}): total {}, largest {} in precinct {}\n",
            self.bounds.method, self.bounds.total, self.bounds.largest, self.bounds.largest_precinct
        );
        out += &format!(
            "weight {}, design {}, risk limit {}, tolerated statistic {}\n",
            self.weight, self.design, self.alpha, self.threshold
        );
        for county in &self.plan.counties {
            out += &format!(
                "  county {}: n = {} of {} (county margin {})\n",
                county.county_id, county.n, county.precincts, county.margin
            );
        }
        let n = self.plan.n;
        let population = self.plan.population;
        if self.plan.is_full_count() {
            out += &format!("n₁ = {n} of {population} (full hand count required to plan at this threshold)\n");
        } else {
            out += &format!("n₁ = {n} of {population}\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatedView {
    pub session_id: String,
    pub contest_id: String,
    pub seed: u64,
    pub population: usize,
    pub margin: u64,
    pub initial_sample: usize,
    pub status: Status,
}

pub fn create(contest: Contest, config: SessionConfig) -> Result<(AuditSession, CreatedView)> {
    let session = AuditSession::create(contest, config)?;
    let view = CreatedView {
        session_id: session.id().to_string(),
        contest_id: session.contest().id.clone(),
        seed: session.config().seed,
        population: session.contest().num_precincts(),
        margin: session.pooled().margin(),
        initial_sample: session.plan().n,
        status: session.status(),
    };
    Ok((session, view))
}

impl CreatedView {
    pub fn to_text(&self) -> String {
        format!(
            "created session {} for contest {} (seed {}); margin M = {}; n₁ = {} of {}\n",
            self.session_id, self.contest_id, self.seed, self.margin, self.initial_sample, self.population
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawView {
    pub session_id: String,
    pub stage: u32,
    pub precincts: Vec<String>,
}

pub fn draw(session: &mut AuditSession) -> Result<DrawView> {
    let precincts = session.draw()?;
    Ok(DrawView {
        session_id: session.id().to_string(),
        stage: session.pending_stage().expect("a stage is open after drawing"),
        precincts,
    })
}

impl DrawView {
    pub fn to_text(&self) -> String {
        format!(
            "stage {}: drew {} precinct(s): {}\n",
            self.stage,
            self.precincts.len(),
            self.precincts.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedTally {
    pub precinct_id: String,
    pub overstatement: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordView {
    pub session_id: String,
    pub recorded: Vec<RecordedTally>,
    pub missing: Vec<String>,
}

pub fn record(session: &mut AuditSession, tallies: Vec<HandTally>) -> Result<RecordView> {
    let recorded = session
        .record(tallies)?
        .into_iter()
        .map(|(precinct_id, overstatement)| RecordedTally {
            precinct_id,
            overstatement,
        })
        .collect();
    Ok(RecordView {
        session_id: session.id().to_string(),
        recorded,
        missing: session.missing_tallies(),
    })
}

impl RecordView {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.recorded {
            out += &format!("recorded {}: overstatement e = {}\n", r.precinct_id, r.overstatement);
        }
        if self.missing.is_empty() {
            out += "all sampled precincts tallied\n";
        } else {
            out += &format!("awaiting tallies for: {}\n", self.missing.join(", "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluateView {
    pub session_id: String,
    pub status: Status,
    pub summary: String,
    pub record: StageRecord,
}

fn stage_summary(record: &StageRecord, status: Status, population: usize) -> String {
    let alpha = || {
        record
            .alpha
            .as_ref()
            .map(|a| format!("{} = {a}", alpha_symbol(record.stage)))
            .unwrap_or_else(|| alpha_symbol(record.stage))
    };
    let p = probability_text(&record.p_value);
    match record.decision {
        Decision::Confirmed => format!("Confirmed; stage P-value {p} ≤ {}", alpha()),
        Decision::Escalate => {
            let next = record.next.as_ref().map_or(0, |t| t.total());
            let plan = if status == Status::FullCountRequired {
                format!("expand to all {population} precincts (full hand count)")
            } else {
                format!("expand to n = {next} of {population}")
            };
            format!("Escalate; stage P-value {p} > {}; {plan}", alpha())
        }
        Decision::FullCount => {
            let full = record.full_count.as_ref().expect("full count result");
            format!(
                "Full count complete; hand-count winners reported: {} (reported outcome {})",
                full.hand_count_winners.join(", "),
                if full.outcome_confirmed { "confirmed" } else { "overturned" }
            )
        }
    }
}

pub fn evaluate(session: &mut AuditSession) -> Result<EvaluateView> {
    let record = session.evaluate()?;
    let status = session.status();
    Ok(EvaluateView {
        session_id: session.id().to_string(),
        status,
        summary: stage_summary(&record, status, session.contest().num_precincts()),
        record,
    })
}

impl EvaluateView {
    pub fn to_text(&self) -> String {
        let r = &self.record;
        format!(
            "stage {}: n = {}, statistic {}, q = {}\n{}\n",
            r.stage, r.n, r.statistic, r.q, self.summary
        )
    }
}
