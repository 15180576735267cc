use std::collections::HashSet;
use std::path::Path;

use ballotaudit_core::bounds::{compute_bounds, BoundMethod};
use ballotaudit_core::contest::Contest;
use ballotaudit_core::discrepancy::{precinct_overstatement, sample_statistic, HandTally};
use ballotaudit_core::pooling::{pool_losers, PoolingRule};
use ballotaudit_core::rational::{self, Probability};
use ballotaudit_core::report::session_report;
use ballotaudit_core::session::{AuditSession, InitialSize, SessionConfig};
use ballotaudit_core::tail::{compute_q, pi_diamond, pi_star, stratified_pvalue_proportional};
use ballotaudit_core::weight::{WeightFamily, Weights};
use ballotaudit_core::AuditError;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::args::{BoundsArgs, Cli, Command, ContestArgs, CreateArgs, PlanArgs, PvalueArgs, RunAction, SessionArgs};
use crate::files::{self, FileError};
use crate::views::{self, PlanRequest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Service(String),
}

impl CliError {
    /// 1 for domain and file errors, 2 for usage errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Outcome = Result<String, CliError>;

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce(&T) -> String) -> String {
    if json {
        serde_json::to_string_pretty(value).expect("views serialize") + "\n"
    } else {
        text(value)
    }
}

fn load_contest(args: &ContestArgs) -> Result<Contest, CliError> {
    Ok(files::read_contest(&args.contest, args.contest_id.as_deref(), args.f)?)
}

fn load_session(path: &Path) -> Result<AuditSession, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.to_owned(),
        source,
    })?;
    AuditSession::from_json(&text).map_err(|source| {
        FileError::Audit {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

fn save_session(path: &Path, session: &AuditSession) -> Result<(), CliError> {
    Ok(files::write_atomic(path, &session.to_json())?)
}

/// Runs one parsed command and returns what it prints on success.
pub fn execute(cli: Cli) -> Outcome {
    match cli.command {
        Command::Plan(args) => plan(args),
        Command::Run { action } => run(action),
        Command::Pvalue(args) => pvalue(args),
        Command::Bounds(args) => bounds(args),
        Command::Serve(args) => crate::service::serve_blocking(args).map(|()| String::new()),
    }
}

fn plan(args: PlanArgs) -> Outcome {
    let contest = load_contest(&args.contest)?;
    let view = views::plan(
        &contest,
        &PlanRequest {
            alpha: args.alpha,
            threshold: args.threshold,
            weight: args.method.weight,
            bound: args.method.bound,
            pooling: args.method.pooling,
            design: args.design,
        },
    )?;
    Ok(emit(args.json, &view, views::PlanView::to_text))
}

/// The session configuration a `run create` invocation describes.
pub fn session_config(args: &CreateArgs) -> SessionConfig {
    let mut config = SessionConfig::new(args.alpha.clone(), args.seed);
    config.alpha_rule = args.alpha_rule;
    config.escalation = args.escalation;
    config.design = args.design;
    config.pooling = args.method.pooling;
    config.weight = args.method.weight;
    config.bound = args.method.bound.clone();
    config.initial = match (&args.initial_n, &args.threshold) {
        (Some(n), _) => InitialSize::Count { n: *n },
        (None, Some(t)) => InitialSize::Threshold { t: t.clone() },
        (None, None) => InitialSize::default(),
    };
    config
}

fn run(action: RunAction) -> Outcome {
    match action {
        RunAction::Create(args) => {
            let path = &args.session.session;
            if path.exists() && !args.force {
                return Err(CliError::Usage(format!(
                    "{} already exists; pass --force to replace it",
                    path.display()
                )));
            }
            let contest = load_contest(&args.contest)?;
            let (session, view) = views::create(contest, session_config(&args))?;
            save_session(path, &session)?;
            Ok(emit(args.session.json, &view, views::CreatedView::to_text))
        }
        RunAction::Draw(args) => mutate(&args, |s| Ok(views::draw(s)?), views::DrawView::to_text),
        RunAction::Record(args) => {
            let session = load_session(&args.session.session)?;
            let tallies = files::read_tallies(&args.tallies, session.contest())?;
            mutate(&args.session, |s| Ok(views::record(s, tallies)?), views::RecordView::to_text)
        }
        RunAction::Evaluate(args) => mutate(&args, |s| Ok(views::evaluate(s)?), views::EvaluateView::to_text),
        RunAction::Report(args) => {
            let session = load_session(&args.session)?;
            let report = session_report(&session);
            Ok(if args.json { report.to_json() + "\n" } else { report.to_text() })
        }
    }
}

/// Loads the session, applies `step`, and saves only if the step succeeded.
fn mutate<T: Serialize>(
    args: &SessionArgs,
    step: impl FnOnce(&mut AuditSession) -> Result<T, CliError>,
    text: impl FnOnce(&T) -> String,
) -> Outcome {
    let mut session = load_session(&args.session)?;
    let view = step(&mut session)?;
    save_session(&args.session, &session)?;
    Ok(emit(args.json, &view, text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvalueRow {
    pub bound: Option<String>,
    pub weight: Option<String>,
    #[serde(with = "rational::opt_as_string")]
    pub statistic: Option<BigRational>,
    pub q: usize,
    pub population: usize,
    pub n: usize,
    pub with_replacement: Probability,
    /// Proportionally stratified sample treated as `n_eff` draws with replacement.
    pub n_eff: usize,
    pub proportional: Probability,
    pub without_replacement: Probability,
}

fn rows_for(q: usize, n: usize, n_eff: usize, population: usize) -> Result<PvalueRow, CliError> {
    Ok(PvalueRow {
        bound: None,
        weight: None,
        statistic: None,
        q,
        population,
        n,
        with_replacement: pi_diamond(q, n, population),
        n_eff,
        proportional: pi_diamond(q, n_eff, population),
        without_replacement: pi_star(q, n, population)?,
    })
}

fn check_tallies(contest: &Contest, tallies: &[HandTally]) -> Result<Vec<usize>, AuditError> {
    let mut seen = HashSet::new();
    tallies
        .iter()
        .map(|t| {
            let p = contest
                .precinct_index(&t.precinct_id)
                .ok_or_else(|| AuditError::UnknownPrecinct(t.precinct_id.clone()))?;
            if !seen.insert(p) {
                return Err(AuditError::DuplicateTally(t.precinct_id.clone()));
            }
            Ok(p)
        })
        .collect()
}

/// P-values for one sample under every requested bound and weight combination.
pub fn pvalue_table(
    contest: &Contest,
    tallies: &[HandTally],
    bounds: &[BoundMethod],
    weights: &[WeightFamily],
    pooling: PoolingRule,
) -> Result<Vec<PvalueRow>, CliError> {
    let sampled = check_tallies(contest, tallies)?;
    if sampled.is_empty() {
        return Err(AuditError::EmptySample.into());
    }
    let pooled = pool_losers(contest, pooling);
    let population = contest.num_precincts();
    let counties = contest.counties();
    let sizes: Vec<usize> = counties.iter().map(|c| c.precincts.len()).collect();
    let samples: Vec<usize> = counties
        .iter()
        .map(|c| c.precincts.iter().filter(|p| sampled.contains(p)).count())
        .collect();
    let mut rows = Vec::new();
    for method in bounds {
        let u = compute_bounds(contest, &pooled, method)?;
        for &family in weights {
            let w = Weights::for_contest(family, contest)?;
            let errors = sampled
                .iter()
                .zip(tallies)
                .map(|(&p, tally)| Ok((p, precinct_overstatement(contest, &pooled, p, tally)?)))
                .collect::<Result<Vec<_>, AuditError>>()?;
            let t = sample_statistic(&w, &errors)?;
            let q = compute_q(&t, &u.bounds, &w, pooled.margin())?;
            let stratified =
                stratified_pvalue_proportional(&t, &samples, &sizes, &u.bounds, &w, pooled.margin(), None)?;
            let mut row = rows_for(q, sampled.len(), stratified.n_eff, population)?;
            row.bound = Some(method.to_string());
            row.weight = Some(family.to_string());
            row.statistic = Some(t);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn pvalue_text(rows: &[PvalueRow]) -> String {
    let header = [
        "bound",
        "weight",
        "statistic",
        "q",
        "N",
        "n",
        "with replacement",
        "proportional (n_eff)",
        "without replacement",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bound.clone().unwrap_or_else(|| "-".into()),
                r.weight.clone().unwrap_or_else(|| "-".into()),
                r.statistic.as_ref().map_or("-".into(), ToString::to_string),
                r.q.to_string(),
                r.population.to_string(),
                r.n.to_string(),
                r.with_replacement.percent(),
                format!("{} ({})", r.proportional.percent(), r.n_eff),
                r.without_replacement.percent(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap())
        .collect();
    let line = |row: Vec<&str>| {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in &cells {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

fn pvalue(args: PvalueArgs) -> Outcome {
    let rows = match (args.q, &args.contest, &args.tallies) {
        (Some(q), _, _) => {
            let population = args.precincts.expect("clap requires --precincts with --q");
            if q > population {
                return Err(AuditError::InvalidInput(format!("q = {q} exceeds N = {population}")).into());
            }
            args.n
                .iter()
                .map(|&n| rows_for(q, n, n, population))
                .collect::<Result<Vec<_>, _>>()?
        }
        (None, Some(contest_path), Some(tallies_path)) => {
            let contest = files::read_contest(contest_path, args.contest_id.as_deref(), args.f)?;
            let tallies = files::read_tallies(tallies_path, &contest)?;
            let bounds = if args.bound.is_empty() { vec![BoundMethod::EPlus] } else { args.bound.clone() };
            let weights = if args.weight.is_empty() { vec![WeightFamily::PerOpportunity] } else { args.weight.clone() };
            pvalue_table(&contest, &tallies, &bounds, &weights, args.pooling)?
        }
        _ => {
            return Err(CliError::Usage(
                "give either --q, --precincts and --n, or --contest and --tallies".into(),
            ))
        }
    };
    Ok(emit(args.json, &rows, |r| pvalue_text(r)))
}

fn bounds(args: BoundsArgs) -> Outcome {
    let contest = load_contest(&args.contest)?;
    let pooled = pool_losers(&contest, args.pooling);
    let u = compute_bounds(&contest, &pooled, &args.bound)?;
    let mut out = Vec::new();
    u.write_csv(&contest, &mut out)?;
    Ok(String::from_utf8(out).expect("csv is UTF-8"))
}
