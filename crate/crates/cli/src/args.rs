use std::path::PathBuf;

use ballotaudit_core::bounds::BoundMethod;
use ballotaudit_core::pooling::PoolingRule;
use ballotaudit_core::rational::parse_rational;
use ballotaudit_core::session::{AlphaRule, EscalationRule};
use ballotaudit_core::tail::DesignKind;
use ballotaudit_core::weight::WeightFamily;
use clap::{Args, Parser, Subcommand};
use num_rational::BigRational;

fn rational(text: &str) -> Result<BigRational, String> {
    parse_rational(text).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ballotaudit", version, about = "Conservative sequential post-election audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Size the first-stage sample for a contest.
    Plan(PlanArgs),
    /// Drive an audit session kept in a JSON file.
    Run {
        #[command(subcommand)]
        action: RunAction,
    },
    /// Maximum P-values for a fixed sample.
    Pvalue(PvalueArgs),
    /// Write the per-precinct error bounds as CSV.
    Bounds(BoundsArgs),
    /// Serve the HTTP/JSON interface.
    Serve(ServeArgs),
}

/// Where the contest comes from. JSON files carry their own id and `f`; CSV files
/// take them from the flags.
#[derive(Debug, Clone, Args)]
pub struct ContestArgs {
    #[arg(long, value_name = "FILE")]
    pub contest: PathBuf,
    /// Contest id for CSV input (defaults to the file stem).
    #[arg(long)]
    pub contest_id: Option<String>,
    /// Votes allowed per ballot, for CSV input.
    #[arg(long, default_value_t = 1)]
    pub f: u64,
}

#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// identity | per-opportunity | thresholded[:m]
    #[arg(long, default_value = "per-opportunity")]
    pub weight: WeightFamily,
    /// e-plus | fraction:λ | supermajority
    #[arg(long, default_value = "e-plus")]
    pub bound: BoundMethod,
    /// maximize-min-group | fewest-groups | none
    #[arg(long, default_value = "maximize-min-group")]
    pub pooling: PoolingRule,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub contest: ContestArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Risk limit, e.g. 0.01 or 1/100.
    #[arg(long, value_parser = rational)]
    pub alpha: BigRational,
    /// Largest statistic the first stage should tolerate and still confirm.
    #[arg(long, value_parser = rational, default_value = "0")]
    pub threshold: BigRational,
    /// simple | proportional | per-county
    #[arg(long, default_value = "simple")]
    pub design: DesignKind,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum RunAction {
    /// Start a new session file.
    Create(CreateArgs),
    /// Draw the next stage's precincts.
    Draw(SessionArgs),
    /// Record hand tallies (CSV or JSON).
    Record(RecordArgs),
    /// Evaluate the current stage.
    Evaluate(SessionArgs),
    /// Print the stage-by-stage report.
    Report(SessionArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SessionArgs {
    #[arg(long, value_name = "FILE")]
    pub session: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CreateArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub contest: ContestArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_parser = rational)]
    pub alpha: BigRational,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "simple")]
    pub design: DesignKind,
    /// halving | fixed:S
    #[arg(long, default_value = "halving")]
    pub alpha_rule: AlphaRule,
    /// minimal-confirming | fixed-increment[:d]
    #[arg(long, default_value = "minimal-confirming")]
    pub escalation: EscalationRule,
    /// First-stage sample size.
    #[arg(long, conflicts_with = "threshold")]
    pub initial_n: Option<usize>,
    /// Plan the first stage to confirm up to this statistic (default 0).
    #[arg(long, value_parser = rational)]
    pub threshold: Option<BigRational>,
    /// Replace an existing session file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[arg(long, value_name = "FILE")]
    pub tallies: PathBuf,
}

#[derive(Debug, Args)]
pub struct PvalueArgs {
    /// Precincts that can be held at or below the statistic.
    #[arg(long, requires_all = ["precincts", "n"], conflicts_with_all = ["contest", "tallies"])]
    pub q: Option<usize>,
    /// Population size N.
    #[arg(long)]
    pub precincts: Option<usize>,
    /// Sample size; repeat for several.
    #[arg(long)]
    pub n: Vec<usize>,
    #[arg(long, value_name = "FILE", requires = "tallies")]
    pub contest: Option<PathBuf>,
    #[arg(long)]
    pub contest_id: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub f: u64,
    /// Hand tallies of the sampled precincts.
    #[arg(long, value_name = "FILE", requires = "contest")]
    pub tallies: Option<PathBuf>,
    /// Weight families to tabulate; repeat for several.
    #[arg(long)]
    pub weight: Vec<WeightFamily>,
    /// Bound methods to tabulate; repeat for several.
    #[arg(long)]
    pub bound: Vec<BoundMethod>,
    #[arg(long, default_value = "maximize-min-group")]
    pub pooling: PoolingRule,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub contest: ContestArgs,
    #[arg(long, default_value = "e-plus")]
    pub bound: BoundMethod,
    #[arg(long, default_value = "maximize-min-group")]
    pub pooling: PoolingRule,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, value_name = "DIR")]
    pub state_dir: PathBuf,
    /// Static files for the audit console.
    #[arg(long, value_name = "DIR")]
    pub assets: Option<PathBuf>,
}
