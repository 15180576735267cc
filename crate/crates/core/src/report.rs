//! Stage-by-stage audit reports, as JSON and as a plain-text table.

use serde::{Deserialize, Serialize};

use crate::rational::{format_significant, Probability};
use crate::session::{AuditSession, Decision, Status};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: u32,
    pub n: usize,
    pub n_eff: Option<usize>,
    /// Exact `α_s` as `p/q`.
    pub alpha: Option<String>,
    /// Exact statistic as `p/q`.
    pub statistic: String,
    pub q: usize,
    pub p_value: Probability,
    pub p_value_display: String,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub session_id: String,
    pub contest_id: String,
    pub seed: u64,
    pub design: String,
    pub alpha: String,
    pub alpha_rule: String,
    pub escalation: String,
    pub bound_method: String,
    pub weight_family: String,
    pub pooling: String,
    pub margin: u64,
    pub precincts: usize,
    pub reported_winners: Vec<String>,
    pub initial_sample: usize,
    pub stages: Vec<ReportRow>,
    pub status: Status,
    pub conclusion: String,
    pub log_hash: String,
}

pub fn session_report(session: &AuditSession) -> Report {
    let config = session.config();
    let contest = session.contest();
    let pooled = session.pooled();
    let alpha_text = format_significant(&config.alpha, 4);
    let reported_winners = pooled
        .winners()
        .iter()
        .map(|&k| pooled.candidates[k].label.clone())
        .collect();
    let stages = session
        .records()
        .iter()
        .map(|r| ReportRow {
            stage: r.stage,
            n: r.n,
            n_eff: r.n_eff,
            alpha: r.alpha.as_ref().map(ToString::to_string),
            statistic: r.statistic.to_string(),
            q: r.q,
            p_value: r.p_value.clone(),
            p_value_display: r.p_value.display_exact(),
            decision: r.decision,
        })
        .collect();
    let conclusion = match session.status() {
        Status::Open if session.records().is_empty() => "audit not started".to_string(),
        Status::Open => "audit in progress; escalation pending".to_string(),
        Status::Confirmed => format!("outcome confirmed at risk limit {alpha_text}"),
        Status::FullCountRequired => "full hand count required".to_string(),
        Status::FullCountComplete => {
            let full = session
                .records()
                .last()
                .and_then(|r| r.full_count.as_ref())
                .expect("a completed full count has a result");
            format!(
                "full hand count complete; hand-count winners: {} (reported outcome {})",
                full.hand_count_winners.join(", "),
                if full.outcome_confirmed { "confirmed" } else { "overturned" }
            )
        }
    };
    Report {
        session_id: session.id().to_string(),
        contest_id: contest.id.clone(),
        seed: config.seed,
        design: config.design.to_string(),
        alpha: config.alpha.to_string(),
        alpha_rule: config.alpha_rule.to_string(),
        escalation: config.escalation.to_string(),
        bound_method: config.bound.to_string(),
        weight_family: config.weight.to_string(),
        pooling: config.pooling.to_string(),
        margin: pooled.margin(),
        precincts: contest.num_precincts(),
        reported_winners,
        initial_sample: session.plan().n,
        stages,
        status: session.status(),
        conclusion,
        log_hash: session.log_hash(),
    }
}

fn decision_label(decision: Decision) -> &'static str {
    match decision {
        Decision::Confirmed => "confirm",
        Decision::Escalate => "escalate",
        Decision::FullCount => "full count",
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Audit {}  contest {}\n", self.session_id, self.contest_id));
        out.push_str(&format!(
            "seed {}  design {}  weight {}  bound {}  pooling {}\n",
            self.seed, self.design, self.weight_family, self.bound_method, self.pooling
        ));
        out.push_str(&format!(
            "risk limit {} ({})  escalation {}\n",
            self.alpha, self.alpha_rule, self.escalation
        ));
        out.push_str(&format!(
            "margin {}  precincts {}  reported winners {}  initial sample {}\n",
            self.margin,
            self.precincts,
            self.reported_winners.join(", "),
            self.initial_sample
        ));
        if !self.stages.is_empty() {
            let rows: Vec<[String; 6]> = self
                .stages
                .iter()
                .map(|r| {
                    [
                        r.stage.to_string(),
                        r.n.to_string(),
                        r.alpha.clone().unwrap_or_else(|| "-".into()),
                        r.statistic.clone(),
                        r.p_value_display.clone(),
                        decision_label(r.decision).to_string(),
                    ]
                })
                .collect();
            let header = ["stage", "n", "alpha_s", "statistic", "stage P-value", "decision"];
            let widths: Vec<usize> = (0..6)
                .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap())
                .collect();
            let line = |cells: Vec<&str>| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c:<w$}"))
                    .collect();
                format!("{}\n", padded.join("  ").trim_end())
            };
            out.push('\n');
            out.push_str(&line(header.to_vec()));
            for row in &rows {
                out.push_str(&line(row.iter().map(String::as_str).collect()));
            }
        }
        out.push('\n');
        out.push_str(&self.conclusion);
        out.push('\n');
        out
    }
}
