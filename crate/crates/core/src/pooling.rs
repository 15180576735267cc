//! Apparent outcome, margin, and pooling of apparent losers into pseudo-candidates.
//!
//! Pooling merges losers whose combined reported total stays at or below the
//! runner-up. Errors that only move votes inside a pool cannot change the outcome,
//! so the discrepancy measure ignores them. The runner-up is never pooled, which
//! keeps the margin unchanged.
//!
//! Undervotes and `f` times the invalid ballots form a distinguished bucket. It is
//! always an apparent loser. When its total exceeds the runner-up it stays a
//! separate pseudo-candidate that is left out of the margin.

use num_rational::BigRational;
use num_traits::Signed;
use serde::{Deserialize, Serialize};

use crate::contest::Contest;
use crate::error::{AuditError, Result};
use crate::rational::{self, int};

/// Reported winners, losers and margin `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    /// Apparent winners, ascending index.
    pub winners: Vec<usize>,
    /// Apparent losers, ascending index.
    pub losers: Vec<usize>,
    pub margin: u64,
    /// More than `f` candidates share the last winning total.
    pub tied: bool,
    /// No more than `f` candidates compete; the margin is the smallest winner total.
    pub unopposed: bool,
}

/// Ranks `totals` (ties broken by ascending index), excluding `exempt` from the
/// ranking. The exempt entry is always a loser and never sets the margin.
pub fn apparent_outcome(totals: &[u64], f: usize, exempt: Option<usize>) -> Outcome {
    let mut ranked: Vec<usize> = (0..totals.len()).filter(|&k| Some(k) != exempt).collect();
    ranked.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
    let cut = f.min(ranked.len());
    let mut winners = ranked[..cut].to_vec();
    let mut losers = ranked[cut..].to_vec();
    losers.extend(exempt);
    winners.sort_unstable();
    losers.sort_unstable();

    let min_winner = ranked[..cut].iter().map(|&k| totals[k]).min().unwrap_or(0);
    let (margin, unopposed) = match ranked.get(f) {
        Some(&runner_up) => (min_winner - totals[runner_up], false),
        None => (min_winner, true),
    };
    Outcome {
        winners,
        losers,
        margin,
        tied: margin == 0 && !unopposed,
        unopposed,
    }
}

/// Effective margin above a super-majority threshold: `⌊v_yes − τ (v_yes + v_no)⌋`.
pub fn supermajority_margin(v_yes: u64, v_no: u64, threshold: &BigRational) -> Result<u64> {
    let excess = int(v_yes) - threshold * int(v_yes + v_no);
    if excess.is_negative() {
        return Err(AuditError::NotPassed);
    }
    Ok(rational::floor_u64(&excess))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingRule {
    /// No group exceeds the runner-up and the smallest group is as large as possible.
    #[default]
    MaximizeMinGroup,
    /// As few groups as possible, none exceeding the runner-up.
    FewestGroups,
    None,
}

impl std::fmt::Display for PoolingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingRule::MaximizeMinGroup => "maximize-min-group",
            PoolingRule::FewestGroups => "fewest-groups",
            PoolingRule::None => "none",
        })
    }
}

impl std::str::FromStr for PoolingRule {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximize-min-group" | "maximize-min" => Ok(Self::MaximizeMinGroup),
            "fewest-groups" => Ok(Self::FewestGroups),
            "none" => Ok(Self::None),
            other => Err(AuditError::InvalidInput(format!("unknown pooling rule {other:?}"))),
        }
    }
}

/// What a precinct discrepancy measures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Measure {
    Plurality,
    /// Overstatement of the effective margin above `threshold` for a yes/no measure.
    Supermajority {
        #[serde(with = "rational::as_string")]
        threshold: BigRational,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoCandidate {
    pub label: String,
    /// Real candidate indices pooled into this pseudo-candidate.
    pub members: Vec<usize>,
    pub includes_undervotes: bool,
}

/// The contest after pooling: `K` pseudo-candidates, per-precinct votes, outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledContest {
    pub rule: PoolingRule,
    pub measure: Measure,
    pub candidates: Vec<PseudoCandidate>,
    /// `votes[p][k]`: reported votes for pseudo-candidate `k` in precinct `p`.
    pub votes: Vec<Vec<u64>>,
    /// `V_k`.
    pub totals: Vec<u64>,
    pub outcome: Outcome,
    /// The separate undervote pseudo-candidate, when it is exempt from the margin.
    pub exempt: Option<usize>,
}

impl PooledContest {
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn margin(&self) -> u64 {
        self.outcome.margin
    }

    pub fn winners(&self) -> &[usize] {
        &self.outcome.winners
    }

    pub fn losers(&self) -> &[usize] {
        &self.outcome.losers
    }

    /// Maps a per-real-candidate row plus an undervote-bucket count onto the
    /// pseudo-candidates.
    pub fn aggregate(&self, real_votes: &[u64], undervote_bucket: u64) -> Vec<u64> {
        self.candidates
            .iter()
            .map(|c| {
                c.members.iter().map(|&k| real_votes[k]).sum::<u64>()
                    + if c.includes_undervotes { undervote_bucket } else { 0 }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Candidate(usize),
    Undervotes,
}

/// Pools apparent losers under `rule`. Ties for the last winning place, unopposed
/// contests and super-majority measures are left unpooled.
pub fn pool_losers(contest: &Contest, rule: PoolingRule) -> PooledContest {
    let totals = contest.candidate_totals();
    let bucket_total = contest.undervote_total();
    let real = apparent_outcome(&totals, contest.f as usize, None);

    if let Some(threshold) = &contest.supermajority {
        return build(contest, PoolingRule::None, Measure::Supermajority { threshold: threshold.clone() }, singletons(&totals), None);
    }

    let can_pool = rule != PoolingRule::None && !real.tied && !real.unopposed;
    if !can_pool {
        return build(contest, PoolingRule::None, Measure::Plurality, singletons(&totals), None);
    }

    let runner_up = *real
        .losers
        .iter()
        .min_by(|&&a, &&b| totals[b].cmp(&totals[a]).then(a.cmp(&b)))
        .expect("opposed contest has a loser");
    let cap = totals[runner_up];
    let mut items: Vec<(Item, u64)> = real
        .losers
        .iter()
        .filter(|&&k| k != runner_up)
        .map(|&k| (Item::Candidate(k), totals[k]))
        .collect();
    if bucket_total <= cap {
        items.push((Item::Undervotes, bucket_total));
    }

    let groups = partition(&items, cap, rule);
    let mut groups: Vec<Vec<Item>> = groups
        .into_iter()
        .map(|g| g.into_iter().map(|i| items[i].0).collect())
        .collect();
    let bucket_pooled = groups.iter().flatten().any(|i| matches!(i, Item::Undervotes));
    let mut singles: Vec<Vec<Item>> = real
        .winners
        .iter()
        .chain(std::iter::once(&runner_up))
        .map(|&k| vec![Item::Candidate(k)])
        .collect();
    singles.append(&mut groups);
    build(contest, rule, Measure::Plurality, singles, Some(bucket_pooled))
}

fn singletons(totals: &[u64]) -> Vec<Vec<Item>> {
    (0..totals.len()).map(|k| vec![Item::Candidate(k)]).collect()
}

/// Assembles the pseudo-candidates. `bucket_pooled == Some(true)` means the
/// undervote bucket already sits inside one of `groups`.
fn build(
    contest: &Contest,
    rule: PoolingRule,
    measure: Measure,
    groups: Vec<Vec<Item>>,
    bucket_pooled: Option<bool>,
) -> PooledContest {
    let mut candidates: Vec<PseudoCandidate> = groups
        .into_iter()
        .map(|group| {
            let mut members: Vec<usize> = group
                .iter()
                .filter_map(|i| match i {
                    Item::Candidate(k) => Some(*k),
                    Item::Undervotes => None,
                })
                .collect();
            members.sort_unstable();
            let includes_undervotes = group.iter().any(|i| matches!(i, Item::Undervotes));
            let mut names: Vec<String> = members.iter().map(|&k| contest.candidates[k].name.clone()).collect();
            if includes_undervotes {
                names.push("undervotes/invalid".into());
            }
            PseudoCandidate {
                label: names.join(" + "),
                members,
                includes_undervotes,
            }
        })
        .collect();
    candidates.sort_by_key(|c| c.members.first().copied().unwrap_or(usize::MAX));

    let exempt = if bucket_pooled == Some(true) {
        None
    } else {
        candidates.push(PseudoCandidate {
            label: "undervotes/invalid".into(),
            members: Vec::new(),
            includes_undervotes: true,
        });
        Some(candidates.len() - 1)
    };

    let mut pooled = PooledContest {
        rule,
        measure,
        candidates,
        votes: Vec::new(),
        totals: Vec::new(),
        outcome: apparent_outcome(&[0], 1, None),
        exempt,
    };
    pooled.votes = contest
        .precincts
        .iter()
        .map(|p| pooled.aggregate(&p.votes, p.undervote_bucket()))
        .collect();
    pooled.totals = (0..pooled.candidates.len())
        .map(|k| pooled.votes.iter().map(|row| row[k]).sum())
        .collect();
    pooled.outcome = apparent_outcome(&pooled.totals, contest.f as usize, exempt);
    if let Measure::Supermajority { threshold } = &pooled.measure {
        // Validation guarantees two positions; a failing measure keeps margin 0 and
        // is rejected when a session is created.
        pooled.outcome.winners = vec![0];
        pooled.outcome.losers = vec![1, 2];
        pooled.outcome.margin = supermajority_margin(pooled.totals[0], pooled.totals[1], threshold).unwrap_or(0);
        pooled.outcome.tied = false;
        pooled.outcome.unopposed = false;
    }
    pooled
}

/// Groups of item indices, every group total `<= cap`.
fn partition(items: &[(Item, u64)], cap: u64, rule: PoolingRule) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return Vec::new();
    }
    let weights: Vec<u64> = items.iter().map(|(_, w)| *w).collect();
    if weights.len() <= EXHAUSTIVE_LIMIT {
        exhaustive_partition(&weights, cap, rule)
    } else {
        match rule {
            PoolingRule::FewestGroups => first_fit_decreasing(&weights, cap),
            _ => balanced_greedy(&weights, cap),
        }
    }
}

const EXHAUSTIVE_LIMIT: usize = 8;

fn group_totals(weights: &[u64], labels: &[usize], groups: usize) -> Vec<u64> {
    let mut totals = vec![0u64; groups];
    for (w, &g) in weights.iter().zip(labels) {
        totals[g] += w;
    }
    totals
}

/// Enumerates every set partition as a restricted growth string.
fn exhaustive_partition(weights: &[u64], cap: u64, rule: PoolingRule) -> Vec<Vec<usize>> {
    let n = weights.len();
    let mut labels = vec![0usize; n];
    let mut maxes = vec![0usize; n];
    let mut best: Option<((u64, usize), Vec<usize>, usize)> = None;
    loop {
        let groups = maxes[n - 1] + 1;
        let totals = group_totals(weights, &labels, groups);
        if totals.iter().all(|&t| t <= cap) {
            let min = *totals.iter().min().unwrap();
            // Larger key wins.
            let key = match rule {
                PoolingRule::FewestGroups => (u64::MAX - groups as u64, min as usize),
                _ => (min, usize::MAX - groups),
            };
            if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
                best = Some((key, labels.clone(), groups));
            }
        }
        // Next restricted growth string.
        let mut i = n - 1;
        loop {
            if i == 0 {
                let (_, labels, groups) = best.expect("singletons are always feasible");
                return collect_groups(&labels, groups);
            }
            if labels[i] <= maxes[i - 1] {
                labels[i] += 1;
                maxes[i] = maxes[i - 1].max(labels[i]);
                for j in i + 1..n {
                    labels[j] = 0;
                    maxes[j] = maxes[i];
                }
                break;
            }
            i -= 1;
        }
    }
}

fn collect_groups(labels: &[usize], groups: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); groups];
    for (i, &g) in labels.iter().enumerate() {
        out[g].push(i);
    }
    out
}

fn descending(weights: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].cmp(&weights[a]).then(a.cmp(&b)));
    order
}

/// Fewest groups that fit, filling the currently-smallest group with the next
/// largest item.
fn balanced_greedy(weights: &[u64], cap: u64) -> Vec<Vec<usize>> {
    let total: u64 = weights.iter().sum();
    let order = descending(weights);
    let start = total.div_ceil(cap.max(1)).max(1) as usize;
    for groups in start..=weights.len() {
        let mut totals = vec![0u64; groups];
        let mut labels = vec![0usize; weights.len()];
        for &i in &order {
            let g = (0..groups).min_by_key(|&g| (totals[g], g)).unwrap();
            totals[g] += weights[i];
            labels[i] = g;
        }
        if totals.iter().all(|&t| t <= cap) {
            return collect_groups(&labels, groups);
        }
    }
    (0..weights.len()).map(|i| vec![i]).collect()
}

fn first_fit_decreasing(weights: &[u64], cap: u64) -> Vec<Vec<usize>> {
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for i in descending(weights) {
        match groups.iter_mut().find(|(t, _)| t + weights[i] <= cap) {
            Some((t, members)) => {
                *t += weights[i];
                members.push(i);
            }
            None => groups.push((weights[i], vec![i])),
        }
    }
    groups.into_iter().map(|(_, m)| m).collect()
}
