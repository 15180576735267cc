//! Brute-force reference computations for checking the closed forms, and a
//! Monte Carlo estimate of the sequential audit's risk.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundMethod;
use crate::contest::{Candidate, CandidateKind, ContestSpec, PrecinctRecord};
use crate::discrepancy::HandTally;
use crate::error::{AuditError, Result};
use crate::rational::{self, int, Probability};
use crate::sampling::AuditRng;
use crate::session::{AlphaRule, AuditSession, EscalationRule, InitialSize, SessionConfig, Status};
use crate::tail::{compute_q, excess_order, DesignKind};
use crate::weight::{WeightFamily, Weights};

/// Largest number of enumerated subsets the exhaustive oracle accepts.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// `q` by scanning every `k` from `N` down: the first `k` for which the `k`
/// precincts with the least excess, held at `u ∧ w^{-1}(t)`, still leave a total
/// of at least `margin`.
pub fn compute_q_definitional(t: &BigRational, bounds: &[u64], weights: &Weights, margin: u64) -> Result<usize> {
    let n = bounds.len();
    let mut capped = Vec::with_capacity(n);
    for (p, &u) in bounds.iter().enumerate() {
        let inv = weights.invert(p, t)?;
        capped.push(if inv < int(u) { inv } else { int(u) });
    }
    let excess: Vec<BigRational> = bounds.iter().zip(&capped).map(|(&u, c)| int(u) - c).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| excess[a].cmp(&excess[b]).then(a.cmp(&b)));
    let margin = int(margin);
    for k in (0..=n).rev() {
        let mut held = vec![false; n];
        for &p in &order[..k] {
            held[p] = true;
        }
        let total: BigRational = (0..n)
            .map(|p| if held[p] { capped[p].clone() } else { int(bounds[p]) })
            .sum();
        if total >= margin {
            return Ok(k);
        }
    }
    Ok(0)
}

/// The allocation of overstatements that reaches `margin` while keeping as many
/// precincts as possible at weighted error `≤ t`. `None` when the bounds cannot
/// reach the margin at all.
pub fn worst_case_allocation(
    t: &BigRational,
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
) -> Result<Option<Vec<BigRational>>> {
    if bounds.iter().sum::<u64>() < margin {
        return Ok(None);
    }
    let q = compute_q(t, bounds, weights, margin)?;
    let order = excess_order(t, bounds, weights)?;
    let mut x: Vec<BigRational> = bounds.iter().map(|&u| int(u)).collect();
    for &p in &order[..q] {
        let inv = weights.invert(p, t)?;
        if inv < x[p] {
            x[p] = inv;
        }
    }
    Ok(Some(x))
}

/// Visits every `k`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Fraction of `n`-subsets whose maximum weighted error under the worst-case
/// allocation is at most `t`, by enumeration.
pub fn exhaustive_pi_star(
    t: &BigRational,
    n: usize,
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
) -> Result<Probability> {
    let population = bounds.len();
    if n > population {
        return Err(AuditError::SampleTooLarge { n, population });
    }
    let subsets = binomial(population, n);
    match subsets.to_u128() {
        Some(count) if count <= ENUMERATION_LIMIT => {}
        other => return Err(AuditError::TooLarge(other.unwrap_or(u128::MAX))),
    }
    let Some(x) = worst_case_allocation(t, bounds, weights, margin)? else {
        return Ok(Probability::zero());
    };
    let small: Vec<bool> = x.iter().enumerate().map(|(p, xp)| weights.apply(p, xp) <= *t).collect();
    if n == 0 {
        return Ok(Probability::one());
    }
    let mut hits = 0u64;
    for_each_subset(population, n, |subset| {
        if subset.iter().all(|&p| small[p]) {
            hits += 1;
        }
    });
    Ok(Probability::new(BigRational::new(BigInt::from(hits), subsets)))
}

/// One fixture line: a tail query with the enumerated and closed-form answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCase {
    pub family: WeightFamily,
    pub opportunities: Vec<u64>,
    pub bounds: Vec<u64>,
    pub margin: u64,
    #[serde(with = "rational::as_string")]
    pub t: BigRational,
    pub n: usize,
    pub q: usize,
    pub exhaustive: Probability,
    pub closed_form: Probability,
}

impl OracleCase {
    pub fn evaluate(
        family: WeightFamily,
        opportunities: Vec<u64>,
        bounds: Vec<u64>,
        margin: u64,
        t: BigRational,
        n: usize,
    ) -> Result<Self> {
        let weights = Weights::new(family, opportunities.clone())?;
        let q = compute_q(&t, &bounds, &weights, margin)?;
        Ok(Self {
            exhaustive: exhaustive_pi_star(&t, n, &bounds, &weights, margin)?,
            closed_form: crate::tail::pi_star(q, n, bounds.len())?,
            family,
            opportunities,
            bounds,
            margin,
            t,
            n,
            q,
        })
    }
}

/// Searches every integer allocation `0 ≤ x_p ≤ u_p` with `Σ x ≥ margin` for the
/// most precincts with `w_p(x_p) ≤ t`. `None` when no allocation reaches the
/// margin. Exponential; meant for three or four precincts.
pub fn lattice_max_small_count(t: &BigRational, bounds: &[u64], weights: &Weights, margin: u64) -> Option<usize> {
    fn search(
        p: usize,
        sum: u64,
        small: usize,
        t: &BigRational,
        bounds: &[u64],
        weights: &Weights,
        margin: u64,
        best: &mut Option<usize>,
    ) {
        if p == bounds.len() {
            if sum >= margin && best.is_none_or(|b| small > b) {
                *best = Some(small);
            }
            return;
        }
        for x in 0..=bounds[p] {
            let is_small = weights.apply(p, &int(x)) <= *t;
            search(p + 1, sum + x, small + is_small as usize, t, bounds, weights, margin, best);
        }
    }
    let mut best = None;
    search(0, 0, 0, t, bounds, weights, margin, &mut best);
    best
}

/// `Π_c C(k_c, n_c) / C(N_c, n_c)`: the chance that independent within-stratum
/// samples of sizes `n_c` miss every one of the `N_c − k_c` tainted precincts.
/// Each stratum is `(k_c, N_c, n_c)`.
pub fn exact_stratified_zero_prob(strata: &[(usize, usize, usize)]) -> Probability {
    let mut acc = BigRational::one();
    for &(k, size, n) in strata {
        assert!(k <= size && n <= size, "stratum counts out of range");
        acc *= BigRational::new(binomial(k, n), binomial(size, n));
    }
    Probability::new(acc)
}

/// What the simulated hand counts look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// Overstatements follow the worst-case allocation for a random level, so the
    /// total reaches the margin and every confirmation is an error.
    WorstCase,
    /// Overstatements total one less than the margin; the reported outcome is right.
    BelowMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSimulation {
    pub alpha: BigRational,
    pub trials: usize,
    pub min_precincts: usize,
    pub max_precincts: usize,
    pub adversary: Adversary,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub trials: usize,
    pub confirmations: usize,
    /// Confirmations of an outcome whose total overstatement reaches the margin.
    pub erroneous: usize,
    pub rate: f64,
    /// `sqrt(α / trials)`.
    pub std_error: f64,
    /// `α + 3 σ`.
    pub bound: f64,
}

/// Two-candidate, vote-for-one contest with `n` precincts and a positive margin
/// for candidate `A`.
fn synthetic_contest(rng: &mut AuditRng, n: usize) -> ContestSpec {
    let mut precincts = Vec::with_capacity(n);
    for p in 0..n {
        let ballots = 40 + rng.below(161);
        let undervotes = rng.below(ballots / 20 + 1);
        let valid = ballots - undervotes;
        let share = 50 + rng.below(16);
        let a = valid * share / 100;
        precincts.push(PrecinctRecord {
            precinct_id: format!("p{p:03}"),
            county_id: if p % 2 == 0 { "east" } else { "west" }.into(),
            reported_votes: vec![a as i64, (valid - a) as i64],
            reported_undervotes: undervotes as i64,
            reported_invalid_ballots: 0,
            reported_ballots: ballots as i64,
            vote_cap: None,
        });
    }
    ContestSpec {
        schema_version: 1,
        contest_id: "synthetic".into(),
        f: 1,
        candidates: ["A", "B"]
            .into_iter()
            .map(|name| Candidate {
                name: name.into(),
                kind: CandidateKind::Listed,
            })
            .collect(),
        precincts,
        supermajority: None,
    }
}

/// A hand tally whose overstatement against the reported row is exactly `x`:
/// first remove up to `v_A` votes from the winner, then add the rest to the
/// smaller of the loser and the undervote bucket.
fn tally_with_overstatement(session: &AuditSession, p: usize, x: u64) -> HandTally {
    let mut tally = HandTally::matching_reported(session.contest(), p);
    let from_winner = x.min(tally.votes[0]);
    tally.votes[0] -= from_winner;
    let rest = x - from_winner;
    if tally.votes[1] <= tally.undervotes {
        tally.votes[1] += rest;
    } else {
        tally.undervotes += rest;
    }
    tally.ballots = tally.votes.iter().sum::<u64>() + tally.undervotes;
    tally
}

/// Runs one full audit of a synthetic contest against the adversary. Returns
/// whether the audit confirmed and whether the overstatement reached the margin.
fn risk_trial(sim: &RiskSimulation, trial: usize) -> Result<(bool, bool)> {
    let mut rng = AuditRng::new(sim.seed, "risk-simulation", 0, &trial.to_string());
    let n = sim.min_precincts + rng.below((sim.max_precincts - sim.min_precincts + 1) as u64) as usize;
    let contest = crate::contest::validate_contest(synthetic_contest(&mut rng, n))?;
    let mut config = SessionConfig::new(sim.alpha.clone(), rng.next_u64());
    config.weight = WeightFamily::Identity;
    config.bound = BoundMethod::EPlus;
    config.design = DesignKind::Simple;
    config.alpha_rule = AlphaRule::Halving;
    config.escalation = EscalationRule::MinimalConfirming;
    config.initial = InitialSize::Count {
        n: 1 + rng.below((n / 5).max(1) as u64) as usize,
    };
    let mut session = AuditSession::create(contest, config)?;
    let bounds = session.bounds().bounds.clone();
    let margin = session.pooled().margin();

    let x: Vec<u64> = match sim.adversary {
        Adversary::WorstCase => {
            let top = bounds.iter().copied().max().unwrap_or(0);
            let level = int(rng.below(top + 1));
            match worst_case_allocation(&level, &bounds, session.weights(), margin)? {
                Some(x) => x.iter().map(rational::floor_u64).collect(),
                None => return Ok((false, false)),
            }
        }
        Adversary::BelowMargin => {
            let mut left = margin.saturating_sub(1);
            let mut order: Vec<usize> = (0..n).collect();
            for i in 0..n {
                let j = i + rng.below((n - i) as u64) as usize;
                order.swap(i, j);
            }
            let mut x = vec![0; n];
            for p in order {
                let take = left.min(bounds[p]);
                x[p] = take;
                left -= take;
            }
            x
        }
    };
    let reaches_margin = x.iter().sum::<u64>() >= margin;

    while !session.status().is_terminal() {
        let ids = session.draw()?;
        let tallies = ids
            .iter()
            .map(|id| {
                let p = session.contest().precinct_index(id).expect("drawn precinct exists");
                tally_with_overstatement(&session, p, x[p])
            })
            .collect();
        session.record(tallies)?;
        session.evaluate()?;
    }
    Ok((session.status() == Status::Confirmed, reaches_margin))
}

/// Empirical rate at which the full sequential audit confirms an outcome whose
/// total overstatement reaches the margin.
pub fn mc_protocol_risk(sim: &RiskSimulation) -> Result<RiskEstimate> {
    if sim.min_precincts == 0 || sim.min_precincts > sim.max_precincts {
        return Err(AuditError::InvalidInput("precinct range must be nonempty and positive".into()));
    }
    let outcomes = (0..sim.trials)
        .into_par_iter()
        .map(|trial| risk_trial(sim, trial))
        .collect::<Result<Vec<_>>>()?;
    let confirmations = outcomes.iter().filter(|(confirmed, _)| *confirmed).count();
    let erroneous = outcomes.iter().filter(|(confirmed, wrong)| *confirmed && *wrong).count();
    let alpha = sim.alpha.to_f64().unwrap_or(0.0);
    let rate = if sim.trials == 0 { 0.0 } else { erroneous as f64 / sim.trials as f64 };
    let std_error = (alpha / sim.trials.max(1) as f64).sqrt();
    Ok(RiskEstimate {
        trials: sim.trials,
        confirmations,
        erroneous,
        rate,
        std_error,
        bound: alpha + 3.0 * std_error,
    })
}
