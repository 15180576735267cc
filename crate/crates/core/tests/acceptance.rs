//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.

use std::time::{Duration, Instant};

use ballotaudit_core::bounds::{compute_bounds, BoundMethod};
use ballotaudit_core::contest::{validate_contest, Candidate, CandidateKind, Contest, ContestSpec, PrecinctRecord};
use ballotaudit_core::datasets::sausalito;
use ballotaudit_core::discrepancy::{precinct_overstatement, sample_statistic, HandTally};
use ballotaudit_core::oracle::{
    binomial, compute_q_definitional, exact_stratified_zero_prob, exhaustive_pi_star, mc_protocol_risk, Adversary,
    RiskSimulation,
};
use ballotaudit_core::pooling::{pool_losers, PoolingRule};
use ballotaudit_core::rational::{format_significant, int, parse_rational, pow10, ratio, Probability};
use ballotaudit_core::report::session_report;
use ballotaudit_core::session::{AuditSession, InitialSize, SessionConfig};
use ballotaudit_core::tail::{
    compute_q, initial_sample_size, pi_diamond, pi_star, proportional_allocation, tail_without_replacement,
    DesignKind,
};
use ballotaudit_core::weight::{WeightFamily, Weights};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(condition: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

const TABLE_3: [(&str, u64, u64, u64); 9] = [
    ("3001", 2887, 2827, 802),
    ("3002", 2999, 2955, 852),
    ("3104", 2416, 2368, 680),
    ("3105", 2593, 2537, 730),
    ("3106", 2535, 2477, 696),
    ("3107", 2493, 2440, 700),
    ("3600", 2013, 1962, 569),
    ("3601", 1653, 1613, 449),
    ("3602", 1821, 1782, 525),
];

fn sausalito_reproduction() -> Check {
    let start = Instant::now();
    let contest = sausalito();
    let pooled = pool_losers(&contest, PoolingRule::MaximizeMinGroup);
    ensure(pooled.margin() == 86, || format!("margin {} != 86", pooled.margin()))?;
    let winners: Vec<&str> = pooled.winners().iter().map(|&k| pooled.candidates[k].label.as_str()).collect();
    ensure(winners == ["Thornton", "Hoyt", "Trotter"], || format!("winners {winners:?}"))?;

    let write_ins_only = pool_losers(&contest, PoolingRule::None);
    let columns = [
        compute_bounds(&contest, &write_ins_only, &BoundMethod::EPlus).map_err(|e| e.to_string())?,
        compute_bounds(&contest, &pooled, &BoundMethod::EPlus).map_err(|e| e.to_string())?,
        compute_bounds(&contest, &pooled, &BoundMethod::Fraction { lambda: ratio(2, 5) }).map_err(|e| e.to_string())?,
    ];
    let mut matched = 0;
    for (p, &(id, a, b, c)) in TABLE_3.iter().enumerate() {
        ensure(contest.precincts[p].id == id, || format!("row order: {}", contest.precincts[p].id))?;
        for (col, expected) in [a, b, c].into_iter().enumerate() {
            let got = columns[col].bounds[p];
            ensure(got == expected, || format!("precinct {id} column {}: {got} != {expected}", col + 2))?;
            matched += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("M = 86, winners Thornton/Hoyt/Trotter, {matched}/27 bound cells exact, {elapsed:.2?}"))
}

fn sausalito_p_values() -> Check {
    let contest = sausalito();
    let pooled = pool_losers(&contest, PoolingRule::MaximizeMinGroup);
    let bounds = compute_bounds(&contest, &pooled, &BoundMethod::EPlus).map_err(|e| e.to_string())?;
    let weights = Weights::for_contest(WeightFamily::PerOpportunity, &contest).map_err(|e| e.to_string())?;
    let t = ratio(2, 1000);
    for n in 1..=8 {
        let tail = tail_without_replacement(&t, n, &bounds.bounds, &weights, 86).map_err(|e| e.to_string())?;
        let expected = BigRational::new(binomial(8, n), binomial(9, n));
        ensure(tail.p_value.exact() == &expected, || format!("n = {n}: {} != {expected}", tail.p_value.exact()))?;
    }

    let p = contest.precinct_index("3107").ok_or("3107 missing")?;
    // The hand count finds a Stratigos vote the scanner read as an undervote.
    let mut tally = HandTally::matching_reported(&contest, p);
    tally.votes[3] += 1;
    tally.undervotes -= 1;
    let e = precinct_overstatement(&contest, &pooled, p, &tally).map_err(|e| e.to_string())?;
    ensure(e == 1, || format!("3107 overstatement {e} != 1"))?;
    let statistic = sample_statistic(&weights, &[(p, e)]).map_err(|e| e.to_string())?;
    ensure(statistic == ratio(1, 1749), || format!("statistic {statistic}"))?;
    let one = tail_without_replacement(&statistic, 1, &bounds.bounds, &weights, 86).map_err(|e| e.to_string())?;
    ensure(one.p_value.exact() == &ratio(8, 9), || format!("one-precinct P-value {}", one.p_value))?;

    let plan = initial_sample_size(
        &t,
        &ratio(1, 100),
        &bounds.bounds,
        &weights,
        86,
        DesignKind::Simple,
        contest.counties(),
        contest.opportunities(),
    )
    .map_err(|e| e.to_string())?;
    ensure(plan.n == 9, || format!("initial sample size {} != 9", plan.n))?;
    Ok(format!(
        "C(8,n)/C(9,n) exact for n = 1..8; one-precinct P-value {}; initial sample 9 of 9",
        one.p_value
    ))
}

/// The value `printed` (a percentage as printed) and one unit in its last digit.
fn printed_with_unit(printed: &str) -> (BigRational, BigRational) {
    let (mantissa, exponent) = match printed.split_once('e') {
        Some((m, e)) => (m, e.parse::<i32>().unwrap()),
        None => (printed, 0),
    };
    let decimals = mantissa.split_once('.').map_or(0, |(_, frac)| frac.len()) as i32;
    let scale = exponent - decimals;
    let unit = if scale >= 0 {
        BigRational::from_integer(pow10(scale as u32))
    } else {
        BigRational::new(BigInt::from(1), pow10((-scale) as u32))
    };
    (parse_rational(printed).unwrap(), unit)
}

fn minnesota_table() -> Check {
    let start = Instant::now();
    const N: usize = 4123;
    // (weight row, q for u = e+, q for u = 0.4b) from the smallest counts in the
    // q table: N minus 130, 128, 130 and 721, 720, 721.
    let rows = [("w = z", 3993, 3402), ("w = z/b", 3995, 3403), ("w = (z-2)+/b", 3993, 3402)];
    let printed = [
        ["8.2", "0.00003", "0.15", "1.4e-15", "0.13", "4.6e-16"],
        ["8.5", "0.00003", "0.17", "1.5e-13", "0.15", "4.9e-16"],
        ["8.2", "0.00003", "0.15", "1.4e-15", "0.13", "4.6e-16"],
    ];
    let mut checked = 0;
    let mut excluded = String::new();
    for ((label, q_plus, q_frac), cells) in rows.iter().zip(printed) {
        for (col, text) in cells.iter().enumerate() {
            let q = if col % 2 == 0 { *q_plus } else { *q_frac };
            let p: Probability = match col / 2 {
                0 => pi_diamond(q, 78, N),
                1 => pi_diamond(q, 202, N),
                _ => pi_star(q, 202, N).map_err(|e| e.to_string())?,
            };
            let percent = p.exact() * int(100);
            if *label == "w = z/b" && col == 3 {
                excluded = format!(
                    "excluded printed 1.5e-13% cell (computed {}%)",
                    format_significant(&percent, 2)
                );
                continue;
            }
            let (value, unit) = printed_with_unit(text);
            ensure((&percent - &value).abs() <= unit, || {
                format!("{label}, column {}: computed {}% vs printed {text}%", col + 2, format_significant(&percent, 3))
            })?;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{checked} cells within one unit of the last printed digit; {excluded}; {elapsed:.2?}"))
}

fn footnote_counterexample() -> Check {
    ensure(proportional_allocation(80, &[50, 50]) == [40, 40], || "allocation".into())?;
    let stratified = exact_stratified_zero_prob(&[(49, 50, 40), (49, 50, 40)]);
    let srs = exact_stratified_zero_prob(&[(98, 100, 80)]);
    ensure(stratified.exact() == &ratio(1, 25), || format!("stratified {}", stratified))?;
    ensure(srs.exact() == &ratio(380, 9900), || format!("SRS {}", srs))?;
    ensure(stratified > srs, || "stratified should exceed SRS".into())?;
    Ok(format!("stratified {} > SRS {}", stratified, srs))
}

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<u64>, Weights, u64, BigRational) {
    let n = rng.gen_range(1..=max_n);
    let bounds: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=20)).collect();
    let family = match rng.gen_range(0..3) {
        0 => WeightFamily::Identity,
        1 => WeightFamily::PerOpportunity,
        _ => WeightFamily::Thresholded { m: rng.gen_range(0..=3) },
    };
    let opportunities: Vec<u64> = (0..n).map(|_| rng.gen_range(1..=30)).collect();
    let weights = Weights::new(family, opportunities).unwrap();
    let total: u64 = bounds.iter().sum();
    let margin = rng.gen_range(0..=total + 5);
    let t = match family {
        WeightFamily::Identity => ratio(rng.gen_range(0..=40), rng.gen_range(1..=2)),
        _ => ratio(rng.gen_range(0..=30), rng.gen_range(1..=60)),
    };
    (bounds, weights, margin, t)
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut families = [0usize; 3];
    let instances = 300;
    for i in 0..instances {
        let (bounds, weights, margin, t) = random_instance(&mut rng, 10);
        families[match weights.family() {
            WeightFamily::Identity => 0,
            WeightFamily::PerOpportunity => 1,
            WeightFamily::Thresholded { .. } => 2,
        }] += 1;
        let n = rng.gen_range(1..=bounds.len());
        let exhaustive = exhaustive_pi_star(&t, n, &bounds, &weights, margin).map_err(|e| e.to_string())?;
        let q = compute_q(&t, &bounds, &weights, margin).map_err(|e| e.to_string())?;
        let closed = pi_star(q, n, bounds.len()).map_err(|e| e.to_string())?;
        ensure(exhaustive == closed, || {
            format!("instance {i}: enumeration {exhaustive} != closed form {closed} (u {bounds:?}, M {margin}, t {t})")
        })?;
    }
    ensure(families.iter().all(|&c| c > 0), || format!("family coverage {families:?}"))?;
    let scans = 2000;
    for i in 0..scans {
        let (bounds, weights, margin, t) = random_instance(&mut rng, 40);
        let iterative = compute_q(&t, &bounds, &weights, margin).map_err(|e| e.to_string())?;
        let definitional = compute_q_definitional(&t, &bounds, &weights, margin).map_err(|e| e.to_string())?;
        ensure(iterative == definitional, || {
            format!("instance {i}: iterative q {iterative} != definitional {definitional}")
        })?;
    }
    Ok(format!(
        "{instances} enumerations equal the closed form exactly (families {families:?}); {scans} q scans agree"
    ))
}

fn stratification_claims() -> Check {
    let mut configs = 0u64;
    let mut sizes_list: Vec<Vec<usize>> = Vec::new();
    for c in 1..=3usize {
        let mut sizes = vec![1usize; c];
        loop {
            sizes_list.push(sizes.clone());
            // Next nondecreasing tuple with entries in 1..=8.
            let Some(i) = (0..c).rev().find(|&i| sizes[i] < 8) else { break };
            sizes[i] += 1;
            for j in i + 1..c {
                sizes[j] = sizes[i];
            }
        }
    }
    for sizes in &sizes_list {
        let population: usize = sizes.iter().sum();
        let mut k = vec![0usize; sizes.len()];
        loop {
            let total_k: usize = k.iter().sum();
            for n_s in 1..=population {
                let alloc = proportional_allocation(n_s, sizes);
                let strata: Vec<(usize, usize, usize)> =
                    k.iter().zip(sizes).zip(&alloc).map(|((&k, &size), &n)| (k, size, n)).collect();
                let exact = exact_stratified_zero_prob(&strata);
                let bound = pi_diamond(total_k, n_s, population);
                ensure(exact <= bound, || {
                    format!("sizes {sizes:?}, k {k:?}, n_s {n_s}: {} > {}", exact, bound)
                })?;
                configs += 1;
            }
            let Some(i) = (0..k.len()).rev().find(|&i| k[i] < sizes[i]) else { break };
            k[i] += 1;
            for j in i + 1..k.len() {
                k[j] = 0;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let instances = 2000;
    for i in 0..instances {
        let c = rng.gen_range(1..=8);
        let strata: Vec<(u64, u64)> = (0..c)
            .map(|_| (rng.gen_range(0..=5000), rng.gen_range(1..=5000)))
            .collect();
        let overall = ratio(strata.iter().map(|s| s.0).sum(), strata.iter().map(|s| s.1).sum());
        let worst = strata.iter().map(|&(e, b)| ratio(e, b)).max().unwrap();
        ensure(worst >= overall, || format!("instance {i}: {worst} < {overall}"))?;
    }
    Ok(format!(
        "stratified product <= (k/N)^n on all {configs} exhaustive configurations; \
         county maximum >= overall ratio on {instances} instances"
    ))
}

fn risk_simulation() -> Check {
    let start = Instant::now();
    let sim = RiskSimulation {
        alpha: ratio(1, 10),
        trials: 10_000,
        min_precincts: 5,
        max_precincts: 50,
        adversary: Adversary::WorstCase,
        seed: 20080601,
    };
    let estimate = mc_protocol_risk(&sim).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(estimate.rate <= estimate.bound, || {
        format!("error rate {:.4} exceeds {:.4}", estimate.rate, estimate.bound)
    })?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "{} erroneous confirmations in {} audits: rate {:.4} <= {:.4}; {elapsed:.1?}",
        estimate.erroneous, estimate.trials, estimate.rate, estimate.bound
    ))
}

fn two_county_contest() -> Contest {
    let precincts = (0..40)
        .map(|p| {
            let ballots = 200 + (p * 37 % 150) as i64;
            let a = ballots * 55 / 100;
            PrecinctRecord {
                precinct_id: format!("{}-{p:02}", if p < 25 { "north" } else { "south" }),
                county_id: if p < 25 { "north" } else { "south" }.into(),
                reported_votes: vec![a, ballots - a - 4],
                reported_undervotes: 4,
                reported_invalid_ballots: 0,
                reported_ballots: ballots,
                vote_cap: None,
            }
        })
        .collect();
    validate_contest(ContestSpec {
        schema_version: 1,
        contest_id: "two-county".into(),
        f: 1,
        candidates: ["Avery", "Blake"]
            .into_iter()
            .map(|name| Candidate {
                name: name.into(),
                kind: CandidateKind::Listed,
            })
            .collect(),
        precincts,
        supermajority: None,
    })
    .unwrap()
}

/// Runs an audit to completion; every precinct shows one overstated winner vote.
/// `reload_after` serializes and reloads the session after that many stages.
fn run_audit(contest: Contest, config: SessionConfig, reload_after: Option<usize>) -> (String, String) {
    let mut session = AuditSession::create(contest, config).unwrap();
    let mut stages = 0;
    while !session.status().is_terminal() {
        let ids = session.draw().unwrap();
        let tallies = ids
            .iter()
            .map(|id| {
                let p = session.contest().precinct_index(id).unwrap();
                let mut tally = HandTally::matching_reported(session.contest(), p);
                tally.votes[0] -= 1;
                tally.undervotes += 1;
                tally
            })
            .collect();
        session.record(tallies).unwrap();
        session.evaluate().unwrap();
        stages += 1;
        if reload_after == Some(stages) {
            session = AuditSession::from_json(&session.to_json()).unwrap();
        }
    }
    let report = session_report(&session);
    (report.to_json(), report.to_text())
}

fn determinism() -> Check {
    let mut sausalito_config = SessionConfig::new(ratio(1, 10), 5);
    sausalito_config.initial = InitialSize::Count { n: 1 };
    let mut county_config = SessionConfig::new(ratio(1, 10), 77);
    county_config.design = DesignKind::StratifiedProportional;
    county_config.weight = WeightFamily::Identity;
    county_config.initial = InitialSize::Threshold { t: int(1) };
    let mut per_county = county_config.clone();
    per_county.design = DesignKind::PerCounty;

    let cases = [
        ("sausalito", sausalito(), sausalito_config),
        ("proportional", two_county_contest(), county_config),
        ("per-county", two_county_contest(), per_county),
    ];
    for (name, contest, config) in cases {
        let first = run_audit(contest.clone(), config.clone(), None);
        let second = run_audit(contest.clone(), config.clone(), None);
        ensure(first == second, || format!("{name}: two runs differ"))?;
        let reloaded = run_audit(contest, config, Some(1));
        ensure(first == reloaded, || format!("{name}: reload changed the report"))?;
    }
    Ok("reports byte-identical across runs and across save/reload (simple, proportional, per-county)".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("Sausalito reproduction", sausalito_reproduction),
        ("Sausalito P-values and initial sample", sausalito_p_values),
        ("Minnesota P-value table", minnesota_table),
        ("Stratification counterexample", footnote_counterexample),
        ("Oracle equivalence", oracle_equivalence),
        ("Stratification bounds", stratification_claims),
        ("Sequential risk simulation", risk_simulation),
        ("Determinism", determinism),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
