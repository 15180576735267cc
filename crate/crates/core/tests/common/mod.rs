#![allow(dead_code)]

use ballotaudit_core::contest::{validate_contest, Candidate, CandidateKind, Contest, ContestSpec, PrecinctRecord};
use ballotaudit_core::discrepancy::HandTally;
use proptest::prelude::*;

/// One precinct row: votes per candidate, spare undervotes, invalid ballots.
pub type Row = (Vec<u64>, u64, u64);

/// Builds a valid contest; ballots are chosen so the accounting identity holds.
pub fn build_contest(f: u64, rows: &[Row]) -> Contest {
    let k = rows[0].0.len();
    let precincts = rows
        .iter()
        .enumerate()
        .map(|(p, (votes, spare, invalid))| {
            let cast: u64 = votes.iter().sum::<u64>() + spare;
            let ballots = cast.div_ceil(f).max(1) + invalid;
            let undervotes = f * (ballots - invalid) - votes.iter().sum::<u64>();
            PrecinctRecord {
                precinct_id: format!("p{p:02}"),
                county_id: format!("c{}", p % 2),
                reported_votes: votes.iter().map(|&v| v as i64).collect(),
                reported_undervotes: undervotes as i64,
                reported_invalid_ballots: *invalid as i64,
                reported_ballots: ballots as i64,
                vote_cap: None,
            }
        })
        .collect();
    validate_contest(ContestSpec {
        schema_version: 1,
        contest_id: "generated".into(),
        f: f as i64,
        candidates: (0..k)
            .map(|i| Candidate {
                name: format!("cand{i}"),
                kind: CandidateKind::Listed,
            })
            .collect(),
        precincts,
        supermajority: None,
    })
    .expect("generated contest is valid")
}

pub fn contest_strategy(max_candidates: usize, max_precincts: usize) -> impl Strategy<Value = Contest> {
    (1u64..=3, 2..=max_candidates, 1..=max_precincts)
        .prop_flat_map(|(f, k, n)| {
            (
                Just(f),
                prop::collection::vec((prop::collection::vec(0u64..=300, k), 0u64..=60, 0u64..=3), n),
            )
        })
        .prop_map(|(f, rows)| build_contest(f, &rows))
}

/// A hand tally for precinct `p` with the same ballots: `moves` single votes are
/// shifted between candidates and the undervote bucket, chosen by `picks`.
pub fn perturbed_tally(contest: &Contest, p: usize, picks: &[(usize, usize)]) -> HandTally {
    let mut tally = HandTally::matching_reported(contest, p);
    let slots = contest.candidates.len() + 1;
    for &(from, to) in picks {
        let (from, to) = (from % slots, to % slots);
        let available = if from == slots - 1 { tally.undervotes } else { tally.votes[from] };
        if from == to || available == 0 {
            continue;
        }
        if from == slots - 1 {
            tally.undervotes -= 1;
        } else {
            tally.votes[from] -= 1;
        }
        if to == slots - 1 {
            tally.undervotes += 1;
        } else {
            tally.votes[to] += 1;
        }
    }
    tally
}
