//! Rewrites `tests/fixtures/oracle.jsonl`.
//!
//! ```text
//! cargo run -p ballotaudit-core --example regen_fixtures
//! ```

use std::fs;
use std::path::Path;

use ballotaudit_core::oracle::OracleCase;
use ballotaudit_core::rational::ratio;
use ballotaudit_core::weight::WeightFamily;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 240;
const SEED: u64 = 0x0f1c_5eed;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut lines = Vec::with_capacity(CASES);
    for i in 0..CASES {
        let family = match i % 3 {
            0 => WeightFamily::Identity,
            1 => WeightFamily::PerOpportunity,
            _ => WeightFamily::Thresholded { m: rng.gen_range(0..=3) },
        };
        let size = rng.gen_range(1..=10);
        let bounds: Vec<u64> = (0..size).map(|_| rng.gen_range(0..=20)).collect();
        let opportunities: Vec<u64> = (0..size).map(|_| rng.gen_range(1..=30)).collect();
        let margin = rng.gen_range(0..=bounds.iter().sum::<u64>() + 5);
        let t = match family {
            WeightFamily::Identity => ratio(rng.gen_range(0..=20), 1),
            _ => ratio(rng.gen_range(0..=30), rng.gen_range(1..=60)),
        };
        let n = rng.gen_range(1..=size);
        let case = OracleCase::evaluate(family, opportunities, bounds, margin, t, n).expect("small instance");
        lines.push(serde_json::to_string(&case).expect("case serializes"));
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle.jsonl");
    fs::write(&path, lines.join("\n") + "\n").expect("write fixtures");
    println!("wrote {CASES} cases to {}", path.display());
}
