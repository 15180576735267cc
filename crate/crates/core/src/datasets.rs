//! Bundled reference data.

use crate::contest::{read_contest_csv, Contest};

/// Sausalito City Council, November 2006: vote for up to three, nine precincts.
pub const SAUSALITO_CSV: &str = include_str!("../data/sausalito.csv");

pub fn sausalito() -> Contest {
    read_contest_csv(SAUSALITO_CSV.as_bytes(), "sausalito-2006", 3).expect("bundled data is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sausalito_loads() {
        let contest = sausalito();
        assert_eq!(contest.num_precincts(), 9);
        assert_eq!(contest.candidate_totals(), vec![2234, 2195, 2022, 1936, 449, 41]);
    }
}
