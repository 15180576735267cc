//! Exact worst-case tail probabilities for the sample-maximum statistic.
//!
//! For an observed statistic `t`, the least favourable way to spread an
//! outcome-changing overstatement keeps as many precincts as possible at or below
//! `w_p^{-1}(t)`. That count is `q`, and the maximum P-values are
//! `C(q, n) / C(N, n)` without replacement and `(q / N)^n` with replacement.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::contest::County;
use crate::error::{AuditError, Result};
use crate::rational::{int, ratio, Probability};
use crate::weight::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    WithoutReplacement,
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailResult {
    pub q: usize,
    pub n: usize,
    pub population: usize,
    pub mode: SamplingMode,
    pub p_value: Probability,
}

/// `u_p − (u_p ∧ w_p^{-1}(t))`: how much of precinct `p`'s bound lies above the
/// level that keeps its weighted error at or below `t`.
fn excess_over_threshold(t: &BigRational, bounds: &[u64], weights: &Weights) -> Result<Vec<(BigRational, BigRational)>> {
    assert_eq!(bounds.len(), weights.len(), "bounds and weights cover different precincts");
    bounds
        .iter()
        .enumerate()
        .map(|(p, &u)| {
            let u = int(u);
            let inv = weights.invert(p, t)?;
            let capped = if inv < u { inv } else { u.clone() };
            Ok((&u - &capped, capped))
        })
        .collect()
}

/// Precincts ordered by increasing excess, ties by ascending index.
pub fn excess_order(t: &BigRational, bounds: &[u64], weights: &Weights) -> Result<Vec<usize>> {
    let excess = excess_over_threshold(t, bounds, weights)?;
    let mut order: Vec<usize> = (0..bounds.len()).collect();
    order.sort_by(|&a, &b| excess[a].0.cmp(&excess[b].0).then(a.cmp(&b)));
    Ok(order)
}

/// The largest number of precincts that can hold weighted error at most `t` while
/// the total overstatement still reaches `margin`; zero when none can.
///
/// Starts from every precinct at `u ∧ w^{-1}(t)` and releases the precinct with the
/// largest excess back to its full bound until the total reaches the margin.
pub fn compute_q(t: &BigRational, bounds: &[u64], weights: &Weights, margin: u64) -> Result<usize> {
    let excess = excess_over_threshold(t, bounds, weights)?;
    let margin = int(margin);
    let mut total: BigRational = excess.iter().map(|(_, capped)| capped).sum();
    let mut order: Vec<usize> = (0..bounds.len()).collect();
    order.sort_by(|&a, &b| excess[b].0.cmp(&excess[a].0).then(b.cmp(&a)));
    let mut remaining = bounds.len();
    for p in order {
        if total >= margin {
            break;
        }
        total += &excess[p].0;
        remaining -= 1;
    }
    Ok(if total >= margin { remaining } else { 0 })
}

/// `C(q, n) / C(N, n)`, computed as `Π_{i<n} (q − i) / (N − i)`.
pub fn pi_star(q: usize, n: usize, population: usize) -> Result<Probability> {
    if n > population {
        return Err(AuditError::SampleTooLarge { n, population });
    }
    assert!(q <= population, "q exceeds the population");
    if q < n {
        return Ok(Probability::zero());
    }
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for i in 0..n {
        num *= q - i;
        den *= population - i;
    }
    Ok(Probability::new(BigRational::new(num, den)))
}

/// `(q / N)^n`.
pub fn pi_diamond(q: usize, n: usize, population: usize) -> Probability {
    assert!(q <= population && population > 0, "q exceeds the population");
    let base = ratio(q as u64, population as u64);
    Probability::new(num_traits::pow(base, n))
}

/// Maximum P-value for a simple random sample of `n` precincts.
pub fn tail_without_replacement(
    t: &BigRational,
    n: usize,
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
) -> Result<TailResult> {
    let q = compute_q(t, bounds, weights, margin)?;
    Ok(TailResult {
        q,
        n,
        population: bounds.len(),
        mode: SamplingMode::WithoutReplacement,
        p_value: pi_star(q, n, bounds.len())?,
    })
}

/// Maximum P-value for `n` draws with replacement.
pub fn tail_with_replacement(
    t: &BigRational,
    n: usize,
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
) -> Result<TailResult> {
    let q = compute_q(t, bounds, weights, margin)?;
    Ok(TailResult {
        q,
        n,
        population: bounds.len(),
        mode: SamplingMode::WithReplacement,
        p_value: pi_diamond(q, n, bounds.len()),
    })
}

/// `n_cs = ⌈n_s N_c / N⌉`, clipped at `N_c`.
pub fn proportional_allocation(n_s: usize, county_sizes: &[usize]) -> Vec<usize> {
    let population: usize = county_sizes.iter().sum();
    county_sizes
        .iter()
        .map(|&size| {
            if population == 0 {
                0
            } else {
                (n_s * size).div_ceil(population).min(size)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedPValue {
    /// Size of the with-replacement sample the data are treated as.
    pub n_eff: usize,
    pub tail: TailResult,
    /// Counties with precincts but no sample; they force `n_eff = 0`.
    pub zero_sample_counties: Vec<usize>,
}

/// Conservative P-value for independent within-county samples of sizes
/// `samples[c]`, treated as a with-replacement sample of
/// `n_eff = ⌊N min_c (n_c / N_c)⌋`. When the sizes are exactly the proportional
/// allocation for `nominal`, `n_eff = nominal`.
pub fn stratified_pvalue_proportional(
    t: &BigRational,
    samples: &[usize],
    county_sizes: &[usize],
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
    nominal: Option<usize>,
) -> Result<StratifiedPValue> {
    assert_eq!(samples.len(), county_sizes.len());
    let population: usize = county_sizes.iter().sum();
    for (&n, &size) in samples.iter().zip(county_sizes) {
        if n > size {
            return Err(AuditError::SampleTooLarge { n, population: size });
        }
    }
    let zero_sample_counties: Vec<usize> = samples
        .iter()
        .zip(county_sizes)
        .enumerate()
        .filter(|(_, (&n, &size))| n == 0 && size > 0)
        .map(|(c, _)| c)
        .collect();

    let n_eff = match nominal {
        Some(n_s) if proportional_allocation(n_s, county_sizes) == samples => n_s,
        _ if !zero_sample_counties.is_empty() => 0,
        _ => {
            let min_fraction = samples
                .iter()
                .zip(county_sizes)
                .filter(|(_, &size)| size > 0)
                .map(|(&n, &size)| ratio(n as u64, size as u64))
                .min()
                .unwrap_or_else(BigRational::zero);
            crate::rational::floor_u64(&(min_fraction * int(population as u64))) as usize
        }
    };
    let tail = tail_with_replacement(t, n_eff, bounds, weights, margin)?;
    Ok(StratifiedPValue {
        n_eff,
        tail,
        zero_sample_counties,
    })
}

/// `⌊M B_c / B⌋`.
pub fn county_margin_threshold(margin: u64, county_opportunities: u64, opportunities: u64) -> u64 {
    assert!(county_opportunities <= opportunities && opportunities > 0);
    (margin as u128 * county_opportunities as u128 / opportunities as u128) as u64
}

/// One county's test in the per-county design.
#[derive(Debug, Clone)]
pub struct CountyQuery {
    pub t: BigRational,
    pub n: usize,
    pub bounds: Vec<u64>,
    pub weights: Weights,
    pub margin: u64,
}

/// The overall P-value is the largest county P-value: the outcome is confirmed only
/// when every county rejects.
pub fn per_county_pvalue(queries: &[CountyQuery]) -> Result<(Probability, Vec<TailResult>)> {
    let results = queries
        .iter()
        .map(|q| tail_without_replacement(&q.t, q.n, &q.bounds, &q.weights, q.margin))
        .collect::<Result<Vec<_>>>()?;
    let worst = results
        .iter()
        .map(|r| r.p_value.clone())
        .max()
        .unwrap_or_else(Probability::zero);
    Ok((worst, results))
}

/// Smallest `n` in `1..=max` with `pred(n)`, for a predicate monotone in `n`;
/// `max` when none satisfies it. Doubles, then bisects.
pub fn smallest_satisfying<F>(max: usize, mut pred: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<bool>,
{
    if max == 0 {
        return Ok(0);
    }
    let mut low = 0; // largest n known to fail
    let mut high = 1;
    loop {
        if pred(high)? {
            break;
        }
        low = high;
        if high == max {
            return Ok(max);
        }
        high = (high * 2).min(max);
    }
    while high - low > 1 {
        let mid = low + (high - low) / 2;
        if pred(mid)? {
            high = mid;
        } else {
            low = mid;
        }
    }
    Ok(high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    #[default]
    Simple,
    StratifiedProportional,
    PerCounty,
}

impl std::str::FromStr for DesignKind {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "proportional" | "stratified-proportional" => Ok(Self::StratifiedProportional),
            "per-county" => Ok(Self::PerCounty),
            other => Err(AuditError::InvalidInput(format!("unknown sampling design {other:?}"))),
        }
    }
}

impl std::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignKind::Simple => "simple",
            DesignKind::StratifiedProportional => "proportional",
            DesignKind::PerCounty => "per-county",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountyPlan {
    pub county_id: String,
    pub precincts: usize,
    pub margin: u64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialSampleSize {
    pub design: DesignKind,
    /// Overall initial sample: `n_1` for the simple and proportional designs, the
    /// sum of county sizes for the per-county design.
    pub n: usize,
    pub population: usize,
    pub counties: Vec<CountyPlan>,
}

impl InitialSampleSize {
    pub fn is_full_count(&self) -> bool {
        self.n >= self.population
    }
}

/// Smallest initial sample that confirms the outcome at `alpha` as long as the
/// statistic comes in at or below `t`. Returns the full population when no smaller
/// sample suffices.
pub fn initial_sample_size(
    t: &BigRational,
    alpha: &BigRational,
    bounds: &[u64],
    weights: &Weights,
    margin: u64,
    design: DesignKind,
    counties: &[County],
    opportunities: u64,
) -> Result<InitialSampleSize> {
    let population = bounds.len();
    let below = |p: &Probability| p.exact() < alpha;
    match design {
        DesignKind::Simple => {
            let q = compute_q(t, bounds, weights, margin)?;
            let n = smallest_satisfying(population, |n| Ok(below(&pi_star(q, n, population)?)))?;
            Ok(InitialSampleSize {
                design,
                n,
                population,
                counties: Vec::new(),
            })
        }
        DesignKind::StratifiedProportional => {
            let q = compute_q(t, bounds, weights, margin)?;
            let n = smallest_satisfying(population, |n| Ok(below(&pi_diamond(q, n, population))))?;
            let sizes: Vec<usize> = counties.iter().map(|c| c.precincts.len()).collect();
            let alloc = proportional_allocation(n, &sizes);
            Ok(InitialSampleSize {
                design,
                n,
                population,
                counties: counties
                    .iter()
                    .zip(alloc)
                    .map(|(c, n)| CountyPlan {
                        county_id: c.id.clone(),
                        precincts: c.precincts.len(),
                        margin,
                        n,
                    })
                    .collect(),
            })
        }
        DesignKind::PerCounty => {
            let mut plans = Vec::with_capacity(counties.len());
            for county in counties {
                let county_margin = county_margin_threshold(margin, county.opportunities, opportunities);
                let county_bounds: Vec<u64> = county.precincts.iter().map(|&p| bounds[p]).collect();
                let county_weights = weights.subset(&county.precincts);
                let size = county.precincts.len();
                let q = compute_q(t, &county_bounds, &county_weights, county_margin)?;
                let n = smallest_satisfying(size, |n| Ok(below(&pi_star(q, n, size)?)))?;
                plans.push(CountyPlan {
                    county_id: county.id.clone(),
                    precincts: size,
                    margin: county_margin,
                    n,
                });
            }
            Ok(InitialSampleSize {
                design,
                n: plans.iter().map(|p| p.n).sum(),
                population,
                counties: plans,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weight::WeightFamily;

    fn identity(n: usize) -> Weights {
        Weights::new(WeightFamily::Identity, vec![1; n]).unwrap()
    }

    #[test]
    fn q_is_zero_when_bounds_cannot_reach_margin() {
        assert_eq!(compute_q(&int(0), &[1, 1], &identity(2), 5).unwrap(), 0);
    }

    #[test]
    fn q_for_three_equal_precincts() {
        // u = (10, 10, 10), w^{-1}(t) = 2, M = 25: only the uncapped allocation works.
        assert_eq!(compute_q(&int(2), &[10, 10, 10], &identity(3), 25).unwrap(), 0);
        // M = 22: one precinct at 2 and two at 10 reach 22.
        assert_eq!(compute_q(&int(2), &[10, 10, 10], &identity(3), 22).unwrap(), 1);
        // M = 6: all three at 2 already reach 6.
        assert_eq!(compute_q(&int(2), &[10, 10, 10], &identity(3), 6).unwrap(), 3);
    }

    #[test]
    fn pi_star_zero_branch_and_ratio() {
        assert!(pi_star(8, 9, 9).unwrap().is_zero());
        assert_eq!(pi_star(8, 1, 9).unwrap().exact(), &ratio(8, 9));
        assert_eq!(pi_star(8, 3, 9).unwrap().exact(), &ratio(6, 9));
        assert_eq!(
            pi_star(5, 10, 9).unwrap_err(),
            AuditError::SampleTooLarge { n: 10, population: 9 }
        );
    }

    #[test]
    fn pi_diamond_values() {
        assert!(pi_diamond(0, 1, 10).is_zero());
        assert_eq!(pi_diamond(3, 2, 4).exact(), &ratio(9, 16));
    }

    #[test]
    fn proportional_allocation_examples() {
        assert_eq!(proportional_allocation(80, &[50, 50]), vec![40, 40]);
        assert_eq!(proportional_allocation(100, &[30, 70]), vec![30, 70]);
        assert_eq!(proportional_allocation(7, &[12]), vec![7]);
        assert_eq!(proportional_allocation(10, &[1, 99]), vec![1, 10]);
    }

    #[test]
    fn min_fraction_rule() {
        let weights = identity(200);
        let bounds = vec![1; 200];
        let result =
            stratified_pvalue_proportional(&int(0), &[5, 10], &[100, 100], &bounds, &weights, 1000, None).unwrap();
        assert_eq!(result.n_eff, 10);
        // Sum of bounds is below the margin, so q = 0 and the P-value is 0.
        assert!(result.tail.p_value.is_zero());
    }

    #[test]
    fn proportional_allocation_uses_nominal_size() {
        let bounds = vec![10; 20];
        let weights = identity(20);
        let stratified =
            stratified_pvalue_proportional(&int(1), &[5, 5], &[10, 10], &bounds, &weights, 50, Some(10)).unwrap();
        let direct = tail_with_replacement(&int(1), 10, &bounds, &weights, 50).unwrap();
        assert_eq!(stratified.n_eff, 10);
        assert_eq!(stratified.tail, direct);
    }

    #[test]
    fn unsampled_county_forces_p_value_one() {
        let bounds = vec![10; 20];
        let result =
            stratified_pvalue_proportional(&int(1), &[0, 5], &[10, 10], &bounds, &identity(20), 50, None).unwrap();
        assert_eq!(result.n_eff, 0);
        assert_eq!(result.zero_sample_counties, vec![0]);
        assert_eq!(result.tail.p_value, Probability::one());
    }

    #[test]
    fn county_thresholds() {
        assert_eq!(county_margin_threshold(500, 1000, 1000), 500);
        assert_eq!(county_margin_threshold(443_196, 221_781, 2_217_818), 44_319);
        assert_eq!(county_margin_threshold(100, 1, 1000), 0);
    }

    #[test]
    fn per_county_takes_the_worst_county() {
        let county = |margin| CountyQuery {
            t: int(1),
            n: 2,
            bounds: vec![10; 5],
            weights: identity(5),
            margin,
        };
        let (overall, parts) = per_county_pvalue(&[county(25), county(10)]).unwrap();
        let worst = parts.iter().map(|r| r.p_value.clone()).max().unwrap();
        assert_eq!(overall, worst);
        assert_eq!(parts[0].p_value.exact(), &ratio(1, 10)); // q = 2: C(2,2)/C(5,2)
        assert_eq!(parts[1].p_value.exact(), &ratio(3, 5)); // q = 4: C(4,2)/C(5,2)
        let (none, _) = per_county_pvalue(&[county(100)]).unwrap();
        assert!(none.is_zero());
    }

    #[test]
    fn search_finds_first_true() {
        for target in 1..=40 {
            assert_eq!(smallest_satisfying(40, |n| Ok(n >= target)).unwrap(), target);
        }
        assert_eq!(smallest_satisfying(40, |_| Ok(false)).unwrap(), 40);
    }
}
