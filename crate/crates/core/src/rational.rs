//! Exact rational helpers and the [`Probability`] value type.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AuditError, Result};

/// Parses `"3"`, `"2/3"`, `"0.002"`, `"-1.5"` or `"5.7e-4"` into an exact rational.
pub fn parse_rational(text: &str) -> Result<BigRational> {
    let s = text.trim();
    let bad = || AuditError::InvalidInput(format!("not a number: {text:?}"));
    if s.is_empty() {
        return Err(bad());
    }
    if let Some((num, den)) = s.split_once('/') {
        let num = parse_rational(num)?;
        let den = parse_rational(den)?;
        if den.is_zero() {
            return Err(bad());
        }
        return Ok(num / den);
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let all_digits = format!("{int_part}{frac_part}");
    let mut value = BigRational::from_integer(BigInt::from_str(&all_digits).map_err(|_| bad())?);
    let shift = exponent - frac_part.len() as i32;
    let scale = BigRational::from_integer(pow10(shift.unsigned_abs()));
    if shift >= 0 {
        value *= scale;
    } else {
        value /= scale;
    }
    Ok(if negative { -value } else { value })
}

pub fn pow10(exp: u32) -> BigInt {
    num_traits::pow(BigInt::from(10u32), exp as usize)
}

pub fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn int(value: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(value))
}

/// Smallest integer not below `value`, clamped at zero.
pub fn ceil_u64(value: &BigRational) -> u64 {
    if value.is_negative() {
        return 0;
    }
    value.ceil().to_integer().to_u64().unwrap_or(u64::MAX)
}

/// Largest integer not above `value`, clamped at zero.
pub fn floor_u64(value: &BigRational) -> u64 {
    if value.is_negative() {
        return 0;
    }
    value.floor().to_integer().to_u64().unwrap_or(u64::MAX)
}

/// Rounds a positive rational to `sig` significant decimal digits, half to even.
/// Returns the digit string and the decimal exponent of its leading digit.
fn significant_digits(value: &BigRational, sig: u32) -> (BigInt, i64) {
    debug_assert!(value.is_positive());
    let numer_len = value.numer().to_string().len() as i64;
    let denom_len = value.denom().to_string().len() as i64;
    let mut exponent = numer_len - denom_len;
    let lower = pow10(sig - 1);
    let upper = pow10(sig);
    let scaled = loop {
        let shift = sig as i64 - 1 - exponent;
        let factor = BigRational::from_integer(pow10(shift.unsigned_abs() as u32));
        let scaled = if shift >= 0 {
            value * &factor
        } else {
            value / &factor
        };
        let whole = scaled.floor().to_integer();
        if whole >= upper {
            exponent += 1;
        } else if whole < lower {
            exponent -= 1;
        } else {
            break scaled;
        }
    };
    let whole = scaled.floor().to_integer();
    let twice_rem = (scaled - BigRational::from_integer(whole.clone())) * BigRational::from_integer(BigInt::from(2));
    let mut digits = match twice_rem.cmp(&BigRational::one()) {
        Ordering::Less => whole,
        Ordering::Greater => whole + 1,
        Ordering::Equal if whole.is_even() => whole,
        Ordering::Equal => whole + 1,
    };
    if digits == upper {
        digits = lower;
        exponent += 1;
    }
    (digits, exponent)
}

/// Renders a nonnegative rational with `sig` significant digits: fixed notation for
/// moderate magnitudes, scientific (`1.373e-17`) otherwise.
pub fn format_significant(value: &BigRational, sig: u32) -> String {
    if value.is_zero() {
        return "0".to_string();
    }
    let negative = value.is_negative();
    let (digits, exponent) = significant_digits(&value.abs(), sig);
    let digits = digits.to_string();
    let digits = match digits.trim_end_matches('0') {
        "" => "0",
        trimmed => trimmed,
    };
    let body = if (-5..6).contains(&exponent) {
        if exponent >= 0 {
            let int_len = exponent as usize + 1;
            if digits.len() <= int_len {
                format!("{digits}{}", "0".repeat(int_len - digits.len()))
            } else {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            }
        } else {
            let zeros = (-exponent - 1) as usize;
            format!("0.{}{}", "0".repeat(zeros), digits)
        }
    } else {
        let (head, tail) = digits.split_at(1);
        if tail.is_empty() {
            format!("{head}e{exponent}")
        } else {
            format!("{head}.{tail}e{exponent}")
        }
    };
    if negative {
        format!("-{body}")
    } else {
        body
    }
}

/// An exact probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Probability(BigRational);

impl Probability {
    pub fn new(value: BigRational) -> Self {
        debug_assert!(!value.is_negative() && value <= BigRational::one());
        Self(value)
    }

    pub fn zero() -> Self {
        Self(BigRational::zero())
    }

    pub fn one() -> Self {
        Self(BigRational::one())
    }

    pub fn exact(&self) -> &BigRational {
        &self.0
    }

    pub fn into_inner(self) -> BigRational {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    /// Nearest `f64`; values below the smallest subnormal become `0.0`.
    pub fn to_f64(&self) -> f64 {
        if self.0.is_zero() {
            return 0.0;
        }
        self.0.to_f64().unwrap_or_else(|| {
            let (digits, exponent) = significant_digits(&self.0, 17);
            format!("{digits}e{}", exponent - 16).parse().unwrap_or(0.0)
        })
    }

    /// Four significant digits, half-even.
    pub fn decimal(&self) -> String {
        format_significant(&self.0, 4)
    }

    /// Percentage with three significant digits, e.g. `88.9%`.
    pub fn percent(&self) -> String {
        format!("{}%", format_significant(&(&self.0 * int(100)), 3))
    }

    /// `8/9 (88.9%)` style rendering. Long fractions are elided to the percentage.
    pub fn display_exact(&self) -> String {
        let fraction = self.0.to_string();
        if fraction.len() <= 40 {
            format!("{fraction} ({})", self.percent())
        } else {
            self.percent()
        }
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_exact())
    }
}

#[derive(Serialize, Deserialize)]
struct ProbabilityWire {
    numerator: String,
    denominator: String,
    decimal: String,
}

impl Serialize for Probability {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ProbabilityWire {
            numerator: self.0.numer().to_string(),
            denominator: self.0.denom().to_string(),
            decimal: self.decimal(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Probability {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let wire = ProbabilityWire::deserialize(deserializer)?;
        let numer = BigInt::from_str(&wire.numerator).map_err(D::Error::custom)?;
        let denom = BigInt::from_str(&wire.denominator).map_err(D::Error::custom)?;
        if denom.is_zero() {
            return Err(D::Error::custom("zero denominator"));
        }
        let value = BigRational::new(numer, denom);
        if value.is_negative() || value > BigRational::one() {
            return Err(D::Error::custom("probability out of range"));
        }
        Ok(Self(value))
    }
}

/// Serde adapter storing a rational as its canonical `"p/q"` string.
pub mod as_string {
    use super::*;

    pub fn serialize<S: Serializer>(value: &BigRational, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&value.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<BigRational, D::Error> {
        use serde::de::Error;
        let text = String::deserialize(deserializer)?;
        parse_rational(&text).map_err(D::Error::custom)
    }
}

/// [`as_string`] for optional values; `None` is `null`.
pub mod opt_as_string {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Option<BigRational>, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match value {
            Some(v) => serializer.serialize_some(&v.to_string()),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Option<BigRational>, D::Error> {
        use serde::de::Error;
        Option::<String>::deserialize(deserializer)?
            .map(|text| parse_rational(&text).map_err(D::Error::custom))
            .transpose()
    }
}
