//! Exact rational helpers shared by the inequality evaluators and the LP.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

pub type Rational = BigRational;

/// The decimal a float prints as, as an exact rational (`0.1495` → `1495/10000`).
///
/// Floats are shown by Rust with the shortest digit string that round-trips,
/// so this recovers the value a user typed rather than its binary neighbour.
pub fn from_decimal(v: f64) -> Rational {
    assert!(v.is_finite(), "non-finite value {v}");
    let text = format!("{v}");
    let (negative, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let numer: BigInt = format!("{int_part}{frac_part}")
        .parse()
        .expect("float display is decimal digits");
    let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    let r = Rational::new(numer, denom);
    if negative {
        -r
    } else {
        r
    }
}

/// Exact binary value of a float.
pub fn from_binary(v: f64) -> Rational {
    Rational::from_float(v).expect("finite float")
}

pub fn to_f64(r: &Rational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn int(v: i64) -> Rational {
    Rational::from_integer(BigInt::from(v))
}

pub fn ratio(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_round_trip() {
        assert_eq!(from_decimal(0.1495), ratio(1495, 10000));
        assert_eq!(from_decimal(-2.5), ratio(-5, 2));
        assert_eq!(from_decimal(3.0), int(3));
        assert_eq!(from_decimal(1e-20), ratio(1, 1) / int(10).pow(20));
        assert_eq!(to_f64(&from_decimal(0.1495)), 0.1495);
    }

    #[test]
    fn binary_is_exact() {
        assert_eq!(from_binary(0.375), ratio(3, 8));
        assert_ne!(from_binary(0.1), ratio(1, 10));
    }
}
