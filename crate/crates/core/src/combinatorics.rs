//! Exact counts of even-multiplicity tuples and the Khintchine-type bound on them.

use serde::Serialize;

use crate::error::{Error, Result};

/// `n!!` with `(-1)!! = 0!! = 1`.
pub fn double_factorial(n: i64) -> u128 {
    assert!(n >= -1, "double factorial undefined below -1");
    let mut out: u128 = 1;
    let mut k = n;
    while k > 1 {
        out *= k as u128;
        k -= 2;
    }
    out
}

/// `n!!` as a float, for bounds with larger arguments.
pub fn double_factorial_f64(n: i64) -> f64 {
    assert!(n >= -1, "double factorial undefined below -1");
    let mut out = 1.0;
    let mut k = n;
    while k > 1 {
        out *= k as f64;
        k -= 2;
    }
    out
}

fn binomial(n: u32, k: u32) -> u128 {
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

fn check_range(k: u32, l: u32) -> Result<()> {
    if !(1..=6).contains(&k) || !(1..=8).contains(&l) {
        return Err(Error::InvalidInput(format!("count_even_tuples needs 1 <= k <= 6 and 1 <= l <= 8, got k={k}, l={l}")));
    }
    Ok(())
}

/// Number of length-`2k` tuples over `{0, ..., l-1}` in which every symbol
/// occurs an even number of times, from `2^-l sum_s C(l,s) (2s-l)^{2k}`.
pub fn count_even_tuples(k: u32, l: u32) -> Result<u128> {
    check_range(k, l)?;
    let mut sum: u128 = 0;
    for s in 0..=l {
        let base = (2 * s as i64 - l as i64).unsigned_abs() as u128;
        sum += binomial(l, s) * base.pow(2 * k);
    }
    Ok(sum >> l)
}

/// The same count by direct enumeration; feasible while `l^{2k} <= 2^24`.
pub fn count_even_tuples_enumerated(k: u32, l: u32) -> Result<u128> {
    check_range(k, l)?;
    let len = 2 * k;
    let total = (l as u128).pow(len);
    if total > 1 << 24 {
        return Err(Error::TooLarge(total as usize));
    }
    let mut count = 0u128;
    for code in 0..total as u64 {
        let mut parity = 0u32;
        let mut c = code;
        for _ in 0..len {
            parity ^= 1 << (c % l as u64);
            c /= l as u64;
        }
        if parity == 0 {
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Clone, Debug, Serialize)]
pub struct KhintchineRow {
    pub k: u32,
    pub l: u32,
    pub count: u128,
    pub enumerated: Option<u128>,
    pub bound: u128,
    pub pass: bool,
}

/// Counts against `(2k-1)!! l^k` on the grid `1..=k_max` × `1..=l_max`,
/// cross-checked by enumeration wherever feasible.
pub fn check_khintchine_bound(k_max: u32, l_max: u32) -> Result<Vec<KhintchineRow>> {
    let mut rows = Vec::new();
    for k in 1..=k_max {
        for l in 1..=l_max {
            let count = count_even_tuples(k, l)?;
            let enumerated = count_even_tuples_enumerated(k, l).ok();
            let bound = double_factorial(2 * k as i64 - 1) * (l as u128).pow(k);
            let pass = count <= bound && enumerated.map_or(true, |e| e == count);
            rows.push(KhintchineRow { k, l, count, enumerated, bound, pass });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        for k in 1..=6 {
            assert_eq!(count_even_tuples(k, 1).unwrap(), 1);
        }
        assert_eq!(count_even_tuples(1, 2).unwrap(), 2);
        assert_eq!(count_even_tuples(2, 2).unwrap(), 8);
        assert!(count_even_tuples(0, 2).is_err());
        assert!(count_even_tuples(2, 9).is_err());
    }

    #[test]
    fn doubled_singletons_at_k1() {
        for l in 1..=8 {
            assert_eq!(count_even_tuples(1, l).unwrap(), l as u128);
        }
    }

    #[test]
    fn identity_matches_enumeration() {
        for k in 1..=6 {
            for l in 1..=8 {
                if let Ok(e) = count_even_tuples_enumerated(k, l) {
                    assert_eq!(e, count_even_tuples(k, l).unwrap(), "k={k} l={l}");
                }
            }
        }
    }

    #[test]
    fn grid_passes() {
        let rows = check_khintchine_bound(6, 8).unwrap();
        assert!(rows.iter().all(|r| r.pass));
        assert_eq!(double_factorial(-1), 1);
        assert_eq!(double_factorial(11), 10395);
    }
}
