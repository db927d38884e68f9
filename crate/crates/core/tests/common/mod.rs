//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use qsde::prng::PcgStream;

/// Standard normal CDF from `erfc`, accurate in the lower tail.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of `norm_cdf` by bisection, using symmetry so the tail being
/// inverted is always the lower one.
pub fn norm_quantile_bisect(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    if p > 0.5 {
        return -norm_quantile_bisect(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// 1000 probabilities: a uniform interior grid plus log-spaced points in both tails.
pub fn probe_points() -> Vec<f64> {
    let mut ps: Vec<f64> = (0..900).map(|k| (k as f64 + 0.5) / 900.0).collect();
    for k in 0..50 {
        let p = 10f64.powf(-1.0 - 14.0 * k as f64 / 49.0);
        ps.push(p);
        ps.push(1.0 - p);
    }
    ps
}

/// Largest `|inv_norm_cdf(p) - oracle(p)|` over the probe points.
pub fn worst_quantile_error() -> f64 {
    probe_points()
        .into_iter()
        .map(|p| (qsde::prng::inv_norm_cdf(p) - norm_quantile_bisect(p)).abs())
        .fold(0.0, f64::max)
}

/// Kolmogorov-Smirnov statistic of `n` consecutive normals against `norm_cdf`.
pub fn ks_statistic(stream: &PcgStream, n: usize) -> f64 {
    let mut cur = stream.cursor(1);
    let mut xs: Vec<f64> = (0..n).map(|_| cur.next_normal()).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = norm_cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_62 / (n as f64).sqrt()
}

/// 50 pseudo-random `(a, b)` pairs with `a < 2^40` and `b < 5000`.
pub fn jump_pairs() -> Vec<(u64, u64)> {
    let src = PcgStream::new(0x5eed, 99);
    (1..=50u64)
        .map(|i| ((src.uniform(2 * i - 1) * (1u64 << 40) as f64) as u64, (src.uniform(2 * i) * 5000.0) as u64))
        .collect()
}

/// Whether jumping to `a + b` equals jumping to `a` then stepping `b` times.
pub fn jump_consistent(stream: &PcgStream, a: u64, b: u64) -> bool {
    let mut s = stream.jump_to(a);
    for _ in 0..b {
        s = stream.step(s);
    }
    s == stream.jump_to(a + b)
}
