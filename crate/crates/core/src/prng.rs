//! PCG-style generator with O(log i) random access, the normal transform,
//! and clipping of normal samples.
//!
//! Element `i` (1-based) of a stream is built from raw outputs `2i-1` and `2i`,
//! so any element can be reached by one jump.

use serde::{Deserialize, Serialize};

const MULT: u64 = 6364136223846793005;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcgStream {
    pub seed: u64,
    pub stream_id: u64,
    increment: u64,
    initial: u64,
}

impl PcgStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let increment = (stream_id << 1) | 1;
        let mut state: u64 = 0;
        state = state.wrapping_mul(MULT).wrapping_add(increment);
        state = state.wrapping_add(seed);
        state = state.wrapping_mul(MULT).wrapping_add(increment);
        PcgStream { seed, stream_id, increment, initial: state }
    }

    pub fn multiplier(&self) -> u64 {
        MULT
    }

    pub fn increment(&self) -> u64 {
        self.increment
    }

    /// Internal state after `i` advances from the initial state.
    pub fn jump_to(&self, i: u64) -> u64 {
        advance(self.initial, i, MULT, self.increment)
    }

    /// One LCG advance.
    #[inline]
    pub fn step(&self, state: u64) -> u64 {
        state.wrapping_mul(MULT).wrapping_add(self.increment)
    }

    /// Uniform in (0, 1) at element `i >= 1`.
    pub fn uniform(&self, i: u64) -> f64 {
        assert!(i >= 1, "elements are 1-based");
        let s = self.jump_to(2 * (i - 1));
        uniform_from(s, self.step(s))
    }

    /// Standard normal at element `i >= 1`.
    pub fn std_normal(&self, i: u64) -> f64 {
        inv_norm_cdf(self.uniform(i))
    }

    /// Sequential reader positioned at element `i >= 1`.
    pub fn cursor(&self, i: u64) -> NormalCursor {
        assert!(i >= 1, "elements are 1-based");
        NormalCursor { stream: *self, state: self.jump_to(2 * (i - 1)) }
    }

    /// Entries `z_{(i-1) r w + n w + k}`, `k = 1..=w`, for sample `i >= 1` and 0-based step `n`.
    pub fn noise_vector(&self, i: u64, n: u64, w: usize, r: u64) -> Vec<f64> {
        assert!(i >= 1 && n < r, "sample index is 1-based and step must be below r");
        let start = (i - 1) * r * w as u64 + n * w as u64 + 1;
        let mut cur = self.cursor(start);
        (0..w).map(|_| cur.next_normal()).collect()
    }
}

/// Sequential access to consecutive elements of a stream.
#[derive(Clone, Debug)]
pub struct NormalCursor {
    stream: PcgStream,
    state: u64,
}

impl NormalCursor {
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let a = self.state;
        let b = self.stream.step(a);
        self.state = self.stream.step(b);
        uniform_from(a, b)
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        inv_norm_cdf(self.next_uniform())
    }
}

#[inline]
fn output(state: u64) -> u32 {
    let xorshifted = (((state >> 18) ^ state) >> 27) as u32;
    let rot = (state >> 59) as u32;
    xorshifted.rotate_right(rot)
}

#[inline]
fn uniform_from(s1: u64, s2: u64) -> f64 {
    let hi = output(s1) as u64;
    let lo = output(s2) as u64;
    let bits = (hi << 21) | (lo >> 11);
    if bits == 0 {
        TWO_POW_M53
    } else {
        bits as f64 * TWO_POW_M53
    }
}

/// Apply the affine map `s -> a s + c` `delta` times by repeated squaring.
fn advance(state: u64, mut delta: u64, mut a: u64, mut c: u64) -> u64 {
    let mut acc_mult: u64 = 1;
    let mut acc_plus: u64 = 0;
    while delta > 0 {
        if delta & 1 == 1 {
            acc_mult = acc_mult.wrapping_mul(a);
            acc_plus = acc_plus.wrapping_mul(a).wrapping_add(c);
        }
        c = a.wrapping_add(1).wrapping_mul(c);
        a = a.wrapping_mul(a);
        delta >>= 1;
    }
    acc_mult.wrapping_mul(state).wrapping_add(acc_plus)
}

/// Inverse standard normal CDF by Wichura's AS241 rational approximations,
/// accurate to about 1e-16 relative.
pub fn inv_norm_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        let r = r - 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Horner evaluation with coefficients in increasing degree.
#[inline]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const AS241_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.043_131_013_652_478_5e-15,
];

/// Truncation level for normal samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipBound {
    pub u_sn: f64,
}

impl ClipBound {
    /// No effective clipping.
    pub fn none() -> Self {
        ClipBound { u_sn: f64::INFINITY }
    }
}

#[inline]
pub fn clip(z: f64, b: ClipBound) -> f64 {
    z.min(b.u_sn).max(-b.u_sn)
}

/// `max{sqrt(2 ln(2 r w N_s / (sqrt(2 pi) delta))), 1}`.
pub fn choose_usn(r: u64, width: usize, n_s: u64, delta: f64) -> ClipBound {
    assert!(r > 0 && width > 0 && n_s > 0 && delta > 0.0 && delta < 1.0);
    let arg = 2.0 * r as f64 * width as f64 * n_s as f64
        / ((2.0 * std::f64::consts::PI).sqrt() * delta);
    let inner = 2.0 * arg.ln();
    let u = if inner > 1.0 { inner.sqrt() } else { 1.0 };
    ClipBound { u_sn: u }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jump_zero_is_initial() {
        let s = PcgStream::new(42, 7);
        assert_eq!(s.jump_to(0), s.initial);
    }

    #[test]
    fn jump_matches_sequential() {
        let s = PcgStream::new(42, 7);
        let mut st = s.jump_to(0);
        for _ in 0..10 {
            st = s.step(st);
        }
        assert_eq!(s.jump_to(10), st);
        let big = 1u64 << 40;
        assert_eq!(s.step(s.jump_to(big)), s.jump_to(big + 1));
    }

    #[test]
    fn elements_are_pure() {
        let a = PcgStream::new(1, 2);
        let b = PcgStream::new(1, 2);
        assert_eq!(a.std_normal(12345).to_bits(), b.std_normal(12345).to_bits());
        assert_ne!(a.std_normal(1), PcgStream::new(1, 3).std_normal(1));
    }

    #[test]
    fn normal_at_median_and_quantile() {
        assert_eq!(inv_norm_cdf(0.5), 0.0);
        let q = inv_norm_cdf(0.975);
        assert!((q - 1.959963984540054).abs() < 1e-12, "{q:.17}");
        assert!((inv_norm_cdf(0.025) + 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn noise_vector_indexing() {
        let s = PcgStream::new(3, 0);
        assert_eq!(s.noise_vector(1, 0, 2, 5), vec![s.std_normal(1), s.std_normal(2)]);
        assert_eq!(s.noise_vector(1, 1, 2, 5), vec![s.std_normal(3), s.std_normal(4)]);
        assert_eq!(s.noise_vector(2, 0, 2, 3), vec![s.std_normal(7), s.std_normal(8)]);
    }

    #[test]
    fn cursor_matches_random_access() {
        let s = PcgStream::new(99, 5);
        let mut c = s.cursor(17);
        for i in 17..40 {
            assert_eq!(c.next_normal().to_bits(), s.std_normal(i).to_bits());
        }
    }

    #[test]
    fn sample_moments() {
        let s = PcgStream::new(2024, 1);
        let mut c = s.cursor(1);
        let n = 1_000_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let z = c.next_normal();
            m1 += z;
            m2 += z * z;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(0.3, ClipBound { u_sn: 2.0 }), 0.3);
        assert_eq!(clip(3.5, ClipBound { u_sn: 2.0 }), 2.0);
        assert_eq!(clip(-9.0, ClipBound { u_sn: 1.0 }), -1.0);
    }

    #[test]
    fn usn_examples() {
        assert_eq!(choose_usn(1, 1, 1, 0.99).u_sn, 1.0);
        let want = (2.0 * (8000.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.01)).ln()).sqrt();
        assert!((choose_usn(10, 4, 100, 0.01).u_sn - want).abs() < 1e-14);
    }

    #[test]
    fn clip_tail_frequency() {
        let b = ClipBound { u_sn: 2.5 };
        let s = PcgStream::new(8, 8);
        let mut c = s.cursor(1);
        let n = 200_000;
        let hits = (0..n).filter(|_| c.next_normal().abs() > b.u_sn).count() as f64 / n as f64;
        let bound = 2.0 / (2.0 * std::f64::consts::PI).sqrt() * (-b.u_sn * b.u_sn / 2.0).exp();
        let se = (bound / n as f64).sqrt();
        assert!(hits <= bound + 3.0 * se, "{hits} vs {bound}");
    }

    proptest! {
        #[test]
        fn jump_composes(a in 0u64..(1 << 50), b in 0u64..2000) {
            let s = PcgStream::new(5, 9);
            let mut st = s.jump_to(a);
            for _ in 0..b {
                st = s.step(st);
            }
            prop_assert_eq!(st, s.jump_to(a + b));
        }

        #[test]
        fn usn_monotone_in_samples(ns in 1u64..1_000_000, extra in 0u64..1000) {
            prop_assert!(choose_usn(8, 4, ns + extra, 0.1).u_sn >= choose_usn(8, 4, ns, 0.1).u_sn);
        }
    }
}
