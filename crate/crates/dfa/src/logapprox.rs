//! Lookup-table approximation of v, v² and v³ in the log domain.
//!
//! The data plane cannot multiply 32-bit values, so moment sums are
//! maintained through two small tables: a log table mapping the top
//! mantissa bits of the input to a fixed-point log2, and an exp table
//! mapping a fixed-point log2 back to an integer. Raising to the k-th
//! power is a multiply of the fixed-point log by k between the two
//! lookups. Both tables are pure functions of the fractional-bit count
//! and are built once at startup.

use thiserror::Error;

/// Default fixed-point fractional bits.
pub const DEFAULT_FRAC_BITS: u32 = 8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LogTableConfig {
    /// Fractional bits `f` of the fixed-point log2 representation,
    /// 1..=16. Tables have 2^f entries each.
    pub frac_bits: u32,
}

impl Default for LogTableConfig {
    fn default() -> Self {
        Self { frac_bits: DEFAULT_FRAC_BITS }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogTableError {
    #[error("frac_bits must be in 1..=16, got {0}")]
    FracBitsOutOfRange(u32),
}

/// Precomputed log/exp tables for one fractional-bit setting.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LogTables {
    frac_bits: u32,
    /// `log_table[i] = round(log2(1 + i/2^f) * 2^f)`, 2^f entries.
    log_table: Vec<u32>,
    /// `exp_table[i] = round(2^(i/2^f) * 2^32)`, 2^f entries; the
    /// mantissa of the result before the exponent shift.
    exp_table: Vec<u64>,
}

impl LogTables {
    pub fn new(cfg: LogTableConfig) -> Result<Self, LogTableError> {
        let f = cfg.frac_bits;
        if !(1..=16).contains(&f) {
            return Err(LogTableError::FracBitsOutOfRange(f));
        }
        let n = 1usize << f;
        let scale = (1u64 << f) as f64;
        let log_table = (0..n)
            .map(|i| ((1.0 + i as f64 / scale).log2() * scale).round() as u32)
            .collect();
        let exp_table = (0..n)
            .map(|i| ((i as f64 / scale).exp2() * 4_294_967_296.0).round() as u64)
            .collect();
        Ok(Self { frac_bits: f, log_table, exp_table })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Fixed-point log2 of `v >= 1`: integer part is the index of the
    /// most significant set bit, fractional part is the top `f`
    /// mantissa bits (rounded to nearest) run through the log table.
    ///
    /// For any v >= 1 the result is within one fixed-point ulp of
    /// `round(log2(v) * 2^f)`.
    pub fn approx_log2(&self, v: u32) -> u32 {
        debug_assert!(v >= 1, "approx_log2 input must be >= 1");
        let f = self.frac_bits;
        let mut exp = 31 - v.leading_zeros();
        let mant = v - (1u32 << exp);
        let mut idx = if exp <= f {
            mant << (f - exp)
        } else {
            let shift = exp - f;
            (mant + (1u32 << (shift - 1))) >> shift
        };
        if idx == 1u32 << f {
            // mantissa rounded up to the next octave
            exp += 1;
            idx = 0;
        }
        (exp << f) + self.log_table[idx as usize]
    }

    /// 2^(q/2^f) rounded to the nearest integer, without reduction to
    /// 32 bits. Exact powers of two in `q` come back exact.
    pub fn approx_exp2_wide(&self, q: u32) -> u128 {
        let f = self.frac_bits;
        let exp = q >> f;
        let mant = self.exp_table[(q & ((1u32 << f) - 1)) as usize] as u128; // 2^32..2^33
        if exp >= 32 {
            mant << (exp - 32)
        } else {
            let shift = 32 - exp;
            (mant + (1u128 << (shift - 1))) >> shift
        }
    }

    /// 2^(q/2^f) rounded to nearest, saturating at 2^32 − 1.
    pub fn approx_exp2(&self, q: u32) -> u32 {
        self.approx_exp2_wide(q).min(u32::MAX as u128) as u32
    }

    /// The unreduced table-path approximation of v^k, k in 1..=3.
    /// Relative error is bounded by `2^((k+1)·2^−f) − 1` (checked
    /// exhaustively in tests for k = 1).
    pub fn approx_pow_wide(&self, v: u32, k: u32) -> u128 {
        debug_assert!((1..=3).contains(&k), "k must be 1..=3");
        if v == 0 {
            return 0;
        }
        self.approx_exp2_wide(k * self.approx_log2(v))
    }

    /// The register addend for v^k: table-path approximation saturated
    /// at 2^32 − 1. Zero inputs contribute zero.
    pub fn approx_pow(&self, v: u32, k: u32) -> u32 {
        self.approx_pow_wide(v, k).min(u32::MAX as u128) as u32
    }
}

/// Exact v^k in arbitrary precision; the test oracle for the
/// approximated path, reduced mod 2^32 when compared against register
/// sums.
pub fn oracle_pow(v: u32, k: u32) -> u128 {
    (v as u128).pow(k)
}

/// How moment-sum addends are produced. `Exact` substitutes the oracle
/// for the table path so end-to-end sums can be checked against
/// brute-force recomputation.
#[derive(Clone, Debug)]
pub enum MomentMode {
    Exact,
    Approx(LogTables),
}

impl MomentMode {
    pub fn approx_default() -> Self {
        MomentMode::Approx(LogTables::new(LogTableConfig::default()).unwrap())
    }

    /// The mod-2^32 addend accumulated into a register sum. Both modes
    /// reduce the unreduced value by truncation so that interval
    /// differences of register sums recover the true interval sum
    /// whenever that sum fits in 32 bits.
    pub fn addend(&self, v: u32, k: u32) -> u32 {
        match self {
            MomentMode::Exact => oracle_pow(v, k) as u32,
            MomentMode::Approx(t) => t.approx_pow_wide(v, k) as u32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables(f: u32) -> LogTables {
        LogTables::new(LogTableConfig { frac_bits: f }).unwrap()
    }

    /// Relative-error bound for the k-th power at f fractional bits.
    fn pow_bound(k: u32, f: u32) -> f64 {
        ((k + 1) as f64 * (-(f as f64)).exp2()).exp2() - 1.0
    }

    #[test]
    fn config_rejects_bad_frac_bits() {
        assert!(LogTables::new(LogTableConfig { frac_bits: 0 }).is_err());
        assert!(LogTables::new(LogTableConfig { frac_bits: 17 }).is_err());
        assert!(LogTables::new(LogTableConfig { frac_bits: 16 }).is_ok());
    }

    #[test]
    fn log2_of_one_is_zero() {
        assert_eq!(tables(8).approx_log2(1), 0);
    }

    #[test]
    fn log2_exact_power_of_two() {
        assert_eq!(tables(8).approx_log2(1024), 10 * 256);
    }

    #[test]
    fn log2_1500_within_one_ulp_of_oracle() {
        let q = tables(8).approx_log2(1500);
        let oracle = (1500f64.log2() * 256.0).round() as i64;
        assert!((q as i64 - oracle).abs() <= 1, "q={q} oracle={oracle}");
    }

    #[test]
    fn exp2_of_zero_is_one() {
        assert_eq!(tables(8).approx_exp2(0), 1);
    }

    #[test]
    fn exp2_exact_power_of_two() {
        assert_eq!(tables(8).approx_exp2(2560), 1024);
    }

    #[test]
    fn exp2_inverts_log2_within_bound() {
        let t = tables(8);
        let w = t.approx_exp2(t.approx_log2(1500));
        let rel = (w as f64 / 1500.0 - 1.0).abs();
        assert!(rel <= pow_bound(1, 8), "w={w} rel={rel}");
    }

    #[test]
    fn exp2_saturates() {
        let t = tables(8);
        assert_eq!(t.approx_exp2(33 * 256), u32::MAX);
        assert_eq!(t.approx_exp2(32 * 256), u32::MAX); // 2^32 just over the edge
    }

    #[test]
    fn pow_zero_input_is_zero() {
        assert_eq!(tables(8).approx_pow(0, 3), 0);
        assert_eq!(tables(8).approx_pow(0, 1), 0);
    }

    #[test]
    fn pow_exact_power_of_two() {
        assert_eq!(tables(8).approx_pow(1024, 2), 1_048_576);
    }

    #[test]
    fn pow_1500_squared_within_bound() {
        let w = tables(8).approx_pow(1500, 2);
        let rel = (w as f64 / 2_250_000.0 - 1.0).abs();
        assert!(rel <= pow_bound(2, 8), "w={w} rel={rel}");
    }

    #[test]
    fn powers_of_two_exact_when_representable() {
        let t = tables(8);
        for k in 1..=3u32 {
            for j in 0..=31u32 {
                if j * k <= 31 {
                    assert_eq!(t.approx_pow(1 << j, k), 1u32 << (j * k), "j={j} k={k}");
                }
            }
        }
    }

    #[test]
    fn oracle_pow_examples() {
        assert_eq!(oracle_pow(400, 3), 64_000_000);
        assert_eq!(oracle_pow(0, 1), 0);
        assert_eq!(oracle_pow(65536, 2), 4_294_967_296);
        assert_eq!(oracle_pow(65536, 2) as u32, 0); // mod 2^32
    }

    #[test]
    fn tables_deterministic() {
        assert_eq!(tables(8), tables(8));
        assert_eq!(tables(11), tables(11));
    }

    #[test]
    fn pow_monotone_in_v() {
        let t = tables(8);
        for k in 1..=3u32 {
            let mut prev = 0u32;
            for v in 1..=4096u32 {
                let w = t.approx_pow(v, k);
                assert!(w >= prev, "k={k} v={v}: {w} < {prev}");
                prev = w;
            }
            // spot-check adjacent pairs across the full range, incl. saturation
            let mut v = 1u64;
            while v < u32::MAX as u64 {
                let a = t.approx_pow(v as u32, k);
                let b = t.approx_pow((v + 1) as u32, k);
                assert!(b >= a, "k={k} v={v}");
                v = v * 31 / 16 + 3;
            }
        }
    }

    #[test]
    fn pow_relative_error_exhaustive_k1() {
        let t = tables(8);
        let bound = pow_bound(1, 8);
        for v in 1u32..=(1 << 20) {
            let w = t.approx_pow_wide(v, 1);
            let rel = (w as f64 / v as f64 - 1.0).abs();
            assert!(rel <= bound, "v={v} w={w} rel={rel:e} bound={bound:e}");
        }
    }

    #[test]
    fn pow_relative_error_sampled_k2_k3() {
        use rand::{Rng, SeedableRng};
        let t = tables(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x10a9);
        for k in 2..=3u32 {
            let bound = pow_bound(k, 8);
            for _ in 0..50_000 {
                let v = rng.random_range(1u32..=1 << 20);
                let w = t.approx_pow_wide(v, k);
                let exact = oracle_pow(v, k);
                let rel = (w as f64 / exact as f64 - 1.0).abs();
                assert!(rel <= bound, "k={k} v={v} w={w} exact={exact} rel={rel:e}");
            }
        }
    }
}
