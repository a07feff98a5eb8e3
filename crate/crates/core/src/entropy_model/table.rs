//! Integer CDF tables: the symbol-probability contract shared by every entropy coder.
//!
//! A table covers `alphabet_size` consecutive indices; index `i` stands for the
//! integer value `offset + i`. `cumulative` has `alphabet_size + 1` strictly
//! increasing entries from 0 to exactly [`TOTAL`].
//!
//! Latent tables reserve their last index as an escape: values outside the window
//! `[offset, offset + alphabet_size - 2]` are sent as the escape index followed by an
//! Elias-gamma coded excess and a sign, each as a fair binary symbol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

/// Largest half-width of a latent window; values beyond go through the escape path.
pub const MAX_HALF_WIDTH: i32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CdfTable {
    pub offset: i32,
    pub cumulative: Vec<u32>,
}

impl CdfTable {
    pub fn new(offset: i32, cumulative: Vec<u32>) -> Result<Self> {
        let t = Self { offset, cumulative };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cumulative;
        if c.len() < 2 {
            return Err(Error::invalid("cdf table needs at least one symbol"));
        }
        if c[0] != 0 || *c.last().unwrap() != TOTAL {
            return Err(Error::invalid(format!(
                "cdf table must run from 0 to {TOTAL}"
            )));
        }
        if c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("cdf table is not strictly increasing"));
        }
        Ok(())
    }

    /// Quantizes a probability vector to integer frequencies summing to [`TOTAL`].
    ///
    /// Every symbol keeps a frequency of at least one; the remaining mass is split
    /// proportionally with largest-remainder rounding (ties to the lower index).
    pub fn from_pmf(pmf: &[f64], offset: i32) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n as u32 > TOTAL / 2 {
            return Err(Error::invalid(format!("unsupported alphabet size {n}")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(
                "pmf entries must be finite and non-negative",
            ));
        }
        let sum: f64 = pmf.iter().sum();
        let spare = (TOTAL - n as u32) as f64;
        let (scaled, sum) = if sum > 0.0 {
            (pmf.iter().map(|p| p / sum * spare).collect::<Vec<_>>(), sum)
        } else {
            (vec![spare / n as f64; n], 1.0)
        };
        debug_assert!(sum > 0.0);
        let mut freq: Vec<u32> = scaled.iter().map(|s| 1 + s.floor() as u32).collect();
        let assigned: u32 = freq.iter().sum();
        let mut remainder = TOTAL - assigned;
        if remainder > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let fa = scaled[a] - scaled[a].floor();
                let fb = scaled[b] - scaled[b].floor();
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &i in order.iter().cycle() {
                if remainder == 0 {
                    break;
                }
                freq[i] += 1;
                remainder -= 1;
            }
        }
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cumulative.push(acc);
        }
        Self::new(offset, cumulative)
    }

    pub fn uniform(alphabet_size: usize) -> Result<Self> {
        Self::from_pmf(&vec![1.0; alphabet_size], 0)
    }

    /// Two equiprobable symbols: exactly one bit each.
    pub fn binary() -> Self {
        Self {
            offset: 0,
            cumulative: vec![0, TOTAL / 2, TOTAL],
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.cumulative[index + 1] - self.cumulative[index]
    }

    pub fn start(&self, index: usize) -> u32 {
        self.cumulative[index]
    }

    /// Index whose interval contains `target` (`target < TOTAL`).
    pub fn find(&self, target: u32) -> usize {
        debug_assert!(target < TOTAL);
        self.cumulative.partition_point(|&c| c <= target) - 1
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.frequency(index) as f64 / TOTAL as f64
    }

    /// Ideal code length of one index in bits.
    pub fn codelength(&self, index: usize) -> f64 {
        PRECISION_BITS as f64 - (self.frequency(index) as f64).log2()
    }

    /// Flat `[offset, alphabet_size, c0, c1, ...]` form for array-only boundaries.
    pub fn to_flat(&self) -> Vec<i64> {
        let mut v = Vec::with_capacity(self.cumulative.len() + 2);
        v.push(self.offset as i64);
        v.push(self.alphabet_size() as i64);
        v.extend(self.cumulative.iter().map(|&c| c as i64));
        v
    }

    pub fn from_flat(flat: &[i64]) -> Result<Self> {
        if flat.len() < 2 {
            return Err(Error::invalid("flat table too short"));
        }
        let n = flat[1] as usize;
        if flat.len() != n + 3 {
            return Err(Error::invalid(
                "flat table length does not match alphabet size",
            ));
        }
        let cumulative = flat[2..]
            .iter()
            .map(|&c| u32::try_from(c).map_err(|_| Error::invalid("negative cumulative count")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(flat[0] as i32, cumulative)
    }
}

/// Where a value lands in an escape-terminated table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coded {
    Index(usize),
    /// Escape index, then `excess >= 1` in Elias gamma, then the sign bit.
    Escape {
        excess: u32,
        negative: bool,
    },
}

/// Helpers for tables whose last index is the escape symbol.
pub trait EscapeTable {
    fn escape_index(&self) -> usize;
    fn window(&self) -> (i32, i32);
    fn classify(&self, value: i32) -> Coded;
    fn value_of(&self, index: usize) -> i32;
    /// Exact bits the coder spends on `value`, escape path included.
    fn value_codelength(&self, value: i32) -> f64;
}

impl EscapeTable for CdfTable {
    fn escape_index(&self) -> usize {
        self.alphabet_size() - 1
    }

    fn window(&self) -> (i32, i32) {
        (self.offset, self.offset + self.alphabet_size() as i32 - 2)
    }

    fn classify(&self, value: i32) -> Coded {
        let (lo, hi) = self.window();
        if value > hi {
            Coded::Escape {
                excess: (value as i64 - hi as i64) as u32,
                negative: false,
            }
        } else if value < lo {
            Coded::Escape {
                excess: (lo as i64 - value as i64) as u32,
                negative: true,
            }
        } else {
            Coded::Index((value - lo) as usize)
        }
    }

    fn value_of(&self, index: usize) -> i32 {
        self.offset + index as i32
    }

    fn value_codelength(&self, value: i32) -> f64 {
        match self.classify(value) {
            Coded::Index(i) => self.codelength(i),
            Coded::Escape { excess, .. } => {
                self.codelength(self.escape_index()) + elias_gamma_len(excess) as f64 + 1.0
            }
        }
    }
}

/// Bits in the Elias-gamma code of `n >= 1`.
pub fn elias_gamma_len(n: u32) -> u32 {
    debug_assert!(n >= 1);
    2 * (31 - n.leading_zeros()) + 1
}

/// Elias-gamma bits of `n >= 1`, most significant first.
pub fn elias_gamma_bits(n: u32) -> Vec<bool> {
    let width = 32 - n.leading_zeros();
    let mut bits = vec![false; (width - 1) as usize];
    bits.extend((0..width).rev().map(|b| (n >> b) & 1 == 1));
    bits
}

/// Half-width of the symbol window for a Gaussian of scale `sigma` (in bins).
pub fn gaussian_half_width(sigma: f64) -> i32 {
    let hw = (6.0 * sigma).ceil() + 1.0;
    if hw.is_finite() {
        (hw as i32).clamp(1, MAX_HALF_WIDTH)
    } else {
        MAX_HALF_WIDTH
    }
}

/// Mass of the unit bin centred `k` bins away from the mean of `N(0, sigma^2)`.
pub fn gaussian_bin_mass(k: i32, sigma: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 * sigma;
    let a = k.unsigned_abs() as f64;
    if a == 0.0 {
        libm::erf(0.5 / s)
    } else {
        0.5 * (libm::erfc((a - 0.5) / s) - libm::erfc((a + 0.5) / s))
    }
}

/// Escape-terminated table for mean-centred symbols under `N(0, sigma^2)`.
pub fn gaussian_table(sigma: f64) -> Result<CdfTable> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian scale must be positive, got {sigma}"
        )));
    }
    let hw = gaussian_half_width(sigma);
    let mut pmf: Vec<f64> = (-hw..=hw).map(|k| gaussian_bin_mass(k, sigma)).collect();
    pmf.push(libm::erfc(
        (hw as f64 + 0.5) / (std::f64::consts::SQRT_2 * sigma),
    ));
    CdfTable::from_pmf(&pmf, -hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_pmf_sums_to_total_and_keeps_every_symbol() {
        let t = CdfTable::from_pmf(&[0.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(t.frequency(0), 1);
        assert_eq!(t.frequency(2), 1);
        assert_eq!(t.frequency(1), TOTAL - 2);
        let u = CdfTable::uniform(8).unwrap();
        assert!((0..8).all(|i| u.frequency(i) == TOTAL / 8));
    }

    #[test]
    fn validate_rejects_bad_tables() {
        assert!(CdfTable::new(0, vec![0, 10, 10, TOTAL]).is_err());
        assert!(CdfTable::new(0, vec![0, 10]).is_err());
        assert!(CdfTable::new(0, vec![1, TOTAL]).is_err());
        assert!(CdfTable::new(0, vec![0, TOTAL]).is_ok());
    }

    #[test]
    fn gaussian_unit_scale_center_mass() {
        // Phi(0.5) - Phi(-0.5)
        let m = gaussian_bin_mass(0, 1.0);
        assert!((m - 0.382_924_922_548_026).abs() < 1e-12);
        assert!((gaussian_bin_mass(3, 1.0) - gaussian_bin_mass(-3, 1.0)).abs() == 0.0);
    }

    #[test]
    fn gamma_codes() {
        assert_eq!(elias_gamma_bits(1), vec![true]);
        assert_eq!(elias_gamma_bits(5), vec![false, false, true, false, true]);
        for n in 1..200 {
            assert_eq!(elias_gamma_bits(n).len() as u32, elias_gamma_len(n));
        }
    }

    #[test]
    fn escape_classification() {
        let t = gaussian_table(1.0).unwrap();
        let (lo, hi) = t.window();
        assert_eq!((lo, hi), (-7, 7));
        assert_eq!(t.classify(0), Coded::Index(7));
        assert_eq!(
            t.classify(hi + 3),
            Coded::Escape {
                excess: 3,
                negative: false
            }
        );
        assert_eq!(
            t.classify(lo - 1),
            Coded::Escape {
                excess: 1,
                negative: true
            }
        );
        let esc = t.codelength(t.escape_index());
        assert!((t.value_codelength(hi + 3) - (esc + 3.0 + 1.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantized_tables_are_valid(pmf in prop::collection::vec(0.0f64..1.0, 1..300)) {
            let t = CdfTable::from_pmf(&pmf, -3).unwrap();
            prop_assert_eq!(t.alphabet_size(), pmf.len());
            prop_assert!(t.validate().is_ok());
            let flat = t.to_flat();
            prop_assert_eq!(CdfTable::from_flat(&flat).unwrap(), t);
        }

        #[test]
        fn find_inverts_start(pmf in prop::collection::vec(0.01f64..1.0, 1..50), frac in 0.0f64..1.0) {
            let t = CdfTable::from_pmf(&pmf, 0).unwrap();
            let target = ((frac * TOTAL as f64) as u32).min(TOTAL - 1);
            let i = t.find(target);
            prop_assert!(t.start(i) <= target && target < t.start(i) + t.frequency(i));
        }
    }
}
