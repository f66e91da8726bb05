//! Small numeric helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Serializable snapshot of a ChaCha stream (seed plus stream position).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> RngSnapshot {
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Linear-interpolation percentile over `values` (the numpy "linear" method).
///
/// `q` is in percent. With `n` sorted values the rank is `q/100 * (n-1)`;
/// the result interpolates between the two bracketing order statistics.
/// Uses partial selection rather than a full sort. Panics on an empty slice;
/// callers validate first.
pub fn linear_percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = (rank.floor() as usize).min(n - 1);
    let frac = rank - lo as f64;

    let mut buf: Vec<f64> = values.to_vec();
    let (_, lo_v, upper) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_v = *lo_v;
    if frac == 0.0 || lo + 1 >= n {
        return lo_v;
    }
    let hi_v = upper
        .iter()
        .copied()
        .min_by(f64::total_cmp)
        .expect("upper partition nonempty");
    lo_v + frac * (hi_v - lo_v)
}

/// Same as [`linear_percentile`] but assumes `sorted` is already ascending.
pub fn percentile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// FNV-1a over the little-endian bytes of an `f64` slice.
///
/// Used for determinism checks and checkpoint integrity; it is a content
/// fingerprint, not a cryptographic hash.
pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// FNV-1a over raw bytes.
pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in bytes {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
