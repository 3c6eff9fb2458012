//! Deterministic randomness.
//!
//! Two kinds of streams live here:
//!
//! * A counter-based normal generator used for projection matrices. Its output
//!   is part of the wire contract: every client must regenerate the exact same
//!   matrix from a shared seed, so the construction is fixed and documented
//!   below and must not change.
//! * Seed derivation for everything else (initialisation, shuffling, noise,
//!   Monte Carlo). Those streams feed a ChaCha8 generator.
//!
//! # Normative projection stream
//!
//! ```text
//! mix64(x):                      SplitMix64 finaliser
//!     x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//!     x = (x ^ (x >> 27)) * 0x94D049BB133111EB
//!     x ^ (x >> 31)
//!
//! row_key(seed, row) = mix64(seed ^ mix64(row ^ 0x5EED0FA11C0FFEE0))
//! word(seed, row, k) = mix64(row_key + (k + 1) * 0x9E3779B97F4A7C15)   (wrapping)
//!
//! entry pair j (columns 2j, 2j+1) uses words 2j and 2j+1:
//!     u1 = ((word(2j)   >> 11) + 1) * 2^-53          in (0, 1]
//!     u2 =  (word(2j+1) >> 11)      * 2^-53          in [0, 1)
//!     r  = sqrt(-2 ln u1)
//!     e(2j)   = r cos(2 pi u2)
//!     e(2j+1) = r sin(2 pi u2)
//! ```
//!
//! `ln`, `cos` and `sin` come from the `libm` port so results do not depend on
//! the platform C library. Entries are standard normal; callers scale them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const ROW_DOMAIN: u64 = 0x5EED_0FA1_1C0F_FEE0;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[inline]
fn row_key(seed: u64, row: u64) -> u64 {
    mix64(seed ^ mix64(row ^ ROW_DOMAIN))
}

/// The k-th 64-bit word of the stream keyed by `(seed, row)`.
#[inline]
pub fn stream_word(seed: u64, row: u64, k: u64) -> u64 {
    mix64(row_key(seed, row).wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

#[inline]
fn box_muller(w1: u64, w2: u64) -> (f64, f64) {
    let u1 = ((w1 >> 11) + 1) as f64 * TWO_POW_NEG_53;
    let u2 = (w2 >> 11) as f64 * TWO_POW_NEG_53;
    let r = libm::sqrt(-2.0 * libm::log(u1));
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * libm::cos(theta), r * libm::sin(theta))
}

/// Fills `out` with standard normal entries of row `row` of the stream keyed
/// by `seed`, multiplied by `scale`.
pub fn fill_normal_row(seed: u64, row: u64, scale: f64, out: &mut [f64]) {
    let key = row_key(seed, row);
    let word = |k: u64| mix64(key.wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
    let mut chunks = out.chunks_exact_mut(2);
    let mut j = 0u64;
    for pair in &mut chunks {
        let (a, b) = box_muller(word(2 * j), word(2 * j + 1));
        pair[0] = a * scale;
        pair[1] = b * scale;
        j += 1;
    }
    if let [last] = chunks.into_remainder() {
        let (a, _) = box_muller(word(2 * j), word(2 * j + 1));
        *last = a * scale;
    }
}

/// Purposes for derived seeds. Each purpose gets an independent stream so that
/// adding a consumer never shifts another one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    Partition = 2,
    Batching = 3,
    RoundSeed = 4,
    DpNoise = 5,
    SealNonce = 6,
    Synthetic = 7,
    MonteCarlo = 8,
    Attack = 9,
    KeyGen = 10,
    Split = 11,
}

/// One-way derivation `master -> (purpose, indices...) -> subseed`.
pub fn derive_seed(master: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut acc = mix64(master ^ mix64(purpose as u64 ^ 0xA5A5_5A5A_DEAD_BEEF));
    for &i in indices {
        acc = mix64(acc.wrapping_add(GOLDEN_GAMMA) ^ mix64(i.wrapping_add(GOLDEN_GAMMA)));
    }
    acc
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
