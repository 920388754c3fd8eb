//! Reproducible random substreams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream that is
//! addressed by `(seed, domain, index)`. A path, an inner path or a uniform
//! sample therefore always sees the same numbers no matter which worker
//! evaluates it or in which order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Role tags that separate independent families of streams under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Path = 1,
    Companion = 2,
    Inner = 3,
    Uniform = 4,
    Screening = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `index` inside the family `(domain, family)`.
///
/// `family` lets nested simulations (e.g. inner paths of outer path `i`)
/// carve out their own key space.
pub fn substream(seed: u64, domain: Domain, family: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed ^ (domain as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    state = splitmix64(state ^ splitmix64(family));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[inline]
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw strictly inside `(guard, 1 - guard)`; draws closer to the
/// boundary are rejected and redrawn.
#[inline]
pub fn open_uniform(rng: &mut ChaCha8Rng, guard: f64) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > guard && u < 1.0 - guard {
            return u;
        }
    }
}
