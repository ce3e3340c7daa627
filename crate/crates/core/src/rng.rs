//! Seeded randomness. Every stream is derived from a run seed and a name, so
//! adding a consumer never shifts the draws seen by another.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the named substream of `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Seed of the `index`-th child of `seed`.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(seed, name))
}

pub fn indexed(seed: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(indexed_seed(seed, index))
}

pub fn normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R) -> F {
    let v: f64 = rng.sample(StandardNormal);
    F::lit(v)
}

/// Array of i.i.d. standard normal draws.
pub fn randn<F: Scalar, Sh, D, R>(shape: Sh, rng: &mut R) -> Array<F, D>
where
    Sh: ShapeBuilder<Dim = D>,
    D: Dimension,
    R: Rng + ?Sized,
{
    Array::from_shape_simple_fn(shape, || normal(rng))
}
