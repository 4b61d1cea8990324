//! Counter-style random streams.
//!
//! Every random draw in the crate comes from a generator keyed by
//! `(seed, purpose, index)`, so the value for a given bin or voxel does not
//! depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags separating independent uses of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Counts = 1,
    Thinning = 2,
    Phantom = 3,
    StartNoise = 4,
    StepNoise = 5,
    Training = 6,
    Init = 7,
    Probe = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, purpose, index)` triple.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(purpose as u64)) ^ splitmix(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Derives a child seed, e.g. one per phantom of a data set.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix(splitmix(seed ^ (purpose as u64).rotate_left(32)) ^ index)
}

/// `n` standard normal draws from one stream.
pub fn normal_vec(seed: u64, purpose: Purpose, index: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, purpose, index);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
