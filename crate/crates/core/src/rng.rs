//! Seed policy: one master seed fans out into independent, reproducible
//! streams for each phase of a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// Phases that draw randomness. The discriminant is the fixed offset mixed
/// into the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Pretrain = 1,
    Svi = 2,
    Eval = 3,
    DataSynth = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of `stream` derived from `master`.
pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(master) ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream_rng(master: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(stream_seed(master, stream))
}

/// Generator for the `index`-th evaluation weight sample. Independent of how
/// samples are scheduled across threads.
pub fn sample_rng(eval_seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(eval_seed);
    rng.set_stream(index + 1);
    rng
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}
