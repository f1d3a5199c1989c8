//! Keyed random substreams.
//!
//! Every draw in the crate comes from a ChaCha8 generator keyed by
//! `(seed, replication, stream)`: the seed selects the key and the
//! `(replication, stream)` pair selects the 64-bit ChaCha stream id. Two
//! substreams never overlap, so results do not depend on which thread
//! consumes which replication.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Bits of the stream id reserved for the per-replication stream tag.
const STREAM_BITS: u32 = 16;

/// Named substreams within one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Stream {
    Characteristics = 1,
    LoadingNoise = 2,
    Factors = 3,
    Noise = 4,
    Outcome = 5,
    Treatment = 6,
    Initial = 7,
    History = 8,
    Alternative = 9,
    Bootstrap = 10,
    /// Free-form streams for callers; the payload is added to this base.
    User = 0x100,
}

pub fn substream(seed: u64, replication: u64, stream: u16) -> ChaCha8Rng {
    assert!(replication < (1u64 << (64 - STREAM_BITS)), "replication index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replication << STREAM_BITS) | u64::from(stream));
    rng
}

pub fn stream_rng(seed: u64, replication: u64, stream: Stream) -> ChaCha8Rng {
    substream(seed, replication, stream as u16)
}

pub fn standard_normal_matrix<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // column-major fill keeps the draw order stable
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn standard_normal_vec<R: rand::Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
