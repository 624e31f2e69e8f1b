//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream selected by a
//! key `(purpose, path, slot, atom)` under a master seed. Streams never share
//! state, so a value depends only on its key: simulation results are
//! identical for any thread count and any evaluation order, and a window
//! resample can regenerate exactly the randomness it keeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key so that different uses of the
/// same `(path, slot, atom)` never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Brownian = 1,
    Jump = 2,
    Bridge = 3,
    WindowBrownian = 4,
    WindowJump = 5,
    Skeleton = 6,
    Generic = 7,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamFactory {
    seed: [u8; 32],
}

impl StreamFactory {
    pub fn new(master_seed: u64) -> Self {
        let mut seed = [0u8; 32];
        let mut state = master_seed;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { seed }
    }

    pub fn stream(&self, purpose: Purpose, path: u64, slot: u64, atom: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(stream_id(purpose, path, slot, atom));
        rng
    }
}

fn stream_id(purpose: Purpose, path: u64, slot: u64, atom: u64) -> u64 {
    let mut h = splitmix64(purpose as u64);
    h = splitmix64(h ^ path);
    h = splitmix64(h ^ slot.rotate_left(21));
    splitmix64(h ^ atom.rotate_left(42))
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
