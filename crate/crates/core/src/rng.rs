//! Named, counter-based random streams derived from one 64-bit seed.
//!
//! A stream is identified by `(seed, name, index)`; its output does not
//! depend on how many other streams were drawn from or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Logical purposes of randomness in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Dataset,
    Init,
    Eot,
    Appearance,
    Patch,
    Gradcheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Dataset => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Eot => 0x656f_74,
            Stream::Appearance => 0x6170_7065,
            Stream::Patch => 0x7061_7463,
            Stream::Gradcheck => 0x6772_6164,
        }
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream, index)`.
pub fn stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(which.tag())));
    rng.set_stream(mix(index.wrapping_add(which.tag().rotate_left(32))));
    rng
}
