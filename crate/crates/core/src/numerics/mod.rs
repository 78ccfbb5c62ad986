//! Dense tensors, the primitives the model is built from, and reverse-mode
//! gradients over an explicit tape.

mod gradcheck;
pub mod io;
pub mod kernels;
mod tape;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use kernels::{depthwise_conv1d_causal, layer_norm, matmul, softmax_attention};
pub use tape::{CustomOp, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `tag` under `seed`, so that adding or removing
/// one consumer of randomness never shifts another's draws.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn tagged_rng(seed: u64, tag: &str) -> Rng {
    rng_from_seed(derive_seed(seed, tag))
}
