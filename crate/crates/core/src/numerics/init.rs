use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor2;

/// Derives a child seed from `root` and a component label.
///
/// FNV-1a over the label, mixed with the root through splitmix64. Stable
/// across platforms and releases, unlike `std::hash`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))` for an `out x in` weight.
pub fn xavier_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Tensor2 {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Tensor2::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-bound..bound))
}
