//! Seeded random streams.
//!
//! Every stream is xoshiro256** whose 256-bit state is filled by four
//! consecutive SplitMix64 outputs of the 64-bit seed. Frozen encoder weights
//! are drawn from such a stream as `(next_u64 >> 11) * 2^-53`, mapped
//! affinely onto `[-bound, bound)`.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::Tensor;

pub type Stream = Xoshiro256StarStar;

/// One SplitMix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> Stream {
    let mut sm = seed;
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
    }
    Xoshiro256StarStar::from_seed(bytes)
}

/// Mixes a run seed with a stream tag so that data, init and noise streams of
/// one run never coincide.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for b in tag.bytes() {
        state ^= u64::from(b);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Uniform draw in `[0, 1)` with 53 bits of mantissa.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `rows x cols` tensor, row-major, entries uniform in `[-bound, bound)`.
pub fn uniform_tensor(rng: &mut impl RngCore, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| (2.0 * unit_f64(rng) - 1.0) * bound)
        .collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

pub fn normal_tensor(rng: &mut impl RngCore, rows: usize, cols: usize, std_dev: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std_dev
        })
        .collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}
