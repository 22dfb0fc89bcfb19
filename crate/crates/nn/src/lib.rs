//! A small CPU tensor library with reverse-mode automatic differentiation.
//!
//! Everything in this workspace trains on desk-scale models (tens of
//! thousands of parameters, images no larger than 96x160), so the design
//! favours determinism and verifiability over raw throughput:
//!
//! - tensors are dense row-major [`Array`]s generic over `f32`/`f64`,
//! - gradients come from a per-forward [`Tape`] of backward closures,
//! - every differentiable op has a finite-difference test at `f64`,
//! - reductions accumulate in `f64` regardless of the element type,
//! - parallel sections (rayon over batch items) write disjoint outputs and
//!   reduce partials in a fixed order, so results are bit-reproducible.

pub mod array;
pub mod io;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;

pub use array::Array;
pub use layers::{Conv2d, Conv3d, GroupNorm, Init, Linear};
pub use optim::Adam;
pub use param::{Param, ParamBuilder};
pub use scalar::Scalar;
pub use tape::{Tape, Var};

/// Seeded RNG used across the workspace. One stream per purpose, derived
/// from a user-facing seed; `StdRng` is deterministic for a fixed seed.
pub type Rng = rand::rngs::StdRng;

/// Derive an independent named RNG stream from a base seed.
///
/// Streams for different labels are decorrelated even for adjacent seeds.
pub fn rng_stream(seed: u64, label: &str) -> Rng {
    use rand::SeedableRng;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x1000_0001_b3);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    Rng::seed_from_u64(h)
}
