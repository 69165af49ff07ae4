//! Seeded random streams.
//!
//! Every trial owns one ChaCha stream derived from `(master seed, sweep point,
//! trial index)`, so a trial draws the same numbers whether it runs serially or
//! on a worker thread.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const POINT_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream for trial `trial` of sweep point `point`.
pub fn trial_rng(seed: u64, point: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ point.wrapping_add(1).wrapping_mul(POINT_MIX));
    rng.set_stream(trial);
    rng
}

/// Plain seeded generator for one-off draws.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}
