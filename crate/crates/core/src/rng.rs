//! Deterministic random stream derivation.
//!
//! Every random draw in a run comes from a ChaCha8 generator seeded with the
//! master seed and positioned on a stream id built from (purpose, sweep point,
//! trial). Stream ids are
//!
//! ```text
//! id = (point_tag << 40) | (trial << 8) | purpose
//! ```
//!
//! with `point_tag = 0` for draws shared by all sweep points and `point + 1`
//! otherwise. Results therefore do not depend on which worker ran a trial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::C64;

pub type RandomStream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    /// Target placement, RCS draw and signal phases.
    Placement = 1,
    /// Clutter and noise realizations.
    Interference = 2,
    /// Network initialization and shuffling.
    Training = 3,
    /// Independent draws used by test oracles and checks.
    Auxiliary = 4,
}

pub fn stream(master_seed: u64, purpose: Purpose, point: Option<usize>, trial: usize) -> RandomStream {
    let point_tag = point.map_or(0, |p| p as u64 + 1);
    assert!(point_tag < (1 << 24), "sweep point index out of range");
    assert!((trial as u64) < (1 << 32), "trial index out of range");
    let id = (point_tag << 40) | ((trial as u64) << 8) | purpose as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id);
    rng
}

/// Draws from CN(0, 1): independent real and imaginary parts with variance 1/2.
pub fn complex_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}
