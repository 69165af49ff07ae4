//! Link-level simulation of grant-free random access in a massive-MIMO
//! uplink.
//!
//! * [`model`] draws cell geometry, pilot books, activity and received signals.
//! * [`amp`] recovers the row-sparse effective channel with AMP.
//! * [`noncoh`] embeds bits in the choice of pilot and decodes them with the
//!   modified (SLF-gated) AMP.
//! * [`coherent`] covers MMSE channel estimation, MRC rates and coded BPSK
//!   payloads.
//! * [`theory`] holds closed-form reference values.
//! * [`harness`] runs seeded Monte-Carlo experiments and exports metrics.

pub mod amp;
pub mod coherent;
pub mod error;
pub mod harness;
pub mod model;
pub mod noncoh;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
