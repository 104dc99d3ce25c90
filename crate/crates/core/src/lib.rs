//! Numerics for gradient flow graphs labeled by lattice classes.
//!
//! The base is a flat 3-dimensional chart domain carrying a section `u` of a
//! lattice-valued local system. Each lattice class `alpha` induces a height
//! function `h_alpha = <alpha, u>` and a gradient field; flowlines of these
//! fields, assembled into graphs with a Kirchhoff condition at trivalent
//! vertices, are the objects this crate builds, counts, and deforms.
//!
//! Module map:
//! - [`lattice`]: integer classes, pairings, reflections, irreducibility.
//! - [`sections`]: chart payloads (polynomial and branched link models),
//!   atlas gluing, metric, height gradients.
//! - [`flow`]: the flowline integrator, event location, return maps,
//!   weighted length, derivative of the flow in a section perturbation.
//! - [`linkzone`]: the branched local model near a link strand, terminating
//!   ray search, the contraction solver for perturbed sheets.
//! - [`cycles`]: graph finding, transversality reports, the boundary pairing
//!   and the calibration comparison.
//! - [`transitions`]: one-parameter families, crossings, surgery loci,
//!   splitting and link-transition events.
//! - [`scenario`]: serializable scenario configs and shipped presets.

pub mod cycles;
pub mod error;
pub mod flow;
pub mod lattice;
pub mod linkzone;
pub mod scenario;
pub mod sections;
pub mod transitions;

pub use error::{Error, Result};
