//! Counterfactual fairness auditing for image-labelling services.
//!
//! Build an occupation image manifest, train an attribute-conditioned image
//! codec, synthesize counterfactual series that sweep a sensitive attribute
//! while holding everything else fixed, probe labelling backends with every
//! image, and fit per-label slopes of label rate against attribute value.

pub mod codec;
pub mod dataset;
pub mod facegeom;
pub mod fsutil;
pub mod image;
pub mod toy;
pub mod synth;
pub mod probe;
pub mod slopes;
pub mod cli;
