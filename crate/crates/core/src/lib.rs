//! Attribute-gated selective encryption of point-cloud frames.

pub mod abe;
pub mod codec;
pub mod manifest;
pub mod metrics;
pub mod pattern;
pub mod ply;
pub mod policy;
pub mod synth;
pub mod wire;
