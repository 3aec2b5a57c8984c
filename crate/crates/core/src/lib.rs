pub mod datasets;
pub mod image;
pub mod nn;
pub mod saliency;
pub mod spectral;
pub mod synth;
pub mod trigger;
pub mod metrics;
pub mod poison;
pub mod defenses;
pub mod report;
