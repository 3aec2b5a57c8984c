//! Defense procedures run against a suspect model or dataset: STRIP,
//! saliency-overlap inspection, fine-pruning, activation clustering, trigger
//! reverse-engineering, and a frequency-domain sample detector.

pub mod activation_clustering;
pub mod fine_prune;
pub mod ftd;
pub mod gradcam;
pub mod neural_cleanse;
pub mod strip;

use std::path::Path;

use serde::Serialize;

/// Common wrapper every defense can render itself into for the report files.
#[derive(Debug, Clone, Serialize)]
pub struct DefenseReport {
    pub defense: String,
    /// Decision threshold in the defense's own units (entropy, anomaly
    /// index, probability, ...).
    pub threshold: f64,
    pub scores: serde_json::Value,
    pub verdict: String,
}

impl DefenseReport {
    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self).map_err(std::io::Error::other)
    }
}

/// Write plot data as a flat CSV: one header row, then records.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
