//! End-to-end experiments: dataset ingestion, demonstration selection, model
//! or capture runs, metric records, statistics and report files.

pub mod capture;
pub mod config;
pub mod report;
pub mod run;
pub mod synth;
pub mod task;

pub use capture::{CaptureManifest, CaptureSet};
pub use config::{ExperimentConfig, ModelSource, Selector};
pub use report::{Comparison, ComparisonRow, Summary};
pub use run::{compare_selectors, run_experiment, score_heads, RunOutput};
pub use task::{Task, TaskManifest};

use crate::error::{Error, Result};

/// Index of the candidate with the largest logit; ties go to the lowest index.
pub fn predict_label(logits: &[f32], candidates: &[u32]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("label candidates"));
    }
    let mut best = 0;
    let mut best_logit = f32::NEG_INFINITY;
    for (i, &c) in candidates.iter().enumerate() {
        let l = *logits.get(c as usize).ok_or(Error::IndexOutOfRange {
            what: "candidate token",
            index: c as usize,
            limit: logits.len(),
        })?;
        if i == 0 || l > best_logit {
            best = i;
            best_logit = l;
        }
    }
    Ok(best)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E4B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for test instance `index`, so results do not depend on
/// scheduling order.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}
