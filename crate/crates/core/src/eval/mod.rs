//! Accuracy, plausibility and diversity metrics and the evaluation pipeline.

mod metrics;
mod pipeline;

use serde::{Deserialize, Serialize};

pub use metrics::{collision_contact, diversity, min_of_n_mpjpe, mpjpe, procrustes, AlignMode, Similarity};
pub use pipeline::{
    ablation, ablation_csv, ablation_sampler, evaluate, predict, results_csv, write_report, AblationRow, BlockCounts,
    EvalBlock, EvalReport, Model, Prediction, Predictor, ABLATION_HEADER, ABLATION_ROWS, RESULTS_HEADER,
};

use crate::error::{Error, Result};
use crate::scene::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Hypothesis counts; all share one pool of `max(n_list)` samples.
    pub n_list: Vec<usize>,
    /// Contact distance in metres.
    pub contact_threshold: f64,
    /// Scene points around the estimated root used for plausibility metrics.
    pub eval_points: usize,
    pub split: Split,
    /// Evaluate only the first this-many records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_list: vec![5, 10, 20],
            contact_threshold: 0.02,
            eval_points: 20_000,
            split: Split::Test,
            limit: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::Config("eval: n_list must hold positive counts".into()));
        }
        if !(self.contact_threshold >= 0.0) || self.eval_points == 0 {
            return Err(Error::Config("eval: contact threshold and point count must be positive".into()));
        }
        if self.limit == Some(0) {
            return Err(Error::Config("eval: limit must be positive".into()));
        }
        Ok(())
    }
}
