use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One online prediction, made before the frame's label was revealed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedPrediction {
    pub uhat: f64,
    /// Label of the most likely prototype; `None` when the memory was empty.
    pub predicted: Option<u64>,
    pub truth: u64,
    /// The class appeared earlier in the sequence.
    pub known: bool,
}

impl RankedPrediction {
    pub fn correct(&self) -> bool {
        self.known && self.predicted == Some(self.truth)
    }
}

/// Denominator of recall@N.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Known instances in the whole sequence; recall reaches 1 at the end.
    #[default]
    SequenceTotal,
    /// Known instances among the top N only.
    WithinPrefix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// No known instance existed, so the score defaulted to 1.
    pub no_known: bool,
}

/// Area under the precision-recall curve of predictions ranked by
/// ascending new-cluster probability (stable for ties), accumulated as
/// precision@N times the recall increment at each N.
pub fn average_precision(preds: &[RankedPrediction], mode: ApMode) -> Result<ApResult> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("average precision"));
    }
    let total_known = preds.iter().filter(|p| p.known).count();
    if total_known == 0 {
        return Ok(ApResult {
            ap: 1.0,
            no_known: true,
        });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].uhat.total_cmp(&preds[b].uhat));
    let mut hits = 0usize;
    let mut known = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let p = &preds[i];
        known += p.known as usize;
        hits += p.correct() as usize;
        let precision = hits as f64 / (rank + 1) as f64;
        let denom = match mode {
            ApMode::SequenceTotal => total_known,
            ApMode::WithinPrefix => known,
        };
        let recall = if denom == 0 {
            0.0
        } else {
            hits as f64 / denom as f64
        };
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Ok(ApResult {
        ap: area,
        no_known: false,
    })
}
