//! Machine-readable run reports. Each carries a schema id and is parsed back
//! strictly (unknown fields are rejected) by [`validate_report`].

use serde::{Deserialize, Serialize};

use crate::data::metrics::MetricsReport;
use crate::model::StageTimings;
use crate::train::StepLog;
use crate::{Error, Result};

pub const EVAL_SCHEMA: &str = "nmrf-eval/1";
pub const PROPOSE_SCHEMA: &str = "nmrf-propose/1";
pub const TRAIN_SCHEMA: &str = "nmrf-train/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageReport {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub metrics: MetricsReport,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema: String,
    pub model_hash: String,
    pub step: usize,
    pub aggregate: MetricsReport,
    /// Metrics of the winner-takes-all coarse map before refinement.
    pub coarse: MetricsReport,
    pub mean_timings: StageTimings,
    pub images: Vec<ImageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeReport {
    pub schema: String,
    pub model_hash: String,
    pub k: usize,
    pub aggregate: MetricsReport,
    pub images: Vec<ImageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub schema: String,
    pub model_hash: String,
    pub steps: usize,
    pub seconds: f64,
    pub last: Option<StepLog>,
    pub train_metrics: Option<MetricsReport>,
    pub eval_metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Eval(EvalReport),
    Propose(ProposeReport),
    Train(TrainReport),
}

pub fn mean_timings(all: &[StageTimings]) -> StageTimings {
    let n = all.len().max(1) as f64;
    let mut t = StageTimings::default();
    for s in all {
        t.feature_extraction += s.feature_extraction / n;
        t.disparity_proposal += s.disparity_proposal / n;
        t.mrf_inference += s.mrf_inference / n;
        t.refinement += s.refinement / n;
    }
    t
}

fn check_images(images: &[ImageReport]) -> Result<()> {
    for im in images {
        im.metrics.validate()?;
        if im.metrics.pixels > im.height * im.width {
            return Err(Error::InvalidArgument(format!("{}: more valid pixels than pixels", im.name)));
        }
    }
    Ok(())
}

/// Parses a report and checks its schema id and value ranges.
pub fn validate_report(json: &str) -> Result<Report> {
    #[derive(Deserialize)]
    struct Head {
        schema: String,
    }
    let head: Head = serde_json::from_str(json)?;
    match head.schema.as_str() {
        EVAL_SCHEMA => {
            let r: EvalReport = serde_json::from_str(json)?;
            r.aggregate.validate()?;
            r.coarse.validate()?;
            check_images(&r.images)?;
            Ok(Report::Eval(r))
        }
        PROPOSE_SCHEMA => {
            let r: ProposeReport = serde_json::from_str(json)?;
            r.aggregate.validate()?;
            check_images(&r.images)?;
            Ok(Report::Propose(r))
        }
        TRAIN_SCHEMA => {
            let r: TrainReport = serde_json::from_str(json)?;
            for m in [&r.train_metrics, &r.eval_metrics].into_iter().flatten() {
                m.validate()?;
            }
            Ok(Report::Train(r))
        }
        other => Err(Error::InvalidArgument(format!("unknown report schema {other}"))),
    }
}
