//! End-to-end experiment: pretraining, the two-stage method, baselines,
//! sweeps and reports.

mod config;
mod regime;
mod report;
mod sweep;
mod workspace;

pub use config::{ModelShape, PipelineConfig};
pub use regime::{classify_regime, RegimeLabel};
pub use report::{
    emit_report, evaluate_outputs, load_report, EvalReport, JudgeCounts, Significance, SystemReport, CSV_METRICS,
};
pub use sweep::{
    alpha_sweep, beta_sweep, negative_quality, split_ablation, write_sweep_csv, NegativeQuality, SweepParam, SweepRow,
};
pub use workspace::{ScopeRun, Strategy, Workspace, REFERENCE_SYSTEM, SYSTEMS};

use crate::corpus::CorpusError;
use crate::decoding::DecodeError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::training::{TrainError, TrainingTrace};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<HarnessError> },
}

impl HarnessError {
    /// Tags the error with the stage it occurred in, keeping the innermost tag.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ HarnessError::Stage { .. } => e,
            e => HarnessError::Stage { stage: stage.into(), source: Box::new(e) },
        }
    }

    pub fn stage(&self) -> Option<&str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Artifacts of a full run. Checkpoints, datasets and traces are on disk
/// under `out_dir`.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub out_dir: std::path::PathBuf,
    pub report: EvalReport,
    pub dpo_trace: TrainingTrace,
    pub regime: RegimeLabel,
}

/// Runs (or resumes) every stage: pretraining on targets alone, the split,
/// supervised fine-tuning on D1 and on all of D, noisy negatives on D2,
/// preference tuning, and held-out evaluation of all systems.
pub fn run_scope_pipeline(config: &PipelineConfig) -> Result<PipelineArtifacts, HarnessError> {
    let mut ws = Workspace::open(config.clone())?;
    let report = ws.evaluate()?;
    let run = ws.scope(config.split_ratio, config.noise.alpha, config.dpo.beta)?;
    let regime = classify_regime(&run.trace, config.regime_epsilon);
    Ok(PipelineArtifacts { out_dir: ws.dir().to_path_buf(), report, dpo_trace: run.trace, regime })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tag_keeps_innermost() {
        let e = HarnessError::Config("x".into()).in_stage("dpo").in_stage("eval");
        assert_eq!(e.stage(), Some("dpo"));
        assert!(e.to_string().contains("stage `dpo`"));
    }
}
