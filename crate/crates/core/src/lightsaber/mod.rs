//! Training framework: manifest ingestion with deterministic splits, a unified trainer
//! over the model library, evaluation metrics, and automatic run tracking.

mod artifact;
pub mod metrics;
pub mod model;
mod splits;
mod train;
pub mod tracking;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{read_manifest, FeatureBundle, FeatureError, InputSignature, Preprocessor};
use crate::scalar::Scalar;
use model::{GruModel, LinearModel, Network, Sample, Segment};

pub use artifact::{ArtifactError, MODEL_ARTIFACT};
pub use metrics::{auprc, auroc, brier, EvalReport, MetricError};
pub use splits::{DatasetSplits, SplitError, SplitOptions};
pub use train::{train, train_detailed, EpochRecord, TrainOutcome};
pub use tracking::{MemoryTracker, RunStatus, Tracker, TrackerError, Tracking};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Linear {
        l2: f64,
    },
    Recurrent {
        hidden_size: usize,
        layers: usize,
        dropout: f64,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Linear { .. } => "linear",
            ModelSpec::Recurrent { .. } => "recurrent",
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        match *self {
            ModelSpec::Linear { l2 } if !(l2 >= 0.0 && l2.is_finite()) => {
                Err(TrainError::InvalidConfig("l2 must be finite and >= 0".into()))
            }
            ModelSpec::Recurrent {
                hidden_size,
                layers,
                dropout,
            } if hidden_size == 0 || layers == 0 || !(0.0..1.0).contains(&dropout) => {
                Err(TrainError::InvalidConfig(
                    "recurrent needs hidden_size > 0, layers > 0, dropout in [0, 1)".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Hyperparameters as tracker params.
    pub fn params(&self) -> Vec<(String, String)> {
        let mut out = vec![("model.kind".to_string(), self.kind().to_string())];
        match self {
            ModelSpec::Linear { l2 } => out.push(("model.l2".into(), l2.to_string())),
            ModelSpec::Recurrent {
                hidden_size,
                layers,
                dropout,
            } => {
                out.push(("model.hidden_size".into(), hidden_size.to_string()));
                out.push(("model.layers".into(), layers.to_string()));
                out.push(("model.dropout".into(), dropout.to_string()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            early_stop_patience: 5,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig(
                "max_epochs, batch_size and early_stop_patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Any network of the model library.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork<F> {
    Linear(LinearModel<F>),
    Recurrent(GruModel<F>),
}

impl<F: Scalar> AnyNetwork<F> {
    pub fn build(spec: &ModelSpec, sig: InputSignature, seed: u64) -> Self {
        match *spec {
            ModelSpec::Linear { l2 } => AnyNetwork::Linear(LinearModel::zeros(
                sig.n_static + sig.n_bins * sig.n_channels,
                F::lit(l2),
            )),
            ModelSpec::Recurrent {
                hidden_size,
                layers,
                dropout,
            } => AnyNetwork::Recurrent(GruModel::new(
                hidden_size,
                layers,
                dropout,
                sig.n_static,
                sig.n_bins,
                sig.n_channels,
                seed,
            )),
        }
    }

    fn inner(&self) -> &dyn Network<F> {
        match self {
            AnyNetwork::Linear(m) => m,
            AnyNetwork::Recurrent(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Network<F> {
        match self {
            AnyNetwork::Linear(m) => m,
            AnyNetwork::Recurrent(m) => m,
        }
    }

    /// Rounds every parameter to the nearest `f32`, the precision artifacts store.
    pub fn quantize(&mut self) {
        for p in self.params_mut() {
            *p = F::lit(p.as_f64() as f32 as f64);
        }
    }
}

impl<F: Scalar> Network<F> for AnyNetwork<F> {
    fn params(&self) -> &[F] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [F] {
        self.inner_mut().params_mut()
    }

    fn segments(&self) -> Vec<Segment> {
        self.inner().segments()
    }

    fn logit(&self, x: &Sample<'_, F>) -> F {
        self.inner().logit(x)
    }

    fn accumulate_grad(
        &self,
        x: &Sample<'_, F>,
        target: F,
        grad: &mut [F],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> F {
        self.inner().accumulate_grad(x, target, grad, dropout)
    }

    fn regularize(&self, grad: &mut [F]) -> F {
        self.inner().regularize(grad)
    }
}

/// Smallest probability `predict` reports; keeps outputs strictly inside (0, 1).
const PROBABILITY_FLOOR: f64 = 1e-12;

/// A trained network together with everything needed to score raw-unit inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub network: AnyNetwork<f64>,
    pub preprocessor: Preprocessor,
    pub run_id: Option<String>,
}

impl TrainedModel {
    pub fn signature(&self) -> InputSignature {
        self.preprocessor.signature
    }

    pub fn check_shapes(
        &self,
        static_row: &[f64],
        temporal: &[f64],
        mask: &[f64],
    ) -> Result<(), TrainError> {
        let sig = self.signature();
        let cells = sig.n_bins * sig.n_channels;
        if static_row.len() != sig.n_static || temporal.len() != cells || mask.len() != cells {
            return Err(TrainError::ShapeMismatch(format!(
                "expected static [{}] and temporal/mask [T={}][C={}], got static [{}], temporal {} cells, mask {} cells",
                sig.n_static,
                sig.n_bins,
                sig.n_channels,
                static_row.len(),
                temporal.len(),
                mask.len()
            )));
        }
        Ok(())
    }

    /// Probability for one raw-unit row: unobserved cells are imputed and the stored
    /// normalization applied before scoring. `temporal` and `mask` are `T x C` row-major.
    pub fn predict(
        &self,
        static_row: &[f64],
        temporal: &[f64],
        mask: &[f64],
    ) -> Result<f64, TrainError> {
        self.check_shapes(static_row, temporal, mask)?;
        if static_row.iter().chain(temporal).chain(mask).any(|v| !v.is_finite()) {
            return Err(TrainError::ShapeMismatch("inputs must be finite".into()));
        }
        let mask: Vec<f64> = mask.iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect();
        let mut statics = static_row.to_vec();
        let mut values = temporal.to_vec();
        self.preprocessor.apply(&mut statics, &mut values, &mask);
        Ok(self.predict_prepared(&Sample {
            statics: &statics,
            temporal: &values,
            mask: &mask,
        }))
    }

    /// Probability for a row that is already imputed and normalized (bundle rows).
    pub fn predict_prepared(&self, x: &Sample<'_, f64>) -> f64 {
        self.network
            .probability(x)
            .clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    }

    /// Scores rows of a bundle.
    pub fn score_rows(&self, bundle: &FeatureBundle, rows: &[usize]) -> Vec<f64> {
        let data = BundleData::new(bundle);
        rows.iter()
            .map(|&i| self.predict_prepared(&data.sample(i)))
            .collect()
    }
}

/// `f64` copies of a bundle's arrays.
pub(crate) struct BundleData {
    statics: Vec<f64>,
    temporal: Vec<f64>,
    mask: Vec<f64>,
    s: usize,
    cells: usize,
}

impl BundleData {
    pub(crate) fn new(bundle: &FeatureBundle) -> Self {
        let sig = bundle.signature();
        let widen = |d: &[f32]| d.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        Self {
            statics: widen(bundle.static_features.data()),
            temporal: widen(bundle.temporal.data()),
            mask: widen(bundle.mask.data()),
            s: sig.n_static,
            cells: sig.n_bins * sig.n_channels,
        }
    }

    pub(crate) fn sample(&self, i: usize) -> Sample<'_, f64> {
        Sample {
            statics: &self.statics[i * self.s..(i + 1) * self.s],
            temporal: &self.temporal[i * self.cells..(i + 1) * self.cells],
            mask: &self.mask[i * self.cells..(i + 1) * self.cells],
        }
    }
}

/// Reads a manifest and splits its rows (stratified).
pub fn ingest(
    manifest_path: impl AsRef<Path>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(FeatureBundle, DatasetSplits), TrainError> {
    ingest_with(
        manifest_path,
        &SplitOptions {
            ratios,
            seed,
            stratify: true,
        },
    )
}

pub fn ingest_with(
    manifest_path: impl AsRef<Path>,
    options: &SplitOptions,
) -> Result<(FeatureBundle, DatasetSplits), TrainError> {
    let bundle = read_manifest(manifest_path)?;
    let splits = DatasetSplits::new(&bundle.labels, options)?;
    Ok((bundle, splits))
}
