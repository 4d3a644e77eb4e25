//! The in-hospital mortality benchmark flow from store to split, model-ready features.

use thiserror::Error;

use crate::cohort::{
    evaluate_cohort, evaluate_outcome, CohortDefinition, CohortError, OutcomeDefinition,
};
use crate::ehr::EhrStore;
use crate::features::{extract_features_fitted, CovariateSettings, FeatureBundle, FeatureError, FitSplit};
use crate::lightsaber::{DatasetSplits, SplitError, SplitOptions};

pub const OUTCOME_NAME: &str = "in_hospital_mortality_30d";

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub bundle: FeatureBundle,
    pub splits: DatasetSplits,
}

/// Cohort, outcome, split, then features whose statistics come from the training rows.
///
/// Splitting depends only on the labels, so [`DatasetSplits::new`] on the written bundle's
/// labels with the same options reproduces `splits`.
pub fn prepare(
    store: &EhrStore,
    cohort: &CohortDefinition,
    outcome: &OutcomeDefinition,
    settings: &CovariateSettings,
    split: &SplitOptions,
) -> Result<BenchmarkData, BenchmarkError> {
    let members = evaluate_cohort(store, cohort)?;
    let labeled = evaluate_outcome(store, &members, outcome)?;
    let splits = DatasetSplits::new(&labeled.labels, split)?;
    let fit = FitSplit {
        ratios: split.ratios,
        seed: split.seed,
        stratify: split.stratify,
    };
    let bundle = extract_features_fitted(
        store,
        &labeled,
        settings,
        OUTCOME_NAME,
        Some((&splits.train, fit)),
    )?;
    Ok(BenchmarkData { bundle, splits })
}
