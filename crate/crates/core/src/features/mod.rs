//! Cohort-to-tensor feature extraction.
//!
//! Each cohort member contributes one row: optional static covariates (age at index and a
//! gender indicator) and a `T x C` grid of binned measurements over the observation window
//! after the index time, with a parallel observation mask. Empty bins are forward filled;
//! leading gaps take the per-concept median of the fitting population. Z-score statistics
//! and medians are fitted on a caller-chosen subset of rows (the training split) and stored
//! with the bundle so the same transform can be replayed at serving time.

mod io;

use std::collections::HashMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::Array;
use crate::cohort::{CohortError, LabeledCohort};
use crate::ehr::{ConceptId, EhrError, EhrStore, Gender};

pub use io::{read_manifest, write_bundle, ExtractionManifest, ManifestFiles, MANIFEST_FILE};

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("invalid covariate settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("dangling reference: {0} does not exist")]
    DanglingReference(String),
    #[error("cohort hash mismatch: manifest says {expected}, cohort file hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Last,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateSettings {
    pub concept_ids: Vec<ConceptId>,
    pub window_hours: i64,
    pub bin_hours: i64,
    pub aggregation: Aggregation,
    pub include_static: bool,
    pub normalize: Normalization,
}

impl Default for CovariateSettings {
    fn default() -> Self {
        Self {
            concept_ids: Vec::new(),
            window_hours: 48,
            bin_hours: 2,
            aggregation: Aggregation::Mean,
            include_static: true,
            normalize: Normalization::Zscore,
        }
    }
}

impl CovariateSettings {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidSettings(m.to_string()));
        if self.concept_ids.is_empty() {
            return bad("concept_ids must not be empty");
        }
        let mut seen = std::collections::HashSet::new();
        if !self.concept_ids.iter().all(|c| seen.insert(*c)) {
            return bad("concept_ids must not contain duplicates");
        }
        if self.bin_hours <= 0 || self.window_hours <= 0 {
            return bad("window_hours and bin_hours must be positive");
        }
        if self.window_hours % self.bin_hours != 0 {
            return bad("window_hours must be divisible by bin_hours");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        (self.window_hours / self.bin_hours) as usize
    }

    pub fn n_channels(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn static_names(&self) -> Vec<String> {
        if self.include_static {
            vec!["age_years".into(), "gender_male".into()]
        } else {
            Vec::new()
        }
    }

    pub fn temporal_names(&self) -> Vec<String> {
        self.concept_ids
            .iter()
            .map(|c| format!("concept_{c}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Which rows the statistics were fitted on, when not the whole cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSplit {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Per temporal channel, in raw units; fills leading gaps.
    pub medians: Vec<f64>,
    /// Per temporal channel; absent when normalization is off.
    pub temporal: Option<Vec<ChannelStats>>,
    /// Per static column; absent when normalization is off.
    #[serde(rename = "static")]
    pub static_: Option<Vec<ChannelStats>>,
    pub fit_rows: usize,
    #[serde(default)]
    pub fit_split: Option<FitSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDictionary {
    pub static_names: Vec<String>,
    pub temporal_names: Vec<String>,
}

/// Model-ready features for one labeled cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub outcome_name: String,
    pub settings: CovariateSettings,
    pub cohort: LabeledCohort,
    /// `N x S`
    pub static_features: Array,
    /// `N x T x C`, normalized when the settings ask for it.
    pub temporal: Array,
    /// `N x T x C`, 1.0 where the bin holds at least one observation.
    pub mask: Array,
    pub labels: Vec<u8>,
    pub columns: ColumnDictionary,
    pub stats: NormalizationStats,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(S, T, C)`
    pub fn signature(&self) -> InputSignature {
        InputSignature {
            n_static: self.static_features.shape()[1],
            n_bins: self.temporal.shape()[1],
            n_channels: self.temporal.shape()[2],
        }
    }

    /// Bit-exact comparison of all arrays plus metadata.
    pub fn bitwise_eq(&self, other: &FeatureBundle) -> bool {
        self.outcome_name == other.outcome_name
            && self.settings == other.settings
            && self.cohort == other.cohort
            && self.labels == other.labels
            && self.columns == other.columns
            && self.stats == other.stats
            && self.static_features.bitwise_eq(&other.static_features)
            && self.temporal.bitwise_eq(&other.temporal)
            && self.mask.bitwise_eq(&other.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub n_static: usize,
    pub n_bins: usize,
    pub n_channels: usize,
}

/// Replays imputation and normalization on raw-unit rows.
///
/// Shared by extraction and serving so a deployed model sees exactly what training saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub signature: InputSignature,
    pub stats: NormalizationStats,
}

impl Preprocessor {
    /// Fills unobserved cells in place (forward fill, then median) and applies the
    /// z-score transforms. `temporal` and `mask` are `T x C` row-major.
    pub fn apply(&self, static_row: &mut [f64], temporal: &mut [f64], mask: &[f64]) {
        let (t_len, c_len) = (self.signature.n_bins, self.signature.n_channels);
        for c in 0..c_len {
            let mut carry: Option<f64> = None;
            for t in 0..t_len {
                let k = t * c_len + c;
                if mask[k] > 0.5 {
                    carry = Some(temporal[k]);
                } else {
                    temporal[k] = carry.unwrap_or(self.stats.medians[c]);
                }
            }
        }
        if let Some(stats) = &self.stats.temporal {
            for (k, v) in temporal.iter_mut().enumerate() {
                let s = stats[k % c_len];
                *v = (*v - s.mean) / s.std;
            }
        }
        if let Some(stats) = &self.stats.static_ {
            for (v, s) in static_row.iter_mut().zip(stats) {
                *v = (*v - s.mean) / s.std;
            }
        }
    }
}

/// Extracts features with statistics fitted on every member.
pub fn extract_features(
    store: &EhrStore,
    labeled: &LabeledCohort,
    settings: &CovariateSettings,
) -> Result<FeatureBundle, FeatureError> {
    extract_features_fitted(store, labeled, settings, "outcome", None)
}

/// Extracts features with medians and z-score statistics fitted on `fit_rows` only.
pub fn extract_features_fitted(
    store: &EhrStore,
    labeled: &LabeledCohort,
    settings: &CovariateSettings,
    outcome_name: &str,
    fit: Option<(&[usize], FitSplit)>,
) -> Result<FeatureBundle, FeatureError> {
    settings.validate()?;
    if labeled.is_empty() {
        return Err(FeatureError::EmptyCohort);
    }
    if labeled.labels.len() != labeled.members.len() {
        return Err(FeatureError::SchemaMismatch(
            "labels and members differ in length".into(),
        ));
    }
    let n = labeled.len();
    let t_len = settings.n_bins();
    let c_len = settings.n_channels();
    let channel: HashMap<ConceptId, usize> = settings
        .concept_ids
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let bin_seconds = settings.bin_hours * 3600;

    let mut raw = vec![0.0f64; n * t_len * c_len];
    let mut mask = vec![0.0f64; n * t_len * c_len];
    let mut statics = vec![0.0f64; n * if settings.include_static { 2 } else { 0 }];

    for (i, member) in labeled.members.iter().enumerate() {
        let unknown = || CohortError::UnknownMember {
            person_id: member.person_id,
            visit_id: member.visit_id,
        };
        let visit = store.visit(member.visit_id).ok_or_else(unknown)?;
        let person = store.person(member.person_id).ok_or_else(unknown)?;
        if visit.person_id != person.person_id {
            return Err(unknown().into());
        }
        let from = member.index_datetime;
        let to = from + Duration::hours(settings.window_hours);
        let events = store.events_in_window(member.person_id, from, to)?;

        let base = i * t_len * c_len;
        let mut counts = vec![0u32; t_len * c_len];
        for e in events {
            let Some(&c) = channel.get(&e.concept_id) else {
                continue;
            };
            let t = ((e.at - from).num_seconds() / bin_seconds) as usize;
            let k = t * c_len + c;
            let cell = &mut raw[base + k];
            match settings.aggregation {
                Aggregation::Mean => *cell += e.value,
                Aggregation::Last => *cell = e.value,
                Aggregation::Max => {
                    *cell = if counts[k] == 0 {
                        e.value
                    } else {
                        cell.max(e.value)
                    }
                }
            }
            counts[k] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                mask[base + k] = 1.0;
                if settings.aggregation == Aggregation::Mean {
                    raw[base + k] /= f64::from(count);
                }
            }
        }

        if settings.include_static {
            let age = (from - person.birth_datetime).num_seconds() as f64 / SECONDS_PER_YEAR;
            statics[i * 2] = age;
            statics[i * 2 + 1] = if person.gender == Gender::Male { 1.0 } else { 0.0 };
        }
    }

    let (fit_rows, fit_split): (Vec<usize>, Option<FitSplit>) = match fit {
        Some((rows, split)) => (rows.to_vec(), Some(split)),
        None => ((0..n).collect(), None),
    };
    if let Some(&bad) = fit_rows.iter().find(|&&r| r >= n) {
        return Err(FeatureError::SchemaMismatch(format!(
            "fit row {bad} out of range for {n} members"
        )));
    }

    // Observed per-channel values of the fitting rows, sorted so every statistic is
    // independent of row order.
    let mut observed: Vec<Vec<f64>> = vec![Vec::new(); c_len];
    for &i in &fit_rows {
        let base = i * t_len * c_len;
        for k in 0..t_len * c_len {
            if mask[base + k] > 0.5 {
                observed[k % c_len].push(raw[base + k]);
            }
        }
    }
    for values in &mut observed {
        values.sort_by(f64::total_cmp);
    }
    let medians = observed.iter().map(|v| median(v)).collect();
    let zscore = settings.normalize == Normalization::Zscore;
    let temporal_stats = zscore.then(|| observed.iter().map(|v| sorted_stats(v)).collect());
    let static_stats = (zscore && settings.include_static).then(|| {
        (0..2)
            .map(|col| {
                let mut values: Vec<f64> = fit_rows.iter().map(|&i| statics[i * 2 + col]).collect();
                values.sort_by(f64::total_cmp);
                sorted_stats(&values)
            })
            .collect()
    });

    let stats = NormalizationStats {
        medians,
        temporal: temporal_stats,
        static_: static_stats,
        fit_rows: fit_rows.len(),
        fit_split,
    };
    let s_len = if settings.include_static { 2 } else { 0 };
    let pre = Preprocessor {
        signature: InputSignature {
            n_static: s_len,
            n_bins: t_len,
            n_channels: c_len,
        },
        stats,
    };

    let cells = t_len * c_len;
    for i in 0..n {
        let static_row = &mut statics[i * s_len..(i + 1) * s_len];
        let temporal_row = &mut raw[i * cells..(i + 1) * cells];
        pre.apply(static_row, temporal_row, &mask[i * cells..(i + 1) * cells]);
    }

    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    Ok(FeatureBundle {
        outcome_name: outcome_name.to_string(),
        settings: settings.clone(),
        cohort: labeled.clone(),
        static_features: Array::from_vec(&[n, s_len], to_f32(statics)).unwrap(),
        temporal: Array::from_vec(&[n, t_len, c_len], to_f32(raw)).unwrap(),
        mask: Array::from_vec(&[n, t_len, c_len], to_f32(mask)).unwrap(),
        labels: labeled.labels.clone(),
        columns: ColumnDictionary {
            static_names: settings.static_names(),
            temporal_names: settings.temporal_names(),
        },
        stats: pre.stats,
    })
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Population mean and standard deviation; a degenerate spread maps to std 1.
fn sorted_stats(sorted: &[f64]) -> ChannelStats {
    if sorted.is_empty() {
        return ChannelStats {
            mean: 0.0,
            std: 1.0,
        };
    }
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    ChannelStats {
        mean,
        std: if std > 1e-12 { std } else { 1.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::CohortMember;
    use crate::ehr::{Concept, MeasurementEvent, Person, VisitKind, VisitOccurrence};
    use crate::time::parse_ts;

    fn store_with(events: &[(i64, f64, i64)]) -> (EhrStore, LabeledCohort) {
        let start = parse_ts("2021-05-01T00:00:00Z").unwrap();
        let store = EhrStore::from_tables(
            vec![Person {
                person_id: 1,
                birth_datetime: parse_ts("1971-05-01T00:00:00Z").unwrap(),
                gender: Gender::Male,
            }],
            vec![VisitOccurrence {
                visit_id: 1,
                person_id: 1,
                start,
                end: start + Duration::hours(100),
                visit_kind: VisitKind::Inpatient,
            }],
            events
                .iter()
                .map(|&(concept_id, value, secs)| MeasurementEvent {
                    person_id: 1,
                    visit_id: Some(1),
                    concept_id,
                    value,
                    at: start + Duration::seconds(secs),
                })
                .collect(),
            vec![],
            (1..=2)
                .map(|id| Concept {
                    concept_id: id,
                    name: format!("c{id}"),
                    unit: "u".into(),
                    normal_low: 0.0,
                    normal_high: 1.0,
                })
                .collect(),
        )
        .unwrap();
        let cohort = LabeledCohort {
            members: vec![CohortMember {
                person_id: 1,
                index_datetime: start,
                visit_id: 1,
            }],
            labels: vec![1],
        };
        (store, cohort)
    }

    fn raw_settings() -> CovariateSettings {
        CovariateSettings {
            concept_ids: vec![1, 2],
            normalize: Normalization::None,
            ..Default::default()
        }
    }

    #[test]
    fn single_event_forward_fills() {
        let (store, cohort) = store_with(&[(1, 7.5, 3600)]);
        let b = extract_features(&store, &cohort, &raw_settings()).unwrap();
        assert_eq!(b.temporal.shape(), &[1, 24, 2]);
        assert_eq!(b.mask.row(0)[0], 1.0);
        for t in 0..24 {
            assert_eq!(b.temporal.row(0)[t * 2], 7.5);
            if t > 0 {
                assert_eq!(b.mask.row(0)[t * 2], 0.0);
            }
        }
        // Concept 2 never observed: no population median exists, so it falls back to 0.
        assert!(b.mask.row(0).iter().skip(1).step_by(2).all(|&m| m == 0.0));
        let statics = b.static_features.row(0);
        assert!((statics[0] - 50.0).abs() < 0.01, "age {}", statics[0]);
        assert_eq!(statics[1], 1.0);
    }

    #[test]
    fn leading_gap_uses_median() {
        let (store, cohort) = store_with(&[(1, 2.0, 5 * 3600), (1, 4.0, 9 * 3600)]);
        let b = extract_features(&store, &cohort, &raw_settings()).unwrap();
        let row = b.temporal.row(0);
        // Bins 0 and 1 precede the first observation in bin 2.
        assert_eq!(row[0], 3.0);
        assert_eq!(row[2], 3.0);
        assert_eq!(row[4], 2.0);
        assert_eq!(row[6], 2.0);
        assert_eq!(row[8], 4.0);
    }

    #[test]
    fn aggregations() {
        let events = [(1, 1.0, 60), (1, 5.0, 120), (1, 3.0, 180)];
        let (store, cohort) = store_with(&events);
        for (agg, want) in [
            (Aggregation::Mean, 3.0),
            (Aggregation::Last, 3.0),
            (Aggregation::Max, 5.0),
        ] {
            let settings = CovariateSettings {
                aggregation: agg,
                ..raw_settings()
            };
            let b = extract_features(&store, &cohort, &settings).unwrap();
            assert_eq!(b.temporal.row(0)[0], want, "{agg:?}");
        }
    }

    #[test]
    fn window_end_is_exclusive() {
        let (store, cohort) = store_with(&[(1, 9.0, 48 * 3600)]);
        let b = extract_features(&store, &cohort, &raw_settings()).unwrap();
        assert!(b.mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn rejects_bad_settings_and_empty_cohort() {
        let (store, cohort) = store_with(&[]);
        let mut s = raw_settings();
        s.bin_hours = 5;
        assert!(matches!(
            extract_features(&store, &cohort, &s),
            Err(FeatureError::InvalidSettings(_))
        ));
        s = raw_settings();
        s.concept_ids = vec![1, 1];
        assert!(extract_features(&store, &cohort, &s).is_err());
        assert!(matches!(
            extract_features(&store, &LabeledCohort::default(), &raw_settings()),
            Err(FeatureError::EmptyCohort)
        ));
    }
}
