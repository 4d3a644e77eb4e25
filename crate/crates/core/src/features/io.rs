//! Bundle persistence: arrays as `.f32` + `.shape` pairs, labels as `.u8`, the cohort as
//! `cohort.csv`, and a YAML manifest tying them together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::*;
use crate::array::{format_shape, parse_shape, write_array};
use crate::time::{serde_ts, Timestamp};

pub const MANIFEST_FILE: &str = "manifest.yaml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateType {
    Static,
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    pub static_: Option<String>,
    pub temporal: String,
    pub mask: String,
    pub labels: String,
    pub cohort: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionManifest {
    pub outcome_name: String,
    pub covariate_types: Vec<CovariateType>,
    pub files: ManifestFiles,
    pub settings: CovariateSettings,
    pub normalization_stats: NormalizationStats,
    pub cohort_hash: String,
    #[serde(with = "serde_ts")]
    pub created_at: Timestamp,
}

fn now() -> Timestamp {
    crate::time::from_unix(chrono::Utc::now().timestamp())
}

/// Writes the bundle into `out_dir` and returns the manifest path.
pub fn write_bundle(bundle: &FeatureBundle, out_dir: impl AsRef<Path>) -> Result<PathBuf, FeatureError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;

    let has_static = bundle.settings.include_static;
    if has_static {
        write_array(dir, "static", &bundle.static_features)?;
    }
    write_array(dir, "temporal", &bundle.temporal)?;
    write_array(dir, "mask", &bundle.mask)?;
    fs::write(dir.join("labels.u8"), &bundle.labels)?;
    fs::write(dir.join("labels.shape"), format_shape(&[bundle.labels.len()]) + "\n")?;
    let cohort_bytes = bundle.cohort.to_csv_bytes();
    fs::write(dir.join("cohort.csv"), &cohort_bytes)?;

    let mut covariate_types = Vec::new();
    if has_static {
        covariate_types.push(CovariateType::Static);
    }
    covariate_types.push(CovariateType::Temporal);

    let manifest = ExtractionManifest {
        outcome_name: bundle.outcome_name.clone(),
        covariate_types,
        files: ManifestFiles {
            static_: has_static.then(|| "static.f32".to_string()),
            temporal: "temporal.f32".into(),
            mask: "mask.f32".into(),
            labels: "labels.u8".into(),
            cohort: "cohort.csv".into(),
        },
        settings: bundle.settings.clone(),
        normalization_stats: bundle.stats.clone(),
        cohort_hash: bundle.cohort.content_hash(),
        created_at: now(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_yaml::to_string(&manifest)
        .map_err(|e| FeatureError::SchemaMismatch(e.to_string()))?;
    fs::write(&path, text)?;
    Ok(path)
}

pub fn read_manifest_file(path: &Path) -> Result<ExtractionManifest, FeatureError> {
    let text = fs::read_to_string(path)?;
    serde_yaml::from_str(&text).map_err(|e| FeatureError::SchemaMismatch(e.to_string()))
}

fn existing(dir: &Path, name: &str) -> Result<PathBuf, FeatureError> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(FeatureError::DanglingReference(name.to_string()))
    }
}

fn read_f32(dir: &Path, file: &str, expected: &[usize]) -> Result<Array, FeatureError> {
    let data_path = existing(dir, file)?;
    let stem = file.strip_suffix(".f32").unwrap_or(file);
    let shape_name = format!("{stem}.shape");
    let shape_text = fs::read_to_string(existing(dir, &shape_name)?)?;
    let shape = parse_shape(&shape_text)
        .ok_or_else(|| FeatureError::SchemaMismatch(format!("{shape_name}: unparseable shape")))?;
    if shape != expected {
        return Err(FeatureError::SchemaMismatch(format!(
            "{file}: shape {shape:?}, expected {expected:?}"
        )));
    }
    let bytes = fs::read(data_path)?;
    Array::from_le_bytes(&shape, &bytes).ok_or_else(|| {
        FeatureError::SchemaMismatch(format!(
            "{file}: {} bytes do not match shape {shape:?}",
            bytes.len()
        ))
    })
}

/// Reads and validates a bundle written by [`write_bundle`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<FeatureBundle, FeatureError> {
    let path = path.as_ref();
    let manifest = read_manifest_file(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let settings = manifest.settings.clone();
    settings.validate()?;

    let cohort_bytes = fs::read(existing(dir, &manifest.files.cohort)?)?;
    let cohort = LabeledCohort::from_csv_bytes(&cohort_bytes)?;
    let actual = cohort.content_hash();
    if actual != manifest.cohort_hash {
        return Err(FeatureError::HashMismatch {
            expected: manifest.cohort_hash,
            actual,
        });
    }

    let n = cohort.len();
    let (t_len, c_len) = (settings.n_bins(), settings.n_channels());
    let s_len = settings.static_names().len();
    let wants_static = manifest.covariate_types.contains(&CovariateType::Static);
    if wants_static != settings.include_static || wants_static != manifest.files.static_.is_some() {
        return Err(FeatureError::SchemaMismatch(
            "covariate_types, files.static and settings.include_static disagree".into(),
        ));
    }
    let static_features = match &manifest.files.static_ {
        Some(file) => read_f32(dir, file, &[n, s_len])?,
        None => Array::zeros(&[n, 0]),
    };
    let temporal = read_f32(dir, &manifest.files.temporal, &[n, t_len, c_len])?;
    let mask = read_f32(dir, &manifest.files.mask, &[n, t_len, c_len])?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(FeatureError::SchemaMismatch("mask holds values other than 0/1".into()));
    }
    if temporal.data().iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::SchemaMismatch("temporal holds non-finite values".into()));
    }

    let labels = fs::read(existing(dir, &manifest.files.labels)?)?;
    if labels != cohort.labels {
        return Err(FeatureError::SchemaMismatch(
            "labels file disagrees with cohort labels".into(),
        ));
    }
    let stats = manifest.normalization_stats;
    if stats.medians.len() != c_len
        || stats.temporal.as_ref().is_some_and(|s| s.len() != c_len)
        || stats.static_.as_ref().is_some_and(|s| s.len() != s_len)
    {
        return Err(FeatureError::SchemaMismatch(
            "normalization_stats do not match the channel layout".into(),
        ));
    }

    Ok(FeatureBundle {
        outcome_name: manifest.outcome_name,
        columns: ColumnDictionary {
            static_names: settings.static_names(),
            temporal_names: settings.temporal_names(),
        },
        settings,
        cohort,
        static_features,
        temporal,
        mask,
        labels,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{evaluate_cohort, evaluate_outcome, CohortDefinition, OutcomeDefinition};
    use crate::ehr::{generate_synthetic, GeneratorSpec};

    fn bundle() -> FeatureBundle {
        let spec = GeneratorSpec {
            n_persons: 60,
            concept_count: 4,
            seed: 11,
            ..Default::default()
        };
        let store = generate_synthetic(&spec).unwrap();
        let members = evaluate_cohort(&store, &CohortDefinition::default()).unwrap();
        let labeled = evaluate_outcome(&store, &members, &OutcomeDefinition::default()).unwrap();
        let settings = CovariateSettings {
            concept_ids: spec.concept_ids(),
            ..Default::default()
        };
        extract_features(&store, &labeled, &settings).unwrap()
    }

    #[test]
    fn round_trip_and_manifest_contents() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&b, dir.path()).unwrap();
        assert!(read_manifest(&path).unwrap().bitwise_eq(&b));
        let manifest = read_manifest_file(&path).unwrap();
        assert_eq!(
            manifest.covariate_types,
            vec![CovariateType::Static, CovariateType::Temporal]
        );
        let text = fs::read_to_string(&path).unwrap();
        for key in [
            "outcome_name:",
            "covariate_types:",
            "files:",
            "settings:",
            "normalization_stats:",
            "cohort_hash:",
            "created_at:",
        ] {
            assert!(text.lines().any(|l| l.starts_with(key)), "missing {key}");
        }
    }

    #[test]
    fn temporal_only_bundle() {
        let mut b = bundle();
        let n = b.len();
        b.settings.include_static = false;
        b.static_features = Array::zeros(&[n, 0]);
        b.columns.static_names.clear();
        b.stats.static_ = None;
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&b, dir.path()).unwrap();
        let manifest = read_manifest_file(&path).unwrap();
        assert_eq!(manifest.covariate_types, vec![CovariateType::Temporal]);
        assert!(read_manifest(&path).unwrap().bitwise_eq(&b));
    }

    #[test]
    fn missing_array_is_dangling() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&bundle(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("mask.f32")).unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(FeatureError::DanglingReference(f)) if f == "mask.f32"
        ));
    }

    #[test]
    fn tampered_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&bundle(), dir.path()).unwrap();
        let mut manifest = read_manifest_file(&path).unwrap();
        manifest.cohort_hash = "0".repeat(64);
        fs::write(&path, serde_yaml::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(read_manifest(&path), Err(FeatureError::HashMismatch { .. })));
    }

    #[test]
    fn truncated_array_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_bundle(&bundle(), dir.path()).unwrap();
        let data = fs::read(dir.path().join("temporal.f32")).unwrap();
        fs::write(dir.path().join("temporal.f32"), &data[..data.len() - 4]).unwrap();
        assert!(matches!(read_manifest(&path), Err(FeatureError::SchemaMismatch(_))));
    }
}
