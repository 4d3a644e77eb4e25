//! Target and outcome cohort evaluation.
//!
//! The target cohort selects adult first hospitalizations of a minimum length with early
//! measurements; the outcome labels each member by death inside a window anchored at the
//! admission time.

use std::io::Write;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ehr::{age_in_years, EhrStore, PersonId, VisitId, VisitKind};
use crate::time::{format_ts, parse_ts, Timestamp};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid definition: {0}")]
    InvalidDefinition(String),
    #[error("unknown member: person {person_id} visit {visit_id}")]
    UnknownMember { person_id: PersonId, visit_id: VisitId },
    #[error("malformed cohort file: {0}")]
    Malformed(String),
    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortDefinition {
    pub min_age_years: i64,
    pub first_inpatient_only: bool,
    pub min_visit_duration_hours: i64,
    pub require_measurement_within_hours: Option<i64>,
}

impl Default for CohortDefinition {
    fn default() -> Self {
        Self {
            min_age_years: 18,
            first_inpatient_only: true,
            min_visit_duration_hours: 48,
            require_measurement_within_hours: Some(48),
        }
    }
}

impl CohortDefinition {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.min_visit_duration_hours <= 0 {
            return Err(CohortError::InvalidDefinition(
                "min_visit_duration_hours must be positive".into(),
            ));
        }
        if let Some(within) = self.require_measurement_within_hours {
            if within <= 0 || within > self.min_visit_duration_hours {
                return Err(CohortError::InvalidDefinition(
                    "require_measurement_within_hours must lie in (0, min_visit_duration_hours]"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self, CohortError> {
        let def: Self = serde_yaml::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeDefinition {
    pub death_in_hospital: bool,
    pub within_days_of_index: i64,
    /// With `death_in_hospital`, also count deaths after the recorded discharge as long as
    /// they fall inside the outcome window.
    pub include_post_discharge: bool,
}

impl Default for OutcomeDefinition {
    fn default() -> Self {
        Self {
            death_in_hospital: true,
            within_days_of_index: 30,
            include_post_discharge: true,
        }
    }
}

impl OutcomeDefinition {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.within_days_of_index <= 0 {
            return Err(CohortError::InvalidDefinition(
                "within_days_of_index must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self, CohortError> {
        let def: Self = serde_yaml::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortMember {
    pub person_id: PersonId,
    pub index_datetime: Timestamp,
    pub visit_id: VisitId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledCohort {
    pub members: Vec<CohortMember>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub size: usize,
    pub positives: usize,
    /// `None` for an empty cohort.
    pub prevalence: Option<f64>,
}

/// Members sorted by `(person_id, index_datetime, visit_id)`.
pub fn evaluate_cohort(
    store: &EhrStore,
    def: &CohortDefinition,
) -> Result<Vec<CohortMember>, CohortError> {
    def.validate()?;
    let min_duration = def.min_visit_duration_hours * 3600;
    let mut members = Vec::new();
    for person in store.persons() {
        let inpatient = store
            .visits_of(person.person_id)
            .filter(|v| v.visit_kind == VisitKind::Inpatient);
        let candidates: Vec<_> = if def.first_inpatient_only {
            inpatient.take(1).collect()
        } else {
            inpatient.collect()
        };
        for visit in candidates {
            if age_in_years(person.birth_datetime, visit.start) < def.min_age_years {
                continue;
            }
            if visit.duration_seconds() < min_duration {
                continue;
            }
            if let Some(hours) = def.require_measurement_within_hours {
                let to = visit.start + Duration::hours(hours);
                let events = store
                    .events_in_window(person.person_id, visit.start, to)
                    .expect("person exists");
                if events.is_empty() {
                    continue;
                }
            }
            members.push(CohortMember {
                person_id: person.person_id,
                index_datetime: visit.start,
                visit_id: visit.visit_id,
            });
        }
    }
    Ok(members)
}

pub fn evaluate_outcome(
    store: &EhrStore,
    members: &[CohortMember],
    def: &OutcomeDefinition,
) -> Result<LabeledCohort, CohortError> {
    def.validate()?;
    let window = Duration::days(def.within_days_of_index);
    let mut labels = Vec::with_capacity(members.len());
    for m in members {
        let unknown = || CohortError::UnknownMember {
            person_id: m.person_id,
            visit_id: m.visit_id,
        };
        let visit = store.visit(m.visit_id).ok_or_else(unknown)?;
        if visit.person_id != m.person_id {
            return Err(unknown());
        }
        let label = match store.death(m.person_id) {
            Some(death) => {
                let at = death.death_datetime;
                let in_window = m.index_datetime <= at && at < m.index_datetime + window;
                let in_hospital =
                    !def.death_in_hospital || at <= visit.end || def.include_post_discharge;
                in_window && in_hospital
            }
            None => false,
        };
        labels.push(u8::from(label));
    }
    Ok(LabeledCohort {
        members: members.to_vec(),
        labels,
    })
}

pub fn cohort_stats(labeled: &LabeledCohort) -> CohortStats {
    let size = labeled.labels.len();
    let positives = labeled.labels.iter().filter(|&&l| l == 1).count();
    CohortStats {
        size,
        positives,
        prevalence: (size > 0).then(|| positives as f64 / size as f64),
    }
}

const COHORT_HEADER: &str = "person_id,index_datetime,visit_id,label";

impl LabeledCohort {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Canonical `cohort.csv` bytes: header plus one `\n`-terminated row per member.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 * (self.members.len() + 1));
        writeln!(out, "{COHORT_HEADER}").unwrap();
        for (m, label) in self.members.iter().zip(&self.labels) {
            writeln!(
                out,
                "{},{},{},{}",
                m.person_id,
                format_ts(&m.index_datetime),
                m.visit_id,
                label
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self, CohortError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CohortError::Malformed(e.to_string()))?;
        let mut lines = text.lines();
        if lines.next() != Some(COHORT_HEADER) {
            return Err(CohortError::Malformed(format!(
                "expected header {COHORT_HEADER}"
            )));
        }
        let mut cohort = LabeledCohort::default();
        for (i, line) in lines.enumerate() {
            let bad = || CohortError::Malformed(format!("row {}: {line:?}", i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let label: u8 = fields[3].parse().map_err(|_| bad())?;
            if label > 1 {
                return Err(bad());
            }
            cohort.members.push(CohortMember {
                person_id: fields[0].parse().map_err(|_| bad())?,
                index_datetime: parse_ts(fields[1]).ok_or_else(bad)?,
                visit_id: fields[2].parse().map_err(|_| bad())?,
            });
            cohort.labels.push(label);
        }
        Ok(cohort)
    }

    /// Lowercase hex SHA-256 of [`Self::to_csv_bytes`].
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{Concept, DeathRecord, Gender, MeasurementEvent, Person, VisitOccurrence};
    use crate::time::parse_ts;

    fn ts(s: &str) -> Timestamp {
        parse_ts(s).unwrap()
    }

    fn concept() -> Concept {
        Concept {
            concept_id: 1,
            name: "hr".into(),
            unit: "bpm".into(),
            normal_low: 60.0,
            normal_high: 100.0,
        }
    }

    /// One person born `birth`, admitted 2020-03-01 for `hours`, one measurement 1h in.
    fn single(birth: &str, hours: i64, death: Option<&str>) -> EhrStore {
        let start = ts("2020-03-01T00:00:00Z");
        EhrStore::from_tables(
            vec![Person {
                person_id: 1,
                birth_datetime: ts(birth),
                gender: Gender::Male,
            }],
            vec![VisitOccurrence {
                visit_id: 7,
                person_id: 1,
                start,
                end: start + Duration::hours(hours),
                visit_kind: VisitKind::Inpatient,
            }],
            vec![MeasurementEvent {
                person_id: 1,
                visit_id: Some(7),
                concept_id: 1,
                value: 80.0,
                at: start + Duration::hours(1),
            }],
            death
                .map(|d| DeathRecord {
                    person_id: 1,
                    death_datetime: ts(d),
                })
                .into_iter()
                .collect(),
            vec![concept()],
        )
        .unwrap()
    }

    #[test]
    fn adult_boundary() {
        let def = CohortDefinition::default();
        let minor = single("2002-03-01T00:00:01Z", 72, None);
        assert!(evaluate_cohort(&minor, &def).unwrap().is_empty());
        let adult = single("2002-03-01T00:00:00Z", 72, None);
        assert_eq!(evaluate_cohort(&adult, &def).unwrap().len(), 1);
    }

    #[test]
    fn two_day_stay_boundary() {
        let def = CohortDefinition::default();
        let short = single("1960-01-01T00:00:00Z", 47, None);
        assert!(evaluate_cohort(&short, &def).unwrap().is_empty());
        let enough = single("1960-01-01T00:00:00Z", 48, None);
        let members = evaluate_cohort(&enough, &def).unwrap();
        assert_eq!(members.len(), 1);
        assert_eq!(members[0].index_datetime, ts("2020-03-01T00:00:00Z"));
        assert_eq!(members[0].visit_id, 7);
    }

    #[test]
    fn day_thirty_boundary() {
        let def = OutcomeDefinition::default();
        let cohort_def = CohortDefinition::default();
        for (death, expect) in [
            (None, 0),
            (Some("2020-03-30T23:59:59Z"), 1),
            (Some("2020-03-31T00:00:00Z"), 0),
            (Some("2020-04-01T00:00:00Z"), 0),
        ] {
            let store = single("1960-01-01T00:00:00Z", 48, death);
            let members = evaluate_cohort(&store, &cohort_def).unwrap();
            let labeled = evaluate_outcome(&store, &members, &def).unwrap();
            assert_eq!(labeled.labels, vec![expect], "death {death:?}");
        }
    }

    #[test]
    fn post_discharge_conjunct_is_configurable() {
        let store = single("1960-01-01T00:00:00Z", 48, Some("2020-03-10T00:00:00Z"));
        let members = evaluate_cohort(&store, &CohortDefinition::default()).unwrap();
        let strict = OutcomeDefinition {
            include_post_discharge: false,
            ..Default::default()
        };
        assert_eq!(evaluate_outcome(&store, &members, &strict).unwrap().labels, vec![0]);
        assert_eq!(
            evaluate_outcome(&store, &members, &OutcomeDefinition::default())
                .unwrap()
                .labels,
            vec![1]
        );
    }

    #[test]
    fn unknown_member() {
        let store = single("1960-01-01T00:00:00Z", 48, None);
        let ghost = CohortMember {
            person_id: 1,
            index_datetime: ts("2020-03-01T00:00:00Z"),
            visit_id: 99,
        };
        assert!(matches!(
            evaluate_outcome(&store, &[ghost], &OutcomeDefinition::default()),
            Err(CohortError::UnknownMember { visit_id: 99, .. })
        ));
    }

    #[test]
    fn stats() {
        let member = CohortMember {
            person_id: 1,
            index_datetime: ts("2020-03-01T00:00:00Z"),
            visit_id: 1,
        };
        let cohort = LabeledCohort {
            members: vec![member; 10],
            labels: vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
        };
        let s = cohort_stats(&cohort);
        assert_eq!((s.size, s.positives), (10, 3));
        assert!((s.prevalence.unwrap() - 0.3).abs() < 1e-15);
        let empty = cohort_stats(&LabeledCohort::default());
        assert_eq!(empty.size, 0);
        assert_eq!(empty.prevalence, None);
    }

    #[test]
    fn definitions_yaml_round_trip() {
        let def = CohortDefinition {
            require_measurement_within_hours: None,
            ..Default::default()
        };
        assert_eq!(CohortDefinition::from_yaml(&def.to_yaml()).unwrap(), def);
        let text = "min_age_years: 21\n";
        let parsed = CohortDefinition::from_yaml(text).unwrap();
        assert_eq!(parsed.min_age_years, 21);
        assert_eq!(parsed.min_visit_duration_hours, 48);
        let out = OutcomeDefinition::from_yaml("within_days_of_index: 14\n").unwrap();
        assert_eq!(out.within_days_of_index, 14);
        assert!(OutcomeDefinition::from_yaml("within_days_of_index: 0\n").is_err());
        assert!(CohortDefinition::from_yaml(
            "min_visit_duration_hours: 24\nrequire_measurement_within_hours: 48\n"
        )
        .is_err());
    }

    #[test]
    fn cohort_csv_round_trip() {
        let store = single("1960-01-01T00:00:00Z", 48, Some("2020-03-03T00:00:00Z"));
        let members = evaluate_cohort(&store, &CohortDefinition::default()).unwrap();
        let labeled = evaluate_outcome(&store, &members, &OutcomeDefinition::default()).unwrap();
        let bytes = labeled.to_csv_bytes();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            "person_id,index_datetime,visit_id,label\n1,2020-03-01T00:00:00Z,7,1\n"
        );
        assert_eq!(LabeledCohort::from_csv_bytes(&bytes).unwrap(), labeled);
        assert_eq!(labeled.content_hash().len(), 64);
    }
}
