//! A minimal longitudinal clinical data store: persons, visits, measurements and deaths,
//! plus the concept dictionary the measurements are coded against.
//!
//! The store is immutable once built. Every constructor path goes through
//! [`EhrStore::from_tables`], which checks referential integrity and temporal sanity
//! before handing out a value.

mod csv_io;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{format_ts, Timestamp};

pub use csv_io::{load_store, write_store};
pub use synthetic::{generate_synthetic, GeneratorSpec};

pub type PersonId = i64;
pub type VisitId = i64;
pub type ConceptId = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "female" => Some(Gender::Female),
            "male" => Some(Gender::Male),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisitKind {
    Inpatient,
    Outpatient,
}

impl VisitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VisitKind::Inpatient => "inpatient",
            VisitKind::Outpatient => "outpatient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inpatient" => Some(VisitKind::Inpatient),
            "outpatient" => Some(VisitKind::Outpatient),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub person_id: PersonId,
    pub birth_datetime: Timestamp,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitOccurrence {
    pub visit_id: VisitId,
    pub person_id: PersonId,
    pub start: Timestamp,
    pub end: Timestamp,
    pub visit_kind: VisitKind,
}

impl VisitOccurrence {
    pub fn duration_seconds(&self) -> i64 {
        (self.end - self.start).num_seconds()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEvent {
    pub person_id: PersonId,
    pub visit_id: Option<VisitId>,
    pub concept_id: ConceptId,
    pub value: f64,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeathRecord {
    pub person_id: PersonId,
    pub death_datetime: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub concept_id: ConceptId,
    pub name: String,
    pub unit: String,
    pub normal_low: f64,
    pub normal_high: f64,
}

/// Table names as they appear on disk, used in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    Person,
    Visit,
    Measurement,
    Death,
    Concept,
}

impl Table {
    pub const ALL: [Table; 5] = [
        Table::Person,
        Table::Visit,
        Table::Measurement,
        Table::Death,
        Table::Concept,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Table::Person => "person.csv",
            Table::Visit => "visit_occurrence.csv",
            Table::Measurement => "measurement.csv",
            Table::Death => "death.csv",
            Table::Concept => "concept.csv",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Table::Person => &["person_id", "birth_datetime", "gender"],
            Table::Visit => &["visit_id", "person_id", "start", "end", "visit_kind"],
            Table::Measurement => &["person_id", "visit_id", "concept_id", "value", "at"],
            Table::Death => &["person_id", "death_datetime"],
            Table::Concept => &["concept_id", "name", "unit", "normal_low", "normal_high"],
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

#[derive(Debug, Error)]
pub enum EhrError {
    #[error("missing table {0}")]
    MissingTable(String),
    #[error("schema mismatch in {table}: column {column}: {detail}")]
    SchemaMismatch {
        table: String,
        column: String,
        detail: String,
    },
    #[error("referential integrity violation in {table} row {row}: {detail}")]
    ReferentialIntegrityViolation {
        table: String,
        /// 1-based data row (the header is row 0).
        row: usize,
        detail: String,
    },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("unknown person {0}")]
    UnknownPerson(PersonId),
    #[error("window start after end")]
    InvalidWindow,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(table: Table, row: usize, detail: impl Into<String>) -> EhrError {
    EhrError::ReferentialIntegrityViolation {
        table: table.file_name().to_string(),
        row,
        detail: detail.into(),
    }
}

/// Validated, immutable clinical tables.
///
/// Measurements are held in canonical order `(person_id, at, concept_id, visit_id, value)`
/// so per-person windows are contiguous slices.
#[derive(Debug, Clone, PartialEq)]
pub struct EhrStore {
    persons: Vec<Person>,
    visits: Vec<VisitOccurrence>,
    measurements: Vec<MeasurementEvent>,
    deaths: Vec<DeathRecord>,
    concepts: Vec<Concept>,
    person_index: HashMap<PersonId, usize>,
    visit_index: HashMap<VisitId, usize>,
    death_index: HashMap<PersonId, usize>,
    /// person_id -> [start, end) range into `measurements`.
    measurement_ranges: HashMap<PersonId, (usize, usize)>,
    /// person_id -> indices into `visits`, ordered by (start, visit_id).
    visits_by_person: HashMap<PersonId, Vec<usize>>,
}

impl EhrStore {
    /// Validates the tables and builds the lookup indexes.
    ///
    /// Row numbers in errors refer to positions in the slices as given (1-based), which
    /// matches the data-row numbering of the CSV files when loading from disk.
    pub fn from_tables(
        mut persons: Vec<Person>,
        mut visits: Vec<VisitOccurrence>,
        measurements: Vec<MeasurementEvent>,
        mut deaths: Vec<DeathRecord>,
        mut concepts: Vec<Concept>,
    ) -> Result<Self, EhrError> {
        let mut concept_ids = HashSet::new();
        for (i, c) in concepts.iter().enumerate() {
            if !concept_ids.insert(c.concept_id) {
                return Err(violation(
                    Table::Concept,
                    i + 1,
                    format!("duplicate concept_id {}", c.concept_id),
                ));
            }
        }

        let mut birth = HashMap::with_capacity(persons.len());
        for (i, p) in persons.iter().enumerate() {
            if birth.insert(p.person_id, p.birth_datetime).is_some() {
                return Err(violation(
                    Table::Person,
                    i + 1,
                    format!("duplicate person_id {}", p.person_id),
                ));
            }
        }

        let mut death_at = HashMap::with_capacity(deaths.len());
        for (i, d) in deaths.iter().enumerate() {
            let Some(born) = birth.get(&d.person_id) else {
                return Err(violation(
                    Table::Death,
                    i + 1,
                    format!("unknown person_id {}", d.person_id),
                ));
            };
            if d.death_datetime < *born {
                return Err(violation(Table::Death, i + 1, "death before birth"));
            }
            if death_at.insert(d.person_id, d.death_datetime).is_some() {
                return Err(violation(
                    Table::Death,
                    i + 1,
                    format!("second death record for person_id {}", d.person_id),
                ));
            }
        }

        // An event of person p at time t must satisfy birth < t <= death.
        let check_event = |table: Table, row: usize, person: PersonId, t: Timestamp, what: &str| {
            let Some(born) = birth.get(&person) else {
                return Err(violation(table, row, format!("unknown person_id {person}")));
            };
            if t <= *born {
                return Err(violation(table, row, format!("{what} not after birth")));
            }
            if let Some(died) = death_at.get(&person) {
                if t > *died {
                    return Err(violation(table, row, format!("{what} after death")));
                }
            }
            Ok(())
        };

        let mut visit_ids = HashMap::with_capacity(visits.len());
        for (i, v) in visits.iter().enumerate() {
            if visit_ids.insert(v.visit_id, v.person_id).is_some() {
                return Err(violation(
                    Table::Visit,
                    i + 1,
                    format!("duplicate visit_id {}", v.visit_id),
                ));
            }
            if v.end < v.start {
                return Err(violation(Table::Visit, i + 1, "visit end before start"));
            }
            check_event(Table::Visit, i + 1, v.person_id, v.start, "visit start")?;
            check_event(Table::Visit, i + 1, v.person_id, v.end, "visit end")?;
        }

        // Same-kind visits of one person must not overlap (touching endpoints are allowed).
        {
            let mut order: Vec<usize> = (0..visits.len()).collect();
            order.sort_by_key(|&i| {
                let v = &visits[i];
                (v.person_id, v.visit_kind.as_str(), v.start, v.visit_id)
            });
            for pair in order.windows(2) {
                let (a, b) = (&visits[pair[0]], &visits[pair[1]]);
                if a.person_id == b.person_id && a.visit_kind == b.visit_kind && b.start < a.end {
                    let row = pair[0].max(pair[1]) + 1;
                    return Err(violation(
                        Table::Visit,
                        row,
                        format!(
                            "{} visits {} and {} of person {} overlap",
                            a.visit_kind.as_str(),
                            a.visit_id,
                            b.visit_id,
                            a.person_id
                        ),
                    ));
                }
            }
        }

        for (i, m) in measurements.iter().enumerate() {
            check_event(Table::Measurement, i + 1, m.person_id, m.at, "measurement")?;
            if !concept_ids.contains(&m.concept_id) {
                return Err(violation(
                    Table::Measurement,
                    i + 1,
                    format!("unknown concept_id {}", m.concept_id),
                ));
            }
            if let Some(visit) = m.visit_id {
                match visit_ids.get(&visit) {
                    None => {
                        return Err(violation(
                            Table::Measurement,
                            i + 1,
                            format!("unknown visit_id {visit}"),
                        ))
                    }
                    Some(owner) if *owner != m.person_id => {
                        return Err(violation(
                            Table::Measurement,
                            i + 1,
                            format!("visit_id {visit} belongs to another person"),
                        ))
                    }
                    Some(_) => {}
                }
            }
            if !m.value.is_finite() {
                return Err(violation(Table::Measurement, i + 1, "non-finite value"));
            }
        }

        persons.sort_by_key(|p| p.person_id);
        visits.sort_by_key(|v| v.visit_id);
        deaths.sort_by_key(|d| d.person_id);
        concepts.sort_by_key(|c| c.concept_id);
        let mut measurements = measurements;
        measurements.sort_by(canonical_measurement_order);

        Ok(Self::index(persons, visits, measurements, deaths, concepts))
    }

    fn index(
        persons: Vec<Person>,
        visits: Vec<VisitOccurrence>,
        measurements: Vec<MeasurementEvent>,
        deaths: Vec<DeathRecord>,
        concepts: Vec<Concept>,
    ) -> Self {
        let person_index = persons
            .iter()
            .enumerate()
            .map(|(i, p)| (p.person_id, i))
            .collect();
        let visit_index = visits
            .iter()
            .enumerate()
            .map(|(i, v)| (v.visit_id, i))
            .collect();
        let death_index = deaths
            .iter()
            .enumerate()
            .map(|(i, d)| (d.person_id, i))
            .collect();

        let mut measurement_ranges = HashMap::new();
        let mut start = 0;
        while start < measurements.len() {
            let person = measurements[start].person_id;
            let mut end = start;
            while end < measurements.len() && measurements[end].person_id == person {
                end += 1;
            }
            measurement_ranges.insert(person, (start, end));
            start = end;
        }

        let mut visits_by_person: HashMap<PersonId, Vec<usize>> = HashMap::new();
        for (i, v) in visits.iter().enumerate() {
            visits_by_person.entry(v.person_id).or_default().push(i);
        }
        for list in visits_by_person.values_mut() {
            list.sort_by_key(|&i| (visits[i].start, visits[i].visit_id));
        }

        Self {
            persons,
            visits,
            measurements,
            deaths,
            concepts,
            person_index,
            visit_index,
            death_index,
            measurement_ranges,
            visits_by_person,
        }
    }

    pub fn persons(&self) -> &[Person] {
        &self.persons
    }

    pub fn visits(&self) -> &[VisitOccurrence] {
        &self.visits
    }

    pub fn measurements(&self) -> &[MeasurementEvent] {
        &self.measurements
    }

    pub fn deaths(&self) -> &[DeathRecord] {
        &self.deaths
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn person(&self, id: PersonId) -> Option<&Person> {
        self.person_index.get(&id).map(|&i| &self.persons[i])
    }

    pub fn visit(&self, id: VisitId) -> Option<&VisitOccurrence> {
        self.visit_index.get(&id).map(|&i| &self.visits[i])
    }

    pub fn death(&self, person: PersonId) -> Option<&DeathRecord> {
        self.death_index.get(&person).map(|&i| &self.deaths[i])
    }

    /// Visits of one person ordered by `(start, visit_id)`.
    pub fn visits_of(&self, person: PersonId) -> impl Iterator<Item = &VisitOccurrence> {
        self.visits_by_person
            .get(&person)
            .into_iter()
            .flatten()
            .map(|&i| &self.visits[i])
    }

    /// All measurements of one person ordered by `(at, concept_id)`.
    pub fn measurements_of(&self, person: PersonId) -> &[MeasurementEvent] {
        match self.measurement_ranges.get(&person) {
            Some(&(start, end)) => &self.measurements[start..end],
            None => &[],
        }
    }

    /// Measurements with `from <= at < to`, ordered by `(at, concept_id)`.
    pub fn events_in_window(
        &self,
        person: PersonId,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<&[MeasurementEvent], EhrError> {
        if !self.person_index.contains_key(&person) {
            return Err(EhrError::UnknownPerson(person));
        }
        if from > to {
            return Err(EhrError::InvalidWindow);
        }
        let events = self.measurements_of(person);
        let lo = events.partition_point(|m| m.at < from);
        let hi = events.partition_point(|m| m.at < to);
        Ok(&events[lo..hi.max(lo)])
    }
}

fn canonical_measurement_order(a: &MeasurementEvent, b: &MeasurementEvent) -> std::cmp::Ordering {
    a.person_id
        .cmp(&b.person_id)
        .then(a.at.cmp(&b.at))
        .then(a.concept_id.cmp(&b.concept_id))
        .then(a.visit_id.cmp(&b.visit_id))
        .then(a.value.total_cmp(&b.value))
}

impl fmt::Display for MeasurementEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "person {} concept {} = {} at {}",
            self.person_id,
            self.concept_id,
            self.value,
            format_ts(&self.at)
        )
    }
}

/// Whole years elapsed from `birth` to `at`: the number of anniversaries (same month, day and
/// time of day) that have passed.
pub fn age_in_years(birth: Timestamp, at: Timestamp) -> i64 {
    use chrono::{Datelike, Timelike};
    let mut years = i64::from(at.year()) - i64::from(birth.year());
    let key = |t: Timestamp| (t.month(), t.day(), t.num_seconds_from_midnight());
    if key(at) < key(birth) {
        years -= 1;
    }
    years
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::parse_ts;

    fn ts(s: &str) -> Timestamp {
        parse_ts(s).unwrap()
    }

    fn tiny() -> (Vec<Person>, Vec<VisitOccurrence>, Vec<MeasurementEvent>, Vec<Concept>) {
        let persons = vec![Person {
            person_id: 1,
            birth_datetime: ts("1970-01-01T00:00:00Z"),
            gender: Gender::Female,
        }];
        let visits = vec![VisitOccurrence {
            visit_id: 10,
            person_id: 1,
            start: ts("2020-01-01T00:00:00Z"),
            end: ts("2020-01-04T00:00:00Z"),
            visit_kind: VisitKind::Inpatient,
        }];
        let measurements = vec![
            MeasurementEvent {
                person_id: 1,
                visit_id: Some(10),
                concept_id: 2,
                value: 1.0,
                at: ts("2020-01-01T05:00:00Z"),
            },
            MeasurementEvent {
                person_id: 1,
                visit_id: Some(10),
                concept_id: 1,
                value: 2.0,
                at: ts("2020-01-01T05:00:00Z"),
            },
            MeasurementEvent {
                person_id: 1,
                visit_id: None,
                concept_id: 1,
                value: 3.0,
                at: ts("2020-01-01T01:00:00Z"),
            },
        ];
        let concepts = vec![
            Concept {
                concept_id: 1,
                name: "a".into(),
                unit: "u".into(),
                normal_low: 0.0,
                normal_high: 1.0,
            },
            Concept {
                concept_id: 2,
                name: "b".into(),
                unit: "u".into(),
                normal_low: 0.0,
                normal_high: 1.0,
            },
        ];
        (persons, visits, measurements, concepts)
    }

    #[test]
    fn windows_are_half_open_and_sorted() {
        let (p, v, m, c) = tiny();
        let store = EhrStore::from_tables(p, v, m, vec![], c).unwrap();
        let t = ts("2020-01-01T05:00:00Z");
        assert!(store.events_in_window(1, t, t).unwrap().is_empty());
        let all = store
            .events_in_window(1, ts("1900-01-01T00:00:00Z"), ts("2100-01-01T00:00:00Z"))
            .unwrap();
        let order: Vec<_> = all.iter().map(|e| (e.value, e.concept_id)).collect();
        assert_eq!(order, vec![(3.0, 1), (2.0, 1), (1.0, 2)]);
        let upto = store
            .events_in_window(1, ts("2020-01-01T01:00:00Z"), t)
            .unwrap();
        assert_eq!(upto.len(), 1);
    }

    #[test]
    fn unknown_person_window() {
        let (p, v, m, c) = tiny();
        let store = EhrStore::from_tables(p, v, m, vec![], c).unwrap();
        let t = ts("2020-01-01T05:00:00Z");
        assert!(matches!(
            store.events_in_window(99, t, t),
            Err(EhrError::UnknownPerson(99))
        ));
    }

    #[test]
    fn rejects_events_after_death() {
        let (p, v, m, c) = tiny();
        let deaths = vec![DeathRecord {
            person_id: 1,
            death_datetime: ts("2020-01-01T03:00:00Z"),
        }];
        let err = EhrStore::from_tables(p, v, m, deaths, c).unwrap_err();
        assert!(matches!(err, EhrError::ReferentialIntegrityViolation { .. }), "{err}");
    }

    #[test]
    fn rejects_overlapping_same_kind_visits() {
        let (p, mut v, m, c) = tiny();
        let mut second = v[0].clone();
        second.visit_id = 11;
        second.start = ts("2020-01-03T00:00:00Z");
        second.end = ts("2020-01-05T00:00:00Z");
        v.push(second.clone());
        let err = EhrStore::from_tables(p.clone(), v.clone(), m.clone(), vec![], c.clone())
            .unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");

        // Different kinds may overlap.
        v[1].visit_kind = VisitKind::Outpatient;
        EhrStore::from_tables(p, v, m, vec![], c).unwrap();
    }

    #[test]
    fn age_counts_anniversaries() {
        let birth = ts("2000-06-15T12:00:00Z");
        assert_eq!(age_in_years(birth, ts("2018-06-15T11:59:59Z")), 17);
        assert_eq!(age_in_years(birth, ts("2018-06-15T12:00:00Z")), 18);
        assert_eq!(age_in_years(birth, ts("2019-01-01T00:00:00Z")), 18);
    }
}
