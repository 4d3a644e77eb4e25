use std::fs::File;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use super::*;
use crate::time::parse_ts;

/// Loads and validates the five CSV tables under `root`.
pub fn load_store(root: impl AsRef<Path>) -> Result<EhrStore, EhrError> {
    let root = root.as_ref();
    let mut tables = Vec::with_capacity(Table::ALL.len());
    for table in Table::ALL {
        let path = root.join(table.file_name());
        if !path.is_file() {
            return Err(EhrError::MissingTable(table.file_name().to_string()));
        }
        tables.push((table, read_rows(table, &path)?));
    }
    let mut rows = tables.into_iter().map(|(_, rows)| rows);
    let (persons, visits, measurements, deaths, concepts) = (
        rows.next().unwrap(),
        rows.next().unwrap(),
        rows.next().unwrap(),
        rows.next().unwrap(),
        rows.next().unwrap(),
    );

    let persons = persons
        .iter()
        .map(|r| {
            let f = Fields::new(Table::Person, r);
            Ok(Person {
                person_id: f.int(0)?,
                birth_datetime: f.ts(1)?,
                gender: f.parse(2, Gender::parse, "female|male")?,
            })
        })
        .collect::<Result<Vec<_>, EhrError>>()?;
    let visits = visits
        .iter()
        .map(|r| {
            let f = Fields::new(Table::Visit, r);
            Ok(VisitOccurrence {
                visit_id: f.int(0)?,
                person_id: f.int(1)?,
                start: f.ts(2)?,
                end: f.ts(3)?,
                visit_kind: f.parse(4, VisitKind::parse, "inpatient|outpatient")?,
            })
        })
        .collect::<Result<Vec<_>, EhrError>>()?;
    let measurements = measurements
        .iter()
        .map(|r| {
            let f = Fields::new(Table::Measurement, r);
            Ok(MeasurementEvent {
                person_id: f.int(0)?,
                visit_id: f.opt_int(1)?,
                concept_id: f.int(2)?,
                value: f.real(3)?,
                at: f.ts(4)?,
            })
        })
        .collect::<Result<Vec<_>, EhrError>>()?;
    let deaths = deaths
        .iter()
        .map(|r| {
            let f = Fields::new(Table::Death, r);
            Ok(DeathRecord {
                person_id: f.int(0)?,
                death_datetime: f.ts(1)?,
            })
        })
        .collect::<Result<Vec<_>, EhrError>>()?;
    let concepts = concepts
        .iter()
        .map(|r| {
            let f = Fields::new(Table::Concept, r);
            Ok(Concept {
                concept_id: f.int(0)?,
                name: f.text(1).to_string(),
                unit: f.text(2).to_string(),
                normal_low: f.real(3)?,
                normal_high: f.real(4)?,
            })
        })
        .collect::<Result<Vec<_>, EhrError>>()?;

    EhrStore::from_tables(persons, visits, measurements, deaths, concepts)
}

fn schema_error(table: Table, column: &str, detail: impl Into<String>) -> EhrError {
    EhrError::SchemaMismatch {
        table: table.file_name().to_string(),
        column: column.to_string(),
        detail: detail.into(),
    }
}

fn read_rows(table: Table, path: &Path) -> Result<Vec<StringRecord>, EhrError> {
    let mut reader = ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_to_io)?;
    let header = reader.headers().map_err(csv_to_io)?.clone();
    let expected = table.columns();
    for (i, want) in expected.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(schema_error(table, got, format!("expected column {want}"))),
            None => return Err(schema_error(table, want, "column missing")),
        }
    }
    if header.len() > expected.len() {
        return Err(schema_error(table, &header[expected.len()], "unexpected column"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| schema_error(table, "*", e.to_string()))?;
        rows.push(record);
    }
    Ok(rows)
}

fn csv_to_io(err: csv::Error) -> EhrError {
    match err.into_kind() {
        csv::ErrorKind::Io(io) => EhrError::Io(io),
        other => EhrError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{other:?}"),
        )),
    }
}

struct Fields<'a> {
    table: Table,
    record: &'a StringRecord,
}

impl<'a> Fields<'a> {
    fn new(table: Table, record: &'a StringRecord) -> Self {
        Self { table, record }
    }

    fn column(&self, i: usize) -> &'static str {
        self.table.columns()[i]
    }

    fn text(&self, i: usize) -> &'a str {
        self.record.get(i).unwrap_or("")
    }

    fn bad(&self, i: usize, what: &str) -> EhrError {
        let row = self.record.position().map(|p| p.line() - 1).unwrap_or(0);
        schema_error(
            self.table,
            self.column(i),
            format!("row {row}: expected {what}, found {:?}", self.text(i)),
        )
    }

    fn int(&self, i: usize) -> Result<i64, EhrError> {
        self.text(i).trim().parse().map_err(|_| self.bad(i, "integer"))
    }

    fn opt_int(&self, i: usize) -> Result<Option<i64>, EhrError> {
        let raw = self.text(i).trim();
        if raw.is_empty() {
            Ok(None)
        } else {
            raw.parse().map(Some).map_err(|_| self.bad(i, "integer or empty"))
        }
    }

    fn real(&self, i: usize) -> Result<f64, EhrError> {
        self.text(i).trim().parse().map_err(|_| self.bad(i, "real number"))
    }

    fn ts(&self, i: usize) -> Result<Timestamp, EhrError> {
        parse_ts(self.text(i)).ok_or_else(|| self.bad(i, "UTC timestamp YYYY-MM-DDTHH:MM:SSZ"))
    }

    fn parse<T>(&self, i: usize, f: impl Fn(&str) -> Option<T>, what: &str) -> Result<T, EhrError> {
        f(self.text(i).trim()).ok_or_else(|| self.bad(i, what))
    }
}

/// Writes the store as the five CSV tables under `root` (created if absent).
pub fn write_store(store: &EhrStore, root: impl AsRef<Path>) -> Result<(), EhrError> {
    let root = root.as_ref();
    std::fs::create_dir_all(root)?;
    let open = |table: Table| -> Result<csv::Writer<File>, EhrError> {
        let file = File::create(root.join(table.file_name()))?;
        let mut w = WriterBuilder::new().from_writer(file);
        w.write_record(table.columns()).map_err(csv_to_io)?;
        Ok(w)
    };

    let mut w = open(Table::Person)?;
    for p in store.persons() {
        w.write_record([
            p.person_id.to_string(),
            format_ts(&p.birth_datetime),
            p.gender.as_str().to_string(),
        ])
        .map_err(csv_to_io)?;
    }
    w.flush()?;

    let mut w = open(Table::Visit)?;
    for v in store.visits() {
        w.write_record([
            v.visit_id.to_string(),
            v.person_id.to_string(),
            format_ts(&v.start),
            format_ts(&v.end),
            v.visit_kind.as_str().to_string(),
        ])
        .map_err(csv_to_io)?;
    }
    w.flush()?;

    let mut w = open(Table::Measurement)?;
    for m in store.measurements() {
        w.write_record([
            m.person_id.to_string(),
            m.visit_id.map(|v| v.to_string()).unwrap_or_default(),
            m.concept_id.to_string(),
            m.value.to_string(),
            format_ts(&m.at),
        ])
        .map_err(csv_to_io)?;
    }
    w.flush()?;

    let mut w = open(Table::Death)?;
    for d in store.deaths() {
        w.write_record([d.person_id.to_string(), format_ts(&d.death_datetime)])
            .map_err(csv_to_io)?;
    }
    w.flush()?;

    let mut w = open(Table::Concept)?;
    for c in store.concepts() {
        w.write_record([
            c.concept_id.to_string(),
            c.name.clone(),
            c.unit.clone(),
            c.normal_low.to_string(),
            c.normal_high.to_string(),
        ])
        .map_err(csv_to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, table: Table, body: &str) {
        let header = table.columns().join(",");
        std::fs::write(dir.join(table.file_name()), format!("{header}\n{body}")).unwrap();
    }

    fn empty_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for t in Table::ALL {
            write(dir.path(), t, "");
        }
        dir
    }

    #[test]
    fn headers_only_is_empty_store() {
        let dir = empty_dir();
        let store = load_store(dir.path()).unwrap();
        assert_eq!(store.persons().len(), 0);
    }

    #[test]
    fn missing_table() {
        let dir = empty_dir();
        std::fs::remove_file(dir.path().join("death.csv")).unwrap();
        assert!(matches!(load_store(dir.path()), Err(EhrError::MissingTable(t)) if t == "death.csv"));
    }

    #[test]
    fn schema_mismatch_names_column() {
        let dir = empty_dir();
        std::fs::write(
            dir.path().join("person.csv"),
            "person_id,birth_date,gender\n",
        )
        .unwrap();
        match load_store(dir.path()) {
            Err(EhrError::SchemaMismatch { column, .. }) => assert_eq!(column, "birth_date"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_names_column() {
        let dir = empty_dir();
        write(dir.path(), Table::Person, "1,yesterday,female\n");
        match load_store(dir.path()) {
            Err(EhrError::SchemaMismatch { column, .. }) => assert_eq!(column, "birth_datetime"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn measurement_for_absent_person() {
        let dir = empty_dir();
        write(dir.path(), Table::Person, "1,1980-01-01T00:00:00Z,male\n");
        write(dir.path(), Table::Concept, "5,hr,bpm,60,100\n");
        write(
            dir.path(),
            Table::Measurement,
            "1,,5,70,2020-01-01T00:00:00Z\n999,,5,80,2020-01-01T00:00:00Z\n",
        );
        match load_store(dir.path()) {
            Err(EhrError::ReferentialIntegrityViolation { table, row, .. }) => {
                assert_eq!(table, "measurement.csv");
                assert_eq!(row, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quoted_fields_are_accepted() {
        let dir = empty_dir();
        write(dir.path(), Table::Concept, "5,\"heart rate, apical\",bpm,60,100\n");
        let store = load_store(dir.path()).unwrap();
        assert_eq!(store.concepts()[0].name, "heart rate, apical");
    }
}
