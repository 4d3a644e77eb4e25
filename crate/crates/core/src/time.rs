//! UTC timestamps with second precision, serialized as ISO-8601 (`2024-01-31T08:00:00Z`).

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

const FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

pub fn format_ts(ts: &Timestamp) -> String {
    ts.format(FORMAT).to_string()
}

pub fn parse_ts(s: &str) -> Option<Timestamp> {
    NaiveDateTime::parse_from_str(s.trim(), FORMAT)
        .ok()
        .map(|naive| Utc.from_utc_datetime(&naive))
}

/// Builds a timestamp from unix seconds. Panics only outside chrono's supported range.
pub fn from_unix(secs: i64) -> Timestamp {
    Utc.timestamp_opt(secs, 0).single().expect("timestamp in range")
}

/// Serde adapter for the canonical text form.
pub mod serde_ts {
    use super::{format_ts, parse_ts, Timestamp};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_ts(&raw).ok_or_else(|| D::Error::custom(format!("invalid timestamp {raw:?}")))
    }
}
