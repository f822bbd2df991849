//! Timestamp handling. All times are integer epoch-milliseconds.

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};

/// Timestamp of rows in tables without a time column. Visible in every snapshot.
pub const NEG_INF: i64 = i64::MIN;

/// Timestamp assigned to fact rows whose time cell is null; such rows are never visible.
pub const UNKNOWN_TIME: i64 = i64::MAX;

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// Parses an ISO-8601 date or datetime (with or without offset) into epoch milliseconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_millis());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(ndt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&ndt).timestamp_millis());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        let ndt = d.and_hms_opt(0, 0, 0)?;
        return Some(Utc.from_utc_datetime(&ndt).timestamp_millis());
    }
    None
}

/// Formats epoch milliseconds as an ISO-8601 UTC datetime with millisecond precision.
pub fn format_timestamp(ms: i64) -> String {
    match ms {
        NEG_INF => "-inf".to_string(),
        UNKNOWN_TIME => "unknown".to_string(),
        _ => match Utc.timestamp_millis_opt(ms).single() {
            Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3f").to_string(),
            None => ms.to_string(),
        },
    }
}

/// Day of week (0 = Monday) and fractional day of year for periodic encodings.
pub fn calendar_phase(ms: i64) -> Option<(f64, f64)> {
    use chrono::Datelike;
    let dt = Utc.timestamp_millis_opt(ms).single()?;
    let dow = dt.weekday().num_days_from_monday() as f64;
    let doy = dt.ordinal0() as f64;
    Some((dow, doy))
}
