//! Shared CSV plumbing.

use std::io::Read;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Deserialize every row, pairing it with its 1-based line number so schema
/// errors can point at the offending line.
pub fn read_rows<T: DeserializeOwned, R: Read>(reader: R, source: &str) -> Result<Vec<(u64, T)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| schema_err(source, &e))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema_err(source, &e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = rec.deserialize::<T>(Some(&headers)).map_err(|e| Error::Schema {
            path: source.to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

pub(crate) fn schema_err(source: &str, e: &csv::Error) -> Error {
    Error::Schema {
        path: source.to_string(),
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}

/// Deserialize an optional float column where an empty cell means missing.
pub(crate) mod opt_f64 {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        match s.as_deref().map(str::trim) {
            None | Some("") | Some("NA") | Some("nan") | Some("NaN") => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(serde::de::Error::custom),
        }
    }
}
