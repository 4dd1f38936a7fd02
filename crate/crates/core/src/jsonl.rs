//! Line-delimited JSON helpers shared by the dataset, embedding and probe readers.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Visit every nonempty line as a JSON object, passing its 1-based line number.
pub(crate) fn for_each_object<R, F>(reader: R, mut visit: F) -> Result<()>
where
    R: BufRead,
    F: FnMut(usize, Map<String, Value>) -> Result<()>,
{
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let number = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::parse(number, None, format!("invalid JSON: {e}")))?;
        match value {
            Value::Object(object) => visit(number, object)?,
            _ => return Err(Error::parse(number, None, "record must be a JSON object")),
        }
    }
    Ok(())
}

/// Deserialize every nonempty line into `T`.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record = serde_json::from_str(trimmed)
            .map_err(|e| Error::parse(idx + 1, None, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, W, I>(mut writer: W, records: I) -> std::io::Result<()>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    for record in records {
        serde_json::to_writer(&mut writer, record).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub(crate) fn required_str(object: &Map<String, Value>, field: &str, line: usize) -> Result<String> {
    match object.get(field) {
        None | Some(Value::Null) => Err(Error::parse(line, Some(field), "missing")),
        Some(Value::String(s)) if s.trim().is_empty() => {
            Err(Error::parse(line, Some(field), "must be nonempty"))
        }
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::parse(line, Some(field), "must be a string")),
    }
}

/// Deserialize every nonempty line into `T` and run `check` on it; failures
/// carry the line number.
pub fn read_jsonl_checked<T, R, F>(reader: R, mut check: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    R: BufRead,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(trimmed)
            .map_err(|e| Error::parse(idx + 1, None, e.to_string()))?;
        check(&record).map_err(|m| Error::parse(idx + 1, None, m))?;
        out.push(record);
    }
    Ok(out)
}
