//! Result-file helpers.
//!
//! CSV files start with one `# schema: <name>/<version>` comment line, then a
//! header row. JSON files are objects carrying `schema` and `schema_version`
//! keys. Keys are written sorted so files are byte-stable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// 17 significant digits, round-trippable.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.16e}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn csv_writer<W: Write>(mut out: W, schema: &str) -> std::io::Result<csv::Writer<W>> {
    writeln!(out, "# schema: {schema}/{SCHEMA_VERSION}")?;
    Ok(csv::Writer::from_writer(out))
}

pub fn create_csv(path: &Path, schema: &str) -> std::io::Result<csv::Writer<BufWriter<File>>> {
    csv_writer(BufWriter::new(File::create(path)?), schema)
}

/// Serializes `payload` (must be a JSON object) with schema tags, keys sorted.
pub fn to_json_value<T: Serialize>(schema: &str, payload: &T) -> Value {
    let mut v = serde_json::to_value(payload).expect("serializable payload");
    if let Value::Object(map) = &mut v {
        map.insert("schema".into(), Value::String(schema.into()));
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    }
    sort_keys(v)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Replaces non-finite floats, which JSON cannot carry, by strings.
pub fn json_f64(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else {
        Value::String(fmt_f64(x))
    }
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, payload: &T) -> std::io::Result<()> {
    let v = to_json_value(schema, payload);
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &v)?;
    writeln!(f)?;
    f.flush()
}

/// Canonical compact rendering with sorted keys; the input to digests.
pub fn canonical_json(v: &Value) -> String {
    serde_json::to_string(&sort_keys(v.clone())).expect("json")
}
