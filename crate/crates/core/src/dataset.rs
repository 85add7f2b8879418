//! Reading and writing entity collections as CSV or JSON lines.

use std::collections::HashMap;

use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};
use crate::schema::{Cell, EntityInstance, EntitySchema, LeafKind, Value};

pub const DEFAULT_MISSING: &str = "NA";

/// Parse CSV whose header names leaf paths. Leaves without a column are Missing.
pub fn read_csv(text: &str, schema: &EntitySchema, missing: &str) -> Result<Vec<EntityInstance>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut columns = Vec::with_capacity(header.len());
    for name in &header {
        columns.push(schema.leaf_index(name).ok_or_else(|| Error::schema(format!("column `{name}` is not a schema leaf")))?);
    }
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("malformed csv at row {}: {e}", row + 1)))?;
        if rec.len() != header.len() {
            return Err(Error::data(format!("ragged csv: row {} has {} fields", row + 1, rec.len())));
        }
        let mut cells = vec![Cell::Missing; schema.dim()];
        for (field, &leaf) in rec.iter().zip(&columns) {
            cells[leaf] = schema.parse_cell(leaf, field, missing)?;
        }
        out.push(EntityInstance::new(cells));
    }
    Ok(out)
}

/// Write entities as CSV with one column per leaf. Missing and Masked cells are empty.
pub fn write_csv(entities: &[EntityInstance], schema: &EntitySchema) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(schema.leaves().iter().map(|l| l.path.as_str()))?;
    for e in entities {
        schema.check_width(e)?;
        let row: Vec<String> =
            e.cells.iter().enumerate().map(|(i, c)| schema.format_cell(i, c).unwrap_or_default()).collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

/// Parse JSON lines with nested objects mirroring the schema tree. Absent keys and
/// `null` are Missing.
pub fn read_jsonl(text: &str, schema: &EntitySchema) -> Result<Vec<EntityInstance>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Json = serde_json::from_str(line).map_err(|e| Error::data(format!("line {}: {e}", line_no + 1)))?;
        let mut flat = HashMap::new();
        flatten("", &doc, &mut flat)?;
        let mut cells = vec![Cell::Missing; schema.dim()];
        for (path, v) in flat {
            let i = schema.require_leaf(&path)?;
            cells[i] = json_cell(schema, i, v)?;
        }
        out.push(EntityInstance::new(cells));
    }
    Ok(out)
}

fn flatten<'a>(prefix: &str, doc: &'a Json, out: &mut HashMap<String, &'a Json>) -> Result<()> {
    match doc {
        Json::Object(m) => {
            for (k, v) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if v.is_object() {
                    flatten(&path, v, out)?;
                } else {
                    out.insert(path, v);
                }
            }
            Ok(())
        }
        _ => Err(Error::data("each JSON line must be an object")),
    }
}

fn json_cell(schema: &EntitySchema, i: usize, v: &Json) -> Result<Cell> {
    let leaf = schema.leaf(i);
    let cell = match (&leaf.kind, v) {
        (_, Json::Null) => Cell::Missing,
        (LeafKind::Numerical { .. }, Json::Number(n)) => {
            Cell::Present(Value::Num(n.as_f64().ok_or_else(|| Error::data("number out of range"))?))
        }
        (_, Json::String(s)) => schema.parse_cell(i, s, "\u{0}")?,
        (LeafKind::Categorical { .. }, other) => schema.parse_cell(i, &other.to_string(), "\u{0}")?,
        _ => return Err(Error::data(format!("invalid JSON value {v} for `{}`", leaf.path))),
    };
    Ok(cell)
}

/// Serialize one entity as a nested JSON object; Missing and Masked leaves are omitted.
pub fn entity_to_json(entity: &EntityInstance, schema: &EntitySchema) -> Json {
    let mut root = Map::new();
    for (i, (leaf, cell)) in schema.leaves().iter().zip(&entity.cells).enumerate() {
        let value = match cell {
            Cell::Present(Value::Num(x)) => serde_json::Number::from_f64(*x).map(Json::Number),
            Cell::Present(_) => schema.format_cell(i, cell).map(Json::String),
            _ => None,
        };
        let Some(value) = value else { continue };
        let segs: Vec<&str> = leaf.path.split('.').collect();
        let mut node = &mut root;
        for seg in &segs[..segs.len() - 1] {
            node = node
                .entry(seg.to_string())
                .or_insert_with(|| Json::Object(Map::new()))
                .as_object_mut()
                .expect("composite node is an object");
        }
        node.insert(segs[segs.len() - 1].to_string(), value);
    }
    Json::Object(root)
}

pub fn write_jsonl(entities: &[EntityInstance], schema: &EntitySchema) -> String {
    let mut s = String::new();
    for e in entities {
        s.push_str(&entity_to_json(e, schema).to_string());
        s.push('\n');
    }
    s
}

/// Read a dataset, choosing the parser by file extension.
pub fn read_path(path: &std::path::Path, schema: &EntitySchema, missing: &str) -> Result<Vec<EntityInstance>> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => read_jsonl(&text, schema),
        _ => read_csv(&text, schema, missing),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{infer_schema_from_csv, InferOptions};

    const CSV: &str = "launch.day,launch.year,oem,name\n3,2001.5,b,Galaxy S\n,1999,a,NA\n";

    #[test]
    fn csv_roundtrip() {
        let schema = infer_schema_from_csv(CSV, &InferOptions::default()).unwrap();
        let rows = read_csv(CSV, &schema, DEFAULT_MISSING).unwrap();
        assert_eq!(rows[1].cells[0], Cell::Missing);
        assert_eq!(rows[1].cells[3], Cell::Missing);
        let out = write_csv(&rows, &schema).unwrap();
        assert_eq!(read_csv(&out, &schema, DEFAULT_MISSING).unwrap(), rows);
    }

    #[test]
    fn jsonl_mirrors_tree() {
        let schema = infer_schema_from_csv(CSV, &InferOptions::default()).unwrap();
        let rows = read_csv(CSV, &schema, DEFAULT_MISSING).unwrap();
        let text = write_jsonl(&rows, &schema);
        assert!(text.lines().next().unwrap().contains(r#""launch":{"day":3.0,"year":2001.5}"#), "{text}");
        assert_eq!(read_jsonl(&text, &schema).unwrap(), rows);
    }

    #[test]
    fn unknown_column_is_schema_error() {
        let schema = infer_schema_from_csv(CSV, &InferOptions::default()).unwrap();
        assert!(matches!(read_csv("bogus\n1\n", &schema, DEFAULT_MISSING), Err(Error::Schema(_))));
    }
}
