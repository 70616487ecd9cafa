//! Output files: JSON and CSV with 17 significant digits, and binary node
//! fields behind a JSON header. Every file is written to a temporary file in
//! the target directory and renamed into place.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::experiments::StudyResult;

/// Magic line at the start of a field file.
pub const FIELD_MAGIC: &[u8; 8] = b"HHFIELD1";

/// `x` with 17 significant digits, `nan`/`inf`/`-inf` otherwise.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Pretty JSON with floats in [`fmt17`] notation.
struct Digits17<'a>(PrettyFormatter<'a>);

impl Formatter for Digits17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Non-finite floats become `null`, as in plain `serde_json`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Digits17(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("JSON is UTF-8"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("CSV is UTF-8")
}

/// Header `label,<parameter>,<columns...>,residual`, then one line per row.
pub fn study_csv(study: &StudyResult) -> String {
    let mut header = vec!["label".to_string(), study.parameter.clone()];
    header.extend(study.columns.iter().cloned());
    header.push("residual".into());
    let rows: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|row| {
            let mut cells = vec![row.label.clone(), fmt17(row.parameter)];
            cells.extend(row.values.iter().map(|v| fmt17(*v)));
            cells.push(fmt17(row.residual));
            cells
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// Generic CSV from a header and string cells.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    csv_bytes(&header, rows)
}

/// Field file layout: the 8-byte magic, the header length as a
/// little-endian `u64`, the JSON header, then the values as little-endian
/// `f64`.
pub fn encode_field<H: Serialize>(header: &H, values: &[f64]) -> Result<Vec<u8>> {
    let head = to_json(header)?;
    let mut out = Vec::with_capacity(16 + head.len() + 8 * values.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(head.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_field<H: Serialize>(path: &Path, header: &H, values: &[f64]) -> Result<()> {
    write_atomic(path, &encode_field(header, values)?)
}

pub fn decode_field(bytes: &[u8]) -> Result<(serde_json::Value, Vec<f64>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::InvalidInput("not a field file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len || (r.len() - len) % 8 != 0 {
        return Err(Error::InvalidInput("truncated field file".into()));
    }
    let header = serde_json::from_slice(&r[..len])?;
    let values = r[len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }

    #[test]
    fn json_uses_fixed_digits_and_parses_back() {
        let v = json!({"b": 0.1, "a": [1.0, 2], "n": f64::NAN});
        let s = to_json(&v).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["b"].as_f64(), Some(0.1));
        assert!(back["n"].is_null());
    }

    #[test]
    fn field_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fields").join("f.bin");
        let vals = vec![1.5, -0.25, 1e-300];
        write_field(&path, &json!({"shape": [3]}), &vals).unwrap();
        let (h, v) = decode_field(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(h["shape"][0], 3);
        assert_eq!(v, vals);
        assert!(decode_field(b"nonsense-bytes-here").is_err());
        // Only the final file is left behind.
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_quotes_awkward_cells() {
        let s = csv(&["a", "b"], &[vec!["x,y".into(), "1".into()]]);
        assert_eq!(s, "a,b\n\"x,y\",1\n");
    }
}
