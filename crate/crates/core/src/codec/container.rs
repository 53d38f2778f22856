//! Native single-file container.
//!
//! Layout: `NPG1`, a little-endian `u32` header length, a UTF-8 key/value header
//! document, then each variable's int16 payload (little-endian, row-major,
//! north-to-south) in header order. Floats are written in their shortest
//! round-trip decimal form so the bytes are identical across platforms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use ndarray::Array2;

use super::{PackedGrid, PackedHeader, SpecialCode};
use crate::error::{Error, Result};
use crate::grid::GeoTransform;

pub const MAGIC: &[u8; 4] = b"NPG1";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

pub fn encode(vars: &[PackedGrid]) -> Result<Vec<u8>> {
    let mut doc = String::new();
    let _ = writeln!(doc, "format = NPG1");
    let _ = writeln!(doc, "variables = {}", vars.len());
    for (i, v) in vars.iter().enumerate() {
        let h = &v.header;
        h.validate()?;
        if v.data.dim() != h.geo.shape() {
            return Err(Error::InvalidParams(format!(
                "{}: payload shape mismatch",
                h.variable_name
            )));
        }
        for text in [
            &h.variable_name,
            &h.long_name,
            &h.units,
            &h.satellite,
            &h.version,
        ] {
            check_text(text)?;
        }
        let _ = writeln!(doc, "\n[variable.{i}]");
        let _ = writeln!(doc, "variable_name = {}", h.variable_name);
        let _ = writeln!(doc, "long_name = {}", h.long_name);
        let _ = writeln!(doc, "units = {}", h.units);
        let _ = writeln!(doc, "scale = {}", h.scale);
        let _ = writeln!(doc, "offset = {}", h.offset);
        let _ = writeln!(doc, "valid_min = {}", h.valid_min_physical);
        let _ = writeln!(doc, "valid_max = {}", h.valid_max_physical);
        let _ = writeln!(doc, "fill_code = {}", h.fill_code);
        for s in &h.special_codes {
            check_text(&s.meaning)?;
            let _ = writeln!(doc, "special_code = {} {}", s.code, s.meaning);
        }
        let _ = writeln!(doc, "lon_min = {}", h.geo.lon_min);
        let _ = writeln!(doc, "lat_max = {}", h.geo.lat_max);
        let _ = writeln!(doc, "cell_size = {}", h.geo.cell_size);
        let _ = writeln!(doc, "n_rows = {}", h.geo.n_rows);
        let _ = writeln!(doc, "n_cols = {}", h.geo.n_cols);
        let _ = writeln!(doc, "timestamp = {}", h.timestamp.format(TIMESTAMP_FORMAT));
        let _ = writeln!(doc, "satellite = {}", h.satellite);
        let _ = writeln!(doc, "version = {}", h.version);
        let _ = writeln!(doc, "node = {}", h.node);
    }

    let payload: usize = vars.iter().map(|v| v.data.len() * 2).sum();
    let mut out = Vec::with_capacity(8 + doc.len() + payload);
    out.extend_from_slice(MAGIC);
    let len =
        u32::try_from(doc.len()).map_err(|_| Error::InvalidParams("header too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    for v in vars {
        for &x in v.data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn check_text(s: &str) -> Result<()> {
    if s.contains(['\n', '\r']) || s.trim() != s {
        return Err(Error::InvalidParams(format!(
            "header text {s:?} has line breaks or padding"
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Fields {
    start: usize,
    pairs: Vec<(String, String, usize)>,
}

impl Fields {
    fn get(&self, key: &str) -> Result<(&str, usize)> {
        self.pairs
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, off)| (v.as_str(), *off))
            .ok_or_else(|| Error::Parse {
                offset: self.start,
                message: format!("missing key {key:?}"),
            })
    }

    fn text(&self, key: &str) -> Result<String> {
        self.get(key).map(|(v, _)| v.to_string())
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (v, offset) = self.get(key)?;
        v.parse().map_err(|_| Error::Parse {
            offset,
            message: format!("bad value {v:?} for {key:?}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<PackedGrid>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing NPG1 magic".into(),
        });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let doc_end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Parse {
            offset: 4,
            message: "header length exceeds file".into(),
        })?;
    let doc = std::str::from_utf8(&bytes[8..doc_end]).map_err(|e| Error::Parse {
        offset: 8 + e.valid_up_to(),
        message: "header is not UTF-8".into(),
    })?;

    let mut global = Fields {
        start: 8,
        ..Default::default()
    };
    let mut sections: Vec<Fields> = Vec::new();
    let mut offset = 8usize;
    for line in doc.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let expected = format!("variable.{}", sections.len());
            if name != expected {
                return Err(Error::Parse {
                    offset: line_start,
                    message: format!("expected [{expected}]"),
                });
            }
            sections.push(Fields {
                start: line_start,
                ..Default::default()
            });
            continue;
        }
        let (k, v) = trimmed
            .split_once(" = ")
            .or_else(|| trimmed.split_once('='))
            .ok_or_else(|| Error::Parse {
                offset: line_start,
                message: "expected key = value".into(),
            })?;
        let target = sections.last_mut().unwrap_or(&mut global);
        target
            .pairs
            .push((k.trim().to_string(), v.trim().to_string(), line_start));
    }

    if global.text("format")? != "NPG1" {
        return Err(Error::Parse {
            offset: 8,
            message: "unsupported format".into(),
        });
    }
    let n_vars: usize = global.num("variables")?;
    if n_vars != sections.len() {
        return Err(Error::Parse {
            offset: 8,
            message: format!("declared {n_vars} variables, found {}", sections.len()),
        });
    }

    let mut cursor = doc_end;
    let mut out = Vec::with_capacity(n_vars);
    for f in &sections {
        let header = parse_header(f)?;
        let n = header.geo.len();
        let end = n
            .checked_mul(2)
            .and_then(|b| cursor.checked_add(b))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::CorruptData(format!(
                    "{}: payload truncated at byte {cursor}",
                    header.variable_name
                ))
            })?;
        let data: Vec<i16> = bytes[cursor..end]
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        cursor = end;
        let data = Array2::from_shape_vec(header.geo.shape(), data).expect("length checked");
        out.push(PackedGrid { header, data });
    }
    if cursor != bytes.len() {
        return Err(Error::CorruptData(format!(
            "{} trailing bytes",
            bytes.len() - cursor
        )));
    }
    Ok(out)
}

fn parse_header(f: &Fields) -> Result<PackedHeader> {
    let geo_err = |e: Error| match e {
        Error::InvalidParams(m) => Error::Parse {
            offset: f.start,
            message: m,
        },
        other => other,
    };
    let geo = GeoTransform::new(
        f.num("lon_min")?,
        f.num("lat_max")?,
        f.num("cell_size")?,
        f.num("n_rows")?,
        f.num("n_cols")?,
    )
    .map_err(geo_err)?;
    let (ts, ts_off) = f.get("timestamp")?;
    let timestamp: DateTime<Utc> = NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT)
        .map_err(|e| Error::Parse {
            offset: ts_off,
            message: format!("timestamp: {e}"),
        })?
        .and_utc();
    let (node, node_off) = f.get("node")?;
    let node = node.parse().map_err(|_| Error::Parse {
        offset: node_off,
        message: format!("bad node {node:?}"),
    })?;

    let mut special_codes = Vec::new();
    for (k, v, off) in &f.pairs {
        if k != "special_code" {
            continue;
        }
        let (code, meaning) = v.split_once(' ').unwrap_or((v.as_str(), ""));
        let code = code.parse().map_err(|_| Error::Parse {
            offset: *off,
            message: format!("bad special code {v:?}"),
        })?;
        special_codes.push(SpecialCode {
            code,
            meaning: meaning.to_string(),
        });
    }

    let header = PackedHeader {
        variable_name: f.text("variable_name")?,
        long_name: f.text("long_name")?,
        units: f.text("units")?,
        scale: f.num("scale")?,
        offset: f.num("offset")?,
        valid_min_physical: f.num("valid_min")?,
        valid_max_physical: f.num("valid_max")?,
        fill_code: f.num("fill_code")?,
        special_codes,
        geo,
        timestamp,
        satellite: f.text("satellite")?,
        version: f.text("version")?,
        node,
    };
    header.validate().map_err(geo_err)?;
    Ok(header)
}

pub fn write_file(path: &Path, vars: &[PackedGrid]) -> Result<()> {
    fs::write(path, encode(vars)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<PackedGrid>> {
    decode(&fs::read(path)?)
}
