//! The `validate` command: station match-ups against product files.
//!
//! Match-up rows are CSV with header `station_id,timestamp,node,reference_k`.
//! Each row is paired with the product of the same node whose filename
//! timestamp is closest, within the given tolerance, and with the `LST` cell
//! containing the station.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Deserialize;

use lstsr::codec::{self, parse_filename, profiles, Node};
use lstsr::metrics::{
    bundled_stations, compute_report, matchup, parse_station_table, Histogram, PairedSample,
    Station, ValidationReport,
};
use lstsr::{Error, Grid2D};

use crate::scene::{list_products, parse_timestamp, require};

#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub product_dir: PathBuf,
    /// Pipe-separated station table; the bundled table when absent.
    pub station_table: Option<PathBuf>,
    pub matchup_file: PathBuf,
    pub output_dir: PathBuf,
    pub bin_width: f64,
    pub tolerance_minutes: f64,
}

#[derive(Debug, Deserialize)]
struct Row {
    station_id: String,
    timestamp: String,
    node: String,
    reference_k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchupRecord {
    pub station_id: String,
    pub timestamp: DateTime<Utc>,
    pub node: Node,
    pub reference: f64,
}

pub fn parse_matchups(text: &str) -> Result<Vec<MatchupRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::ParseLine {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for rec in reader.records() {
        let line_of = |e: &csv::Error| e.position().map(|p| p.line() as usize).unwrap_or(0);
        let rec = rec.map_err(|e| Error::ParseLine {
            line: line_of(&e),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |message: String| Error::ParseLine { line, message };
        let row: Row = rec
            .deserialize(Some(&headers))
            .map_err(|e| bad(e.to_string()))?;
        let timestamp = parse_timestamp(&row.timestamp).map_err(|e| bad(e.to_string()))?;
        let node: Node = row.node.parse().map_err(|e: Error| bad(e.to_string()))?;
        if !row.reference_k.is_finite() {
            return Err(bad("non-finite reference".into()).into());
        }
        out.push(MatchupRecord {
            station_id: row.station_id,
            timestamp,
            node,
            reference: row.reference_k,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StationReports {
    pub station: Station,
    /// estimate - reference for every matched pair
    pub differences: Vec<f64>,
    pub all: ValidationReport,
    pub day: ValidationReport,
    pub night: ValidationReport,
}

/// Product values, reference values and nodes of one station.
type Pairs = (Vec<f64>, Vec<f64>, Vec<Node>);

struct Product {
    timestamp: DateTime<Utc>,
    node: Node,
    path: PathBuf,
}

fn index_products(dir: &Path) -> Result<Vec<Product>> {
    let mut out = Vec::new();
    for path in list_products(dir)? {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match parse_filename(&name) {
            Ok(f) => out.push(Product {
                timestamp: f.timestamp,
                node: f.node,
                path,
            }),
            Err(e) => log::warn!("{name}: not a product filename ({e}); ignored"),
        }
    }
    Ok(out)
}

fn closest<'a>(
    products: &'a [Product],
    rec: &MatchupRecord,
    tolerance_minutes: f64,
) -> Option<&'a Product> {
    products
        .iter()
        .filter(|p| p.node == rec.node)
        .map(|p| ((p.timestamp - rec.timestamp).num_seconds().abs(), p))
        .filter(|(dt, _)| *dt as f64 <= tolerance_minutes * 60.0)
        .min_by_key(|(dt, _)| *dt)
        .map(|(_, p)| p)
}

fn report(reference: Vec<f64>, estimate: Vec<f64>, bin_width: f64) -> Result<ValidationReport> {
    if reference.is_empty() {
        return Ok(ValidationReport::empty());
    }
    Ok(compute_report(
        &PairedSample::new(reference, estimate)?,
        bin_width,
    )?)
}

/// Per-station reports, in station-table order.
pub fn run_matchups(
    stations: &[Station],
    records: &[MatchupRecord],
    product_dir: &Path,
    bin_width: f64,
    tolerance_minutes: f64,
) -> Result<Vec<StationReports>> {
    let products = index_products(product_dir)?;
    let mut cache: HashMap<PathBuf, Grid2D> = HashMap::new();
    let mut pairs: HashMap<&str, Pairs> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        let Some(station) = stations.iter().find(|s| s.id == rec.station_id) else {
            return Err(Error::ParseLine {
                line: i + 2,
                message: format!("unknown station {:?}", rec.station_id),
            }
            .into());
        };
        let Some(product) = closest(&products, rec, tolerance_minutes) else {
            continue;
        };
        if !cache.contains_key(&product.path) {
            let vars = codec::read_file(&product.path)?;
            let lst = codec::unpack(require(&vars, profiles::LST.name, &product.path)?)?;
            cache.insert(product.path.clone(), lst);
        }
        if let Some(estimate) = matchup(&cache[&product.path], station) {
            let e = pairs.entry(station.id.as_str()).or_default();
            e.0.push(rec.reference);
            e.1.push(estimate);
            e.2.push(rec.node);
        }
    }

    stations
        .iter()
        .map(|s| {
            let (reference, estimate, tags) = pairs.remove(s.id.as_str()).unwrap_or_default();
            let sample = PairedSample::with_tags(reference.clone(), estimate.clone(), Some(tags))?;
            let split = |node| {
                let sub = sample.select(node);
                report(sub.reference, sub.estimate, bin_width)
            };
            Ok(StationReports {
                station: s.clone(),
                differences: sample.differences(),
                all: report(reference, estimate, bin_width)?,
                day: split(Node::Day)?,
                night: split(Node::Night)?,
            })
        })
        .collect()
}

pub fn summary_table(reports: &[StationReports]) -> String {
    let mut out = String::from("station\tnode\tn\tmd\trmse\trsd\tmae\n");
    for r in reports {
        for (node, rep) in [("ALL", &r.all), ("DAY", &r.day), ("NIGHT", &r.night)] {
            let _ = writeln!(
                out,
                "{}\t{node}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.station.id, rep.n, rep.md, rep.rmse, rep.rsd, rep.mae
            );
        }
    }
    out
}

pub fn cmd_validate(o: &ValidateOptions) -> Result<Vec<StationReports>> {
    let stations = match &o.station_table {
        Some(p) => parse_station_table(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => bundled_stations(),
    };
    let text = std::fs::read_to_string(&o.matchup_file)
        .with_context(|| format!("reading {}", o.matchup_file.display()))?;
    let records =
        parse_matchups(&text).with_context(|| format!("parsing {}", o.matchup_file.display()))?;
    let reports = run_matchups(
        &stations,
        &records,
        &o.product_dir,
        o.bin_width,
        o.tolerance_minutes,
    )?;

    std::fs::create_dir_all(&o.output_dir)?;
    let mut text = String::new();
    let mut kv = String::new();
    let mut all_d = Vec::new();
    for r in &reports {
        let s = &r.station;
        let _ = writeln!(
            text,
            "{} {} ({}, {:.4} {:.4})",
            s.id, s.name, s.network, s.lat, s.lon
        );
        for (node, rep) in [("ALL", &r.all), ("DAY", &r.day), ("NIGHT", &r.night)] {
            let _ = writeln!(text, "  {node:<5} {}", rep.to_text());
            kv.push_str(&rep.to_key_value(&format!("{}.{node}", s.id)));
        }
        if !r.all.is_empty() {
            std::fs::write(
                o.output_dir.join(format!("hist_{}.txt", s.id)),
                r.all.histogram.to_two_column(),
            )?;
        }
        all_d.extend_from_slice(&r.differences);
    }
    std::fs::write(o.output_dir.join("report.txt"), text)?;
    std::fs::write(o.output_dir.join("report.kv"), kv)?;
    std::fs::write(o.output_dir.join("summary.tsv"), summary_table(&reports))?;
    std::fs::write(
        o.output_dir.join("hist_all.txt"),
        Histogram::build(&all_d, o.bin_width)?.to_two_column(),
    )?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matchup_csv() {
        let text = "station_id,timestamp,node,reference_k\nSVA,202008201030,DAY,290.5\nHYY, 2020-08-20T22:00 ,NIGHT,280\n";
        let recs = parse_matchups(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].node, Node::Night);
        assert_eq!(recs[1].reference, 280.0);
    }

    #[test]
    fn matchup_errors_carry_lines() {
        let text = "station_id,timestamp,node,reference_k\nSVA,202008201030,DAY,290.5\nSVA,202008201030,NOON,1\n";
        let e = parse_matchups(text).unwrap_err();
        assert!(
            matches!(
                e.downcast_ref::<Error>(),
                Some(Error::ParseLine { line: 3, .. })
            ),
            "{e:?}"
        );
        let text = "station_id,timestamp,node,reference_k\nSVA,202008201030,DAY,warm\n";
        let e = parse_matchups(text).unwrap_err();
        assert!(
            matches!(
                e.downcast_ref::<Error>(),
                Some(Error::ParseLine { line: 2, .. })
            ),
            "{e:?}"
        );
    }
}
