//! Validation statistics: MAE, RMSE, median deviation (MD), robust standard
//! deviation (RSD = 1.4826 · median |d - MD|), difference histograms and
//! station match-ups.

use std::fmt::Write as _;

use crate::codec::Node;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Consistency constant turning a median absolute deviation into a standard
/// deviation estimate under normality.
pub const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub reference: Vec<f64>,
    pub estimate: Vec<f64>,
    pub tags: Option<Vec<Node>>,
}

impl PairedSample {
    pub fn new(reference: Vec<f64>, estimate: Vec<f64>) -> Result<Self> {
        Self::with_tags(reference, estimate, None)
    }

    pub fn with_tags(
        reference: Vec<f64>,
        estimate: Vec<f64>,
        tags: Option<Vec<Node>>,
    ) -> Result<Self> {
        if reference.len() != estimate.len()
            || tags.as_ref().is_some_and(|t| t.len() != reference.len())
        {
            return Err(Error::InvalidParams(
                "paired sample columns differ in length".into(),
            ));
        }
        if reference.iter().chain(&estimate).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "paired sample contains non-finite values".into(),
            ));
        }
        Ok(Self {
            reference,
            estimate,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// estimate - reference
    pub fn differences(&self) -> Vec<f64> {
        self.estimate
            .iter()
            .zip(&self.reference)
            .map(|(e, r)| e - r)
            .collect()
    }

    /// Sub-sample carrying the given tag.
    pub fn select(&self, node: Node) -> PairedSample {
        let Some(tags) = &self.tags else {
            return PairedSample {
                reference: vec![],
                estimate: vec![],
                tags: Some(vec![]),
            };
        };
        let idx: Vec<usize> = (0..self.len()).filter(|&i| tags[i] == node).collect();
        PairedSample {
            reference: idx.iter().map(|&i| self.reference[i]).collect(),
            estimate: idx.iter().map(|&i| self.estimate[i]).collect(),
            tags: Some(vec![node; idx.len()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of width `bin_width` starting at the smallest value; the last bin is
    /// closed. A sample with zero spread gets one bin centred on its value.
    pub fn build(values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) || !bin_width.is_finite() {
            return Err(Error::InvalidParams(format!(
                "bin width must be positive, got {bin_width}"
            )));
        }
        if values.is_empty() {
            return Ok(Self {
                edges: vec![],
                counts: vec![],
            });
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            return Ok(Self {
                edges: vec![lo - bin_width / 2.0, lo + bin_width / 2.0],
                counts: vec![values.len()],
            });
        }
        let n_bins = ((hi - lo) / bin_width).ceil().max(1.0) as usize;
        let edges = (0..=n_bins).map(|k| lo + k as f64 * bin_width).collect();
        let mut counts = vec![0usize; n_bins];
        for &v in values {
            let k = (((v - lo) / bin_width).floor() as usize).min(n_bins - 1);
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Two whitespace-separated columns: bin centre, count.
    pub fn to_two_column(&self) -> String {
        let mut out = String::new();
        for (c, n) in self.centers().iter().zip(&self.counts) {
            let _ = writeln!(out, "{c} {n}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub md: f64,
    pub rsd: f64,
    pub bias_mean: f64,
    pub histogram: Histogram,
}

impl ValidationReport {
    /// Report for a sample without pairs; every statistic is NaN.
    pub fn empty() -> Self {
        Self {
            n: 0,
            mae: f64::NAN,
            rmse: f64::NAN,
            md: f64::NAN,
            rsd: f64::NAN,
            bias_mean: f64::NAN,
            histogram: Histogram {
                edges: vec![],
                counts: vec![],
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn to_text(&self) -> String {
        format!(
            "n={} md={:.4} mae={:.4} rmse={:.4} rsd={:.4} bias_mean={:.4}",
            self.n, self.md, self.mae, self.rmse, self.rsd, self.bias_mean
        )
    }

    /// `prefix.key = value` lines.
    pub fn to_key_value(&self, prefix: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{prefix}.n = {}", self.n);
        for (k, v) in [
            ("md", self.md),
            ("mae", self.mae),
            ("rmse", self.rmse),
            ("rsd", self.rsd),
            ("bias_mean", self.bias_mean),
        ] {
            let _ = writeln!(out, "{prefix}.{k} = {v}");
        }
        out
    }
}

/// Median of a non-empty slice; even lengths average the two middle values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (lower, &mut m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if values.len() % 2 == 1 {
        m
    } else {
        let below = lower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

pub fn report_from_differences(d: &[f64], bin_width: f64) -> Result<ValidationReport> {
    if d.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = d.len() as f64;
    let mae = d.iter().map(|x| x.abs()).sum::<f64>() / n;
    let rmse = (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let bias_mean = d.iter().sum::<f64>() / n;
    let md = median(d);
    let abs_dev: Vec<f64> = d.iter().map(|x| (x - md).abs()).collect();
    let rsd = MAD_TO_SIGMA * median(&abs_dev);
    Ok(ValidationReport {
        n: d.len(),
        mae,
        rmse,
        md,
        rsd,
        bias_mean,
        histogram: Histogram::build(d, bin_width)?,
    })
}

pub fn compute_report(s: &PairedSample, bin_width: f64) -> Result<ValidationReport> {
    report_from_differences(&s.differences(), bin_width)
}

/// Statistics of `a - b` over cells valid in both grids. An empty overlap yields
/// [`ValidationReport::empty`].
pub fn grid_difference_report(a: &Grid2D, b: &Grid2D, bin_width: f64) -> Result<ValidationReport> {
    a.geo().require_match(b.geo(), "grid difference")?;
    let d: Vec<f64> = a
        .values()
        .indexed_iter()
        .filter_map(|((r, c), &va)| b.get(r, c).filter(|_| a.valid()[[r, c]]).map(|vb| va - vb))
        .collect();
    if d.is_empty() {
        Histogram::build(&[], bin_width)?;
        return Ok(ValidationReport::empty());
    }
    report_from_differences(&d, bin_width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub name: String,
    pub network: String,
    pub lat: f64,
    pub lon: f64,
    pub elevation: f64,
    pub lccs: String,
}

/// In-situ validation stations (id|name|network|lat|lon|elevation_m|land cover).
pub const BUNDLED_STATIONS: &str = "\
# id|name|network|lat|lon|elevation_m|lccs
BND|Bondville, Illinois|SURFRAD|40.0519|-88.3731|230|Cropland
DRA|Desert Rock, Nevada|SURFRAD|36.6237|-116.0195|1007|Open Shrubland
FPK|Fort Peck, Montana|SURFRAD|48.3078|-105.1017|634|Grassland
GCM|Goodwin Creek, Mississippi|SURFRAD|34.2547|-89.8729|98|Wooded Grassland
PSU|Penn. State Univ., Pennsylvania|SURFRAD|40.7201|-77.9309|376|Deciduous Broadleaf Forest
SFA|Sioux Falls, South Dakota|SURFRAD|43.73403|-96.62328|1689|Cropland
SGP|ARM Southern Great Plains, Oklahoma|SURFRAD|36.60406|-97.48525|314|Cropland
TBL|Table Mountain, Boulder, Colorado|SURFRAD|40.1250|-105.2368|1689|Cropland
BOD|Lake Constance, Germany|KIT|47.58|9.57|396|Water
EVO|Evora, Portugal|KIT|38.54|-8.003|300|Mosaic Tree and Shrubs
NSA|North Slope of Alaska, USA|ARM|71.323|-156.609|8|Lichens and Mosses
ALE|Alert, Canada|BSRN|82.49|-62.42|127|Bare Soil
NYA|Ny-Ålesund, Norway|BSRN|78.9227|11.9273|11|Bare soil
TIK|Tiksi, Russia|BSRN|71.5862|128.9188|48|Shrubland
SVA|Svartberget, Sweden|LAW|64.26|19.77|269|Mixed Forest
HYY|Hyytiälä, Finland|LAW|61.85|24.29|181|Mixed Forest
KIT|KIT Forest, Germany|LAW|49.09|8.43|115|Deciduous Broadleaf Forest
";

pub fn parse_station_table(text: &str) -> Result<Vec<Station>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::ParseLine {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('|').map(str::trim).collect();
        if f.len() != 7 {
            return Err(err(format!(
                "expected 7 '|'-separated fields, found {}",
                f.len()
            )));
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            f[k].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} {:?}", f[k])))
        };
        let (lat, lon) = (num(3, "latitude")?, num(4, "longitude")?);
        if lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(err(format!("coordinate ({lat}, {lon}) out of range")));
        }
        if f[0].is_empty() {
            return Err(err("empty station id".into()));
        }
        out.push(Station {
            id: f[0].to_string(),
            name: f[1].to_string(),
            network: f[2].to_string(),
            lat,
            lon,
            elevation: num(5, "elevation")?,
            lccs: f[6].to_string(),
        });
    }
    Ok(out)
}

pub fn bundled_stations() -> Vec<Station> {
    parse_station_table(BUNDLED_STATIONS).expect("bundled table parses")
}

/// Value of the valid cell containing the station, if any.
pub fn matchup(g: &Grid2D, station: &Station) -> Option<f64> {
    let (r, c) = g.geo().locate(station.lon, station.lat)?;
    g.get(r, c)
}
