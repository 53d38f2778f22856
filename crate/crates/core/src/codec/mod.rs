//! Scale/offset packed int16 storage for grids.
//!
//! Physical values are stored as `round_half_away_from_zero((x - offset) / scale)`.
//! Missing cells take the variable's fill code; declared special codes (the GAC
//! cloud flag, for instance) survive a round trip through [`unpack_with_specials`]
//! and [`pack_with_specials`] but always surface as invalid cells.

mod container;
mod filename;

pub use container::{decode, encode, read_file, write_file, MAGIC};
pub use filename::{format_filename, parse_filename, FilenameFields, EXTENSION};

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid2D};

pub const DEFAULT_FILL: i16 = i16::MIN;

/// Packed code of the GAC cloud flag (-110 °C under the LST scale/offset).
pub const CLOUD_CODE: i16 = -11000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Day,
    Night,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Node::Day => "DAY",
            Node::Night => "NIGHT",
        })
    }
}

impl FromStr for Node {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DAY" => Ok(Node::Day),
            "NIGHT" => Ok(Node::Night),
            other => Err(Error::InvalidParams(format!(
                "node must be DAY or NIGHT, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialCode {
    pub code: i16,
    pub meaning: String,
}

/// Acquisition metadata shared by every variable of one product file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMeta {
    pub timestamp: DateTime<Utc>,
    pub satellite: String,
    pub version: String,
    pub node: Node,
}

/// Static encoding conventions of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableProfile {
    pub name: &'static str,
    pub long_name: &'static str,
    pub units: &'static str,
    pub scale: f64,
    pub offset: f64,
    pub valid_min: f64,
    pub valid_max: f64,
    pub fill_code: i16,
    pub special_codes: &'static [(i16, &'static str)],
}

pub mod profiles {
    use super::{VariableProfile, CLOUD_CODE, DEFAULT_FILL};

    pub const LST: VariableProfile = VariableProfile {
        name: "LST",
        long_name: "enhanced land surface temperature (0.01 deg GSD)",
        units: "K",
        scale: 0.01,
        offset: 273.15,
        valid_min: 200.0,
        valid_max: 360.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const LST_GAC: VariableProfile = VariableProfile {
        name: "LST_GAC",
        long_name: "land surface temperature (0.05 deg GSD)",
        units: "K",
        scale: 0.01,
        offset: 273.15,
        valid_min: 200.0,
        valid_max: 360.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[(CLOUD_CODE, "cloud")],
    };

    pub const SCANLINE_TIME: VariableProfile = VariableProfile {
        name: "scanline_time",
        long_name: "scanline time as fractional hours of the day",
        units: "h",
        scale: 0.01,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 240.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const SATZEN: VariableProfile = VariableProfile {
        name: "satzen",
        long_name: "satellite zenith angle",
        units: "degrees",
        scale: 0.01,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 180.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const SUNZEN: VariableProfile = VariableProfile {
        name: "sunzen",
        long_name: "sun zenith angle",
        units: "degrees",
        scale: 0.01,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 75.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const TEST_MAE: VariableProfile = VariableProfile {
        name: "test_mae",
        long_name: "mean absolute error of the split-window retrieval on its test set",
        units: "K",
        scale: 0.01,
        offset: 0.0,
        valid_min: -327.67,
        valid_max: 327.67,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const R2: VariableProfile = VariableProfile {
        name: "r2",
        long_name: "coefficient of determination of the split-window retrieval on its test set",
        units: "1",
        scale: 0.01,
        offset: 0.0,
        valid_min: -327.67,
        valid_max: 327.67,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    /// Quality layers carried from the coarse scene to the downscaled product.
    pub const QUALITY: [VariableProfile; 5] = [SATZEN, SUNZEN, SCANLINE_TIME, TEST_MAE, R2];

    pub const ALL: [VariableProfile; 12] = [
        LST,
        LST_GAC,
        SCANLINE_TIME,
        SATZEN,
        SUNZEN,
        TEST_MAE,
        R2,
        LANDCOVER,
        ELEVATION,
        CANOPY,
        C_HORIZONTAL,
        C_VERTICAL,
    ];

    /// Case-sensitive lookup by variable name.
    pub fn by_name(name: &str) -> Option<&'static VariableProfile> {
        ALL.iter().find(|p| p.name == name)
    }

    pub const LANDCOVER: VariableProfile = VariableProfile {
        name: "landcover",
        long_name: "land cover class (LCCS code)",
        units: "1",
        scale: 1.0,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 255.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const ELEVATION: VariableProfile = VariableProfile {
        name: "elevation",
        long_name: "terrain elevation above sea level",
        units: "m",
        scale: 0.5,
        offset: 0.0,
        valid_min: -500.0,
        valid_max: 9000.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const CANOPY: VariableProfile = VariableProfile {
        name: "canopy",
        long_name: "vegetation canopy height",
        units: "m",
        scale: 0.01,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 100.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const C_HORIZONTAL: VariableProfile = VariableProfile {
        name: "c_horizontal",
        long_name: "diffusion conductance towards the east neighbour",
        units: "1",
        scale: 1e-4,
        offset: 0.0,
        valid_min: 0.0,
        valid_max: 1.0,
        fill_code: DEFAULT_FILL,
        special_codes: &[],
    };

    pub const C_VERTICAL: VariableProfile = VariableProfile {
        name: "c_vertical",
        long_name: "diffusion conductance towards the south neighbour",
        ..C_HORIZONTAL
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedHeader {
    pub variable_name: String,
    pub long_name: String,
    pub units: String,
    pub scale: f64,
    pub offset: f64,
    pub valid_min_physical: f64,
    pub valid_max_physical: f64,
    pub fill_code: i16,
    pub special_codes: Vec<SpecialCode>,
    pub geo: GeoTransform,
    pub timestamp: DateTime<Utc>,
    pub satellite: String,
    pub version: String,
    pub node: Node,
}

impl PackedHeader {
    pub fn from_profile(profile: &VariableProfile, geo: GeoTransform, meta: &ProductMeta) -> Self {
        Self {
            variable_name: profile.name.to_string(),
            long_name: profile.long_name.to_string(),
            units: profile.units.to_string(),
            scale: profile.scale,
            offset: profile.offset,
            valid_min_physical: profile.valid_min,
            valid_max_physical: profile.valid_max,
            fill_code: profile.fill_code,
            special_codes: profile
                .special_codes
                .iter()
                .map(|&(code, meaning)| SpecialCode {
                    code,
                    meaning: meaning.to_string(),
                })
                .collect(),
            geo,
            timestamp: meta.timestamp,
            satellite: meta.satellite.clone(),
            version: meta.version.clone(),
            node: meta.node,
        }
    }

    pub fn meta(&self) -> ProductMeta {
        ProductMeta {
            timestamp: self.timestamp,
            satellite: self.satellite.clone(),
            version: self.version.clone(),
            node: self.node,
        }
    }

    pub fn quantize(&self, x: f64) -> f64 {
        round_half_away((x - self.offset) / self.scale)
    }

    pub fn dequantize(&self, code: i16) -> f64 {
        code as f64 * self.scale + self.offset
    }

    /// Inclusive range of stored codes that represent physical values.
    pub fn code_range(&self) -> (i16, i16) {
        let lo = self
            .quantize(self.valid_min_physical)
            .clamp(i16::MIN as f64, i16::MAX as f64);
        let hi = self
            .quantize(self.valid_max_physical)
            .clamp(i16::MIN as f64, i16::MAX as f64);
        (lo as i16, hi as i16)
    }

    pub fn is_special(&self, code: i16) -> bool {
        self.special_codes.iter().any(|s| s.code == code)
    }

    /// Checks the header invariants: positive scale, ordered range, and fill and
    /// special codes outside the packed valid range.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() || !self.offset.is_finite() {
            return Err(Error::InvalidParams(format!(
                "{}: bad scale/offset",
                self.variable_name
            )));
        }
        if !(self.valid_max_physical >= self.valid_min_physical) {
            return Err(Error::InvalidParams(format!(
                "{}: empty valid range",
                self.variable_name
            )));
        }
        let lo = self.quantize(self.valid_min_physical);
        let hi = self.quantize(self.valid_max_physical);
        if lo < i16::MIN as f64 || hi > i16::MAX as f64 {
            return Err(Error::InvalidParams(format!(
                "{}: valid range does not fit int16 codes",
                self.variable_name
            )));
        }
        let inside = |c: i16| (c as f64) >= lo && (c as f64) <= hi;
        if inside(self.fill_code) {
            return Err(Error::InvalidParams(format!(
                "{}: fill code inside valid range",
                self.variable_name
            )));
        }
        for s in &self.special_codes {
            if inside(s.code) || s.code == self.fill_code {
                return Err(Error::InvalidParams(format!(
                    "{}: special code {} collides with valid range or fill",
                    self.variable_name, s.code
                )));
            }
        }
        Ok(())
    }
}

pub fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero
    x.round()
}

/// Header plus row-major (north to south) int16 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedGrid {
    pub header: PackedHeader,
    pub data: Array2<i16>,
}

/// A cell holding a declared special code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialCell {
    pub row: usize,
    pub col: usize,
    pub code: i16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Undeclared out-of-range codes are an error.
    Strict,
    /// Undeclared out-of-range codes become invalid cells and are counted.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct Unpacked {
    pub grid: Grid2D,
    pub specials: Vec<SpecialCell>,
    /// Number of undeclared codes invalidated in lenient mode.
    pub invalidated: usize,
}

impl Unpacked {
    /// Mask that is true exactly where `code` was stored.
    pub fn special_mask(&self, code: i16) -> Array2<bool> {
        let mut mask = Array2::from_elem(self.grid.shape(), false);
        for s in self.specials.iter().filter(|s| s.code == code) {
            mask[[s.row, s.col]] = true;
        }
        mask
    }
}

pub fn pack(g: &Grid2D, h: &PackedHeader) -> Result<PackedGrid> {
    pack_with_specials(g, h, &[])
}

/// Packs `g`, writing the given special codes in place of the fill code at their
/// (invalid) cells.
pub fn pack_with_specials(
    g: &Grid2D,
    h: &PackedHeader,
    specials: &[SpecialCell],
) -> Result<PackedGrid> {
    h.validate()?;
    h.geo.require_match(g.geo(), "grid vs header")?;
    let (code_lo, code_hi) = h.code_range();
    let mut data = Array2::from_elem(g.shape(), h.fill_code);
    for ((r, c), &ok) in g.valid().indexed_iter() {
        if !ok {
            continue;
        }
        let x = g.values()[[r, c]];
        let q = h.quantize(x);
        // dequantized bounds may sit a rounding error outside the physical range
        let slack = h.scale * 1e-6;
        let in_range = x >= h.valid_min_physical - slack && x <= h.valid_max_physical + slack;
        let in_codes = in_range && q >= code_lo as f64 && q <= code_hi as f64;
        let special = q >= i16::MIN as f64 && q <= i16::MAX as f64 && h.is_special(q as i16);
        let code = if in_codes || special {
            q as i16
        } else {
            return Err(Error::ValueOutOfRange {
                row: r,
                col: c,
                value: x,
                min: h.valid_min_physical,
                max: h.valid_max_physical,
            });
        };
        data[[r, c]] = code;
    }
    for s in specials {
        if !h.is_special(s.code) {
            return Err(Error::InvalidParams(format!(
                "code {} is not declared special",
                s.code
            )));
        }
        if s.row >= data.nrows() || s.col >= data.ncols() {
            return Err(Error::InvalidParams(format!(
                "special cell ({}, {}) outside grid",
                s.row, s.col
            )));
        }
        data[[s.row, s.col]] = s.code;
    }
    Ok(PackedGrid {
        header: h.clone(),
        data,
    })
}

pub fn unpack(p: &PackedGrid) -> Result<Grid2D> {
    unpack_with_specials(p, DecodeMode::Strict).map(|u| u.grid)
}

pub fn unpack_with_specials(p: &PackedGrid, mode: DecodeMode) -> Result<Unpacked> {
    let h = &p.header;
    h.validate()?;
    if p.data.dim() != h.geo.shape() {
        return Err(Error::CorruptData(format!(
            "{}: payload shape {:?} does not match header {:?}",
            h.variable_name,
            p.data.dim(),
            h.geo.shape()
        )));
    }
    let (lo, hi) = h.code_range();
    let mut values = Array2::<f64>::zeros(p.data.dim());
    let mut valid = Array2::from_elem(p.data.dim(), false);
    let mut specials = Vec::new();
    let mut invalidated = 0usize;
    for ((r, c), &code) in p.data.indexed_iter() {
        if code == h.fill_code {
            continue;
        }
        if code >= lo && code <= hi {
            values[[r, c]] = h.dequantize(code);
            valid[[r, c]] = true;
        } else if h.is_special(code) {
            specials.push(SpecialCell {
                row: r,
                col: c,
                code,
            });
        } else {
            match mode {
                DecodeMode::Strict => {
                    return Err(Error::CorruptData(format!(
                        "{}: undeclared code {code} at ({r}, {c})",
                        h.variable_name
                    )))
                }
                DecodeMode::Lenient => invalidated += 1,
            }
        }
    }
    if invalidated > 0 {
        log::warn!(
            "{}: invalidated {invalidated} undeclared codes",
            h.variable_name
        );
    }
    Ok(Unpacked {
        grid: Grid2D::new(h.geo, values, valid)?,
        specials,
        invalidated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    pub(crate) fn meta() -> ProductMeta {
        ProductMeta {
            timestamp: Utc.with_ymd_and_hms(2020, 8, 20, 10, 30, 0).unwrap(),
            satellite: "METOPA".into(),
            version: "v1.0".into(),
            node: Node::Day,
        }
    }

    fn geo(rows: usize, cols: usize) -> GeoTransform {
        GeoTransform::new(-10.0, 75.0, 0.05, rows, cols).unwrap()
    }

    #[test]
    fn lst_profile_examples() {
        let h = PackedHeader::from_profile(&profiles::LST, geo(1, 3), &meta());
        let g = Grid2D::from_values(geo(1, 3), ndarray::array![[273.15, 274.0, f64::NAN]]).unwrap();
        let p = pack(&g, &h).unwrap();
        assert_eq!(p.data[[0, 0]], 0);
        assert_eq!(p.data[[0, 1]], 85);
        assert_eq!(p.data[[0, 2]], DEFAULT_FILL);
        let back = unpack(&p).unwrap();
        assert_eq!(back.get(0, 0), Some(273.15));
        assert_eq!(back.get(0, 2), None);
        assert_eq!(h.code_range(), (-7315, 8685));
    }

    #[test]
    fn cloud_flag_becomes_special_and_invalid() {
        let h = PackedHeader::from_profile(&profiles::LST_GAC, geo(1, 2), &meta());
        // -110 degC expressed in kelvin
        let cloud_k = 273.15 - 110.0;
        let g = Grid2D::from_values(geo(1, 2), ndarray::array![[cloud_k, 250.0]]).unwrap();
        let p = pack(&g, &h).unwrap();
        assert_eq!(p.data[[0, 0]], CLOUD_CODE);
        let u = unpack_with_specials(&p, DecodeMode::Strict).unwrap();
        assert_eq!(u.grid.get(0, 0), None);
        assert_eq!(
            u.specials,
            vec![SpecialCell {
                row: 0,
                col: 0,
                code: CLOUD_CODE
            }]
        );
        let again = pack_with_specials(&u.grid, &h, &u.specials).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn out_of_range_reports_cell() {
        let h = PackedHeader::from_profile(&profiles::LST, geo(2, 2), &meta());
        let mut v = Array2::from_elem((2, 2), 250.0);
        v[[1, 0]] = 400.0;
        let g = Grid2D::from_values(geo(2, 2), v).unwrap();
        match pack(&g, &h) {
            Err(Error::ValueOutOfRange {
                row, col, value, ..
            }) => {
                assert_eq!((row, col), (1, 0));
                assert_eq!(value, 400.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geo_mismatch_rejected() {
        let h = PackedHeader::from_profile(&profiles::LST, geo(2, 2), &meta());
        let g = Grid2D::filled(geo(2, 3), 250.0);
        assert!(matches!(pack(&g, &h), Err(Error::GeoMismatch(_))));
    }

    #[test]
    fn strict_and_lenient_decoding() {
        let h = PackedHeader::from_profile(&profiles::LST, geo(1, 2), &meta());
        let p = PackedGrid {
            header: h,
            data: ndarray::array![[10, 20000]],
        };
        assert!(matches!(unpack(&p), Err(Error::CorruptData(_))));
        let u = unpack_with_specials(&p, DecodeMode::Lenient).unwrap();
        assert_eq!(u.invalidated, 1);
        assert_eq!(u.grid.valid_count(), 1);
    }

    #[test]
    fn header_invariants_checked() {
        let mut h = PackedHeader::from_profile(&profiles::LST, geo(1, 1), &meta());
        h.fill_code = 0;
        assert!(h.validate().is_err());
        let mut h = PackedHeader::from_profile(&profiles::LST_GAC, geo(1, 1), &meta());
        h.special_codes.push(SpecialCode {
            code: 5,
            meaning: "bad".into(),
        });
        assert!(h.validate().is_err());
        for p in profiles::QUALITY.iter().chain([
            &profiles::LST,
            &profiles::LST_GAC,
            &profiles::C_HORIZONTAL,
        ]) {
            PackedHeader::from_profile(p, geo(1, 1), &meta())
                .validate()
                .unwrap();
        }
    }

    #[test]
    fn quality_profile_code_ranges() {
        let codes =
            |p: &VariableProfile| PackedHeader::from_profile(p, geo(1, 1), &meta()).code_range();
        assert_eq!(codes(&profiles::SCANLINE_TIME), (0, 24000));
        assert_eq!(codes(&profiles::SATZEN), (0, 18000));
        assert_eq!(codes(&profiles::SUNZEN), (0, 7500));
    }

    proptest! {
        #[test]
        fn roundtrip_error_within_half_scale(
            vals in proptest::collection::vec(200.0f64..=360.0, 1..64),
            holes in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let n = vals.len();
            let g = Grid2D::new(
                geo(1, n),
                Array2::from_shape_vec((1, n), vals.clone()).unwrap(),
                Array2::from_shape_vec((1, n), holes[..n].to_vec()).unwrap(),
            ).unwrap();
            let h = PackedHeader::from_profile(&profiles::LST, geo(1, n), &meta());
            let p = pack(&g, &h).unwrap();
            let back = unpack(&p).unwrap();
            prop_assert_eq!(back.valid(), g.valid());
            for (c, &x) in vals.iter().enumerate() {
                if let Some(v) = back.get(0, c) {
                    prop_assert!((v - x).abs() <= 0.005);
                }
            }
            prop_assert_eq!(pack(&back, &h).unwrap(), p);
        }
    }
}
