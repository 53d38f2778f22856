//! Georeferenced 2-D fields with an explicit validity mask.
//!
//! Missing data (clouds, water, outages) is carried in `valid`; the value stored
//! under an invalid cell is always `0.0` and must never be read. Every reduction
//! in this crate skips invalid cells.

pub mod resample;

pub use resample::upsample_bicubic;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Relative tolerance used when comparing cell sizes derived through
/// different chains of multiplication and division.
const GEO_RTOL: f64 = 1e-9;

/// Plain lat-lon geometry of a raster: north-west corner, square cell size, shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub lon_min: f64,
    pub lat_max: f64,
    pub cell_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GeoTransform {
    pub fn new(
        lon_min: f64,
        lat_max: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
    ) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidParams(format!(
                "cell_size must be positive, got {cell_size}"
            )));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidParams(format!(
                "empty raster {n_rows}x{n_cols}"
            )));
        }
        if !lon_min.is_finite() || !lat_max.is_finite() {
            return Err(Error::InvalidParams("non-finite origin".into()));
        }
        Ok(Self {
            lon_min,
            lat_max,
            cell_size,
            n_rows,
            n_cols,
        })
    }

    /// The 0.01° product grid north of 50°N.
    pub fn pan_arctic() -> Self {
        Self {
            lon_min: -180.0,
            lat_max: 90.0,
            cell_size: 0.01,
            n_rows: 4000,
            n_cols: 36000,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (lon, lat) of the center of pixel (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lon_min + (col as f64 + 0.5) * self.cell_size,
            self.lat_max - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Containing cell of a coordinate, or `None` outside the raster.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let r = ((self.lat_max - lat) / self.cell_size).floor();
        let c = ((lon - self.lon_min) / self.cell_size).floor();
        if !(r >= 0.0 && c >= 0.0) || r >= self.n_rows as f64 || c >= self.n_cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        check_factor(factor)?;
        if !self.n_rows.is_multiple_of(factor) || !self.n_cols.is_multiple_of(factor) {
            return Err(Error::DimensionNotDivisible {
                rows: self.n_rows,
                cols: self.n_cols,
                factor,
            });
        }
        Ok(Self {
            cell_size: self.cell_size * factor as f64,
            n_rows: self.n_rows / factor,
            n_cols: self.n_cols / factor,
            ..*self
        })
    }

    pub fn refined(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        Self {
            cell_size: self.cell_size / factor as f64,
            n_rows: self.n_rows * factor,
            n_cols: self.n_cols * factor,
            ..*self
        }
    }

    /// Geometry of the sub-window starting at (row0, col0).
    pub fn window(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Self {
            lon_min: self.lon_min + col0 as f64 * self.cell_size,
            lat_max: self.lat_max - row0 as f64 * self.cell_size,
            cell_size: self.cell_size,
            n_rows: height,
            n_cols: width,
        }
    }

    /// Same shape and, to within rounding of derived cell sizes, the same placement.
    pub fn matches(&self, other: &GeoTransform) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && close(self.cell_size, other.cell_size, self.cell_size)
            && close(self.lon_min, other.lon_min, self.cell_size)
            && close(self.lat_max, other.lat_max, self.cell_size)
    }

    /// Integer (row, col) offset of `inner` inside `self` when both share the cell
    /// size and `inner` lies on this lattice entirely inside the raster.
    pub fn offset_of(&self, inner: &GeoTransform) -> Option<(usize, usize)> {
        if !close(self.cell_size, inner.cell_size, self.cell_size) {
            return None;
        }
        let dr = (self.lat_max - inner.lat_max) / self.cell_size;
        let dc = (inner.lon_min - self.lon_min) / self.cell_size;
        let (r, c) = (dr.round(), dc.round());
        if (dr - r).abs() > 1e-6 || (dc - c).abs() > 1e-6 || r < 0.0 || c < 0.0 {
            return None;
        }
        let (r, c) = (r as usize, c as usize);
        if r + inner.n_rows > self.n_rows || c + inner.n_cols > self.n_cols {
            return None;
        }
        Some((r, c))
    }

    pub fn require_match(&self, other: &GeoTransform, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GeoMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= GEO_RTOL * scale.abs().max(a.abs()).max(b.abs()).max(1.0)
}

pub(crate) fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        Err(Error::InvalidParams("factor must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// A physical field (kelvin, metres, ...) on a [`GeoTransform`] with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    geo: GeoTransform,
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl Grid2D {
    pub fn new(geo: GeoTransform, mut values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        for (name, dim) in [("values", values.dim()), ("valid", valid.dim())] {
            if dim != geo.shape() {
                log::debug!("{name} shape {dim:?} does not match geometry");
                return Err(Error::ShapeMismatch {
                    expected: geo.shape(),
                    actual: dim,
                });
            }
        }
        Zip::from(&mut values).and(&valid).for_each(|v, &ok| {
            if !ok {
                *v = 0.0;
            }
        });
        Ok(Self { geo, values, valid })
    }

    /// Builds a grid where every non-finite value is treated as missing.
    pub fn from_values(geo: GeoTransform, values: Array2<f64>) -> Result<Self> {
        let valid = values.mapv(f64::is_finite);
        Self::new(geo, values, valid)
    }

    pub fn filled(geo: GeoTransform, value: f64) -> Self {
        Self {
            geo,
            values: Array2::from_elem(geo.shape(), value),
            valid: Array2::from_elem(geo.shape(), true),
        }
    }

    pub fn invalid(geo: GeoTransform) -> Self {
        Self {
            geo,
            values: Array2::zeros(geo.shape()),
            valid: Array2::from_elem(geo.shape(), false),
        }
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn shape(&self) -> (usize, usize) {
        self.geo.shape()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn into_parts(self) -> (GeoTransform, Array2<f64>, Array2<bool>) {
        (self.geo, self.values, self.valid)
    }

    /// Value at `(row, col)`; `None` when invalid or out of bounds.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        match self.valid.get((row, col)) {
            Some(true) => Some(self.values[[row, col]]),
            _ => None,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values with NaN in place of invalid cells; handy for export and display.
    pub fn to_nan_array(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        Zip::from(&mut out).and(&self.valid).for_each(|v, &ok| {
            if !ok {
                *v = f64::NAN;
            }
        });
        out
    }

    /// Minimum and maximum over valid cells.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        Zip::from(&self.values)
            .and(&self.valid)
            .for_each(|&v, &ok| {
                if ok {
                    range = Some(match range {
                        None => (v, v),
                        Some((lo, hi)) => (lo.min(v), hi.max(v)),
                    });
                }
            });
        range
    }

    pub fn with_geo(mut self, geo: GeoTransform) -> Result<Self> {
        if geo.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: geo.shape(),
            });
        }
        self.geo = geo;
        Ok(self)
    }
}

/// Bounds of a min-max scaler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub lo: f64,
    pub hi: f64,
}

impl ScaleParams {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParams(format!("scale bounds [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Bounds fitted to the valid cells of `g`.
    pub fn fit(g: &Grid2D) -> Option<Self> {
        g.valid_range().map(|(lo, hi)| Self { lo, hi })
    }

    pub fn is_degenerate(&self) -> bool {
        self.hi == self.lo
    }

    pub fn scale_value(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.5
        } else {
            (x - self.lo) / (self.hi - self.lo)
        }
    }

    /// Inverse of [`scale_value`](Self::scale_value); on a degenerate range every
    /// input maps back to `lo`.
    pub fn unscale_value(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.lo
        } else {
            y * (self.hi - self.lo) + self.lo
        }
    }
}

fn map_valid(g: &Grid2D, f: impl Fn(f64) -> f64) -> Grid2D {
    let mut values = g.values.clone();
    Zip::from(&mut values).and(&g.valid).for_each(|v, &ok| {
        if ok {
            *v = f(*v);
        }
    });
    Grid2D {
        geo: g.geo,
        values,
        valid: g.valid.clone(),
    }
}

pub fn minmax_scale(g: &Grid2D, p: ScaleParams) -> Grid2D {
    map_valid(g, |x| p.scale_value(x))
}

pub fn minmax_unscale(g: &Grid2D, p: ScaleParams) -> Grid2D {
    map_valid(g, |y| p.unscale_value(y))
}

/// NaN-aware average pooling: each output cell is the mean of the valid cells of
/// its `factor`×`factor` block, invalid only when the block has none.
pub fn coarsen_nan_aware(g: &Grid2D, factor: usize) -> Result<Grid2D> {
    let geo = g.geo.coarsened(factor)?;
    let mut values = Array2::<f64>::zeros(geo.shape());
    let mut valid = Array2::from_elem(geo.shape(), false);
    for br in 0..geo.n_rows {
        for bc in 0..geo.n_cols {
            // accumulate offsets from the first valid cell so constant blocks are exact
            let mut pivot = None;
            let mut acc = 0.0;
            let mut n = 0usize;
            for r in br * factor..(br + 1) * factor {
                for c in bc * factor..(bc + 1) * factor {
                    if g.valid[[r, c]] {
                        let v = g.values[[r, c]];
                        let p = *pivot.get_or_insert(v);
                        acc += v - p;
                        n += 1;
                    }
                }
            }
            if let Some(p) = pivot {
                values[[br, bc]] = p + acc / n as f64;
                valid[[br, bc]] = true;
            }
        }
    }
    Ok(Grid2D { geo, values, valid })
}

/// Copies each cell's value and validity to a `factor`×`factor` block.
pub fn replicate_nearest(g: &Grid2D, factor: usize) -> Grid2D {
    let factor = factor.max(1);
    let geo = g.geo.refined(factor);
    let values = Array2::from_shape_fn(geo.shape(), |(r, c)| g.values[[r / factor, c / factor]]);
    let valid = Array2::from_shape_fn(geo.shape(), |(r, c)| g.valid[[r / factor, c / factor]]);
    Grid2D { geo, values, valid }
}

/// Marks cells invalid wherever `mask` is true.
pub fn apply_mask(g: &Grid2D, mask: &Array2<bool>) -> Result<Grid2D> {
    if mask.dim() != g.shape() {
        return Err(Error::ShapeMismatch {
            expected: g.shape(),
            actual: mask.dim(),
        });
    }
    let valid = Zip::from(&g.valid)
        .and(mask)
        .map_collect(|&ok, &masked| ok && !masked);
    Grid2D::new(g.geo, g.values.clone(), valid)
}
