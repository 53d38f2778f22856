//! High-resolution guide (land cover, elevation, canopy height) and the per-edge
//! diffusion conductances derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Zip};

use crate::codec::{self, profiles, DecodeMode, PackedGrid, PackedHeader, ProductMeta};
use crate::error::{Error, Result};
use crate::grid::{check_factor, minmax_scale, GeoTransform, Grid2D, ScaleParams};

/// Categorical raster of LCCS class codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    pub geo: GeoTransform,
    pub classes: Array2<u16>,
    pub valid: Array2<bool>,
}

impl ClassGrid {
    pub fn new(geo: GeoTransform, classes: Array2<u16>, valid: Array2<bool>) -> Result<Self> {
        for dim in [classes.dim(), valid.dim()] {
            if dim != geo.shape() {
                return Err(Error::ShapeMismatch {
                    expected: geo.shape(),
                    actual: dim,
                });
            }
        }
        Ok(Self {
            geo,
            classes,
            valid,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> Option<u16> {
        self.valid[[row, col]].then(|| self.classes[[row, col]])
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D::new(self.geo, self.classes.mapv(f64::from), self.valid.clone())
            .expect("shapes agree")
    }

    pub fn from_grid(g: &Grid2D) -> Result<Self> {
        let mut classes = Array2::zeros(g.shape());
        for ((r, c), &v) in g.values().indexed_iter() {
            if g.valid()[[r, c]] {
                if v < 0.0 || v > u16::MAX as f64 || v.fract() != 0.0 {
                    return Err(Error::CorruptData(format!("class code {v} at ({r}, {c})")));
                }
                classes[[r, c]] = v as u16;
            }
        }
        Self::new(*g.geo(), classes, g.valid().clone())
    }
}

/// Most frequent valid class per `factor`×`factor` block; ties go to the smaller
/// code and all-invalid blocks stay invalid.
pub fn mode_downsample_landcover(lc: &ClassGrid, factor: usize) -> Result<ClassGrid> {
    check_factor(factor)?;
    let geo = lc.geo.coarsened(factor)?;
    let mut classes = Array2::zeros(geo.shape());
    let mut valid = Array2::from_elem(geo.shape(), false);
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for br in 0..geo.n_rows {
        for bc in 0..geo.n_cols {
            counts.clear();
            for r in br * factor..(br + 1) * factor {
                for c in bc * factor..(bc + 1) * factor {
                    if let Some(k) = lc.get(r, c) {
                        *counts.entry(k).or_default() += 1;
                    }
                }
            }
            // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
            // so reverse to favour the smallest code on ties.
            if let Some((&k, _)) = counts.iter().rev().max_by_key(|(_, &n)| n) {
                classes[[br, bc]] = k;
                valid[[br, bc]] = true;
            }
        }
    }
    ClassGrid::new(geo, classes, valid)
}

#[derive(Debug, Clone)]
pub struct GuideStack {
    pub geo: GeoTransform,
    pub landcover: ClassGrid,
    pub elevation: Grid2D,
    pub canopy: Grid2D,
    /// Intersection of the channel masks.
    pub valid: Array2<bool>,
}

pub fn build_guide(landcover: ClassGrid, elevation: Grid2D, canopy: Grid2D) -> Result<GuideStack> {
    let geo = landcover.geo;
    geo.require_match(elevation.geo(), "elevation channel")?;
    geo.require_match(canopy.geo(), "canopy channel")?;
    let valid = Zip::from(&landcover.valid)
        .and(elevation.valid())
        .and(canopy.valid())
        .map_collect(|&a, &b, &c| a && b && c);
    if !valid.iter().any(|&v| v) {
        log::warn!("guide channels have no jointly valid cell");
    }
    Ok(GuideStack {
        geo,
        landcover,
        elevation,
        canopy,
        valid,
    })
}

impl GuideStack {
    /// The part of the guide covering `target`, which must be an aligned sub-window.
    pub fn subset(&self, target: &GeoTransform) -> Result<GuideStack> {
        if self.geo.matches(target) {
            return Ok(self.clone());
        }
        let (r0, c0) = self.geo.offset_of(target).ok_or_else(|| {
            Error::GeoMismatch(format!("guide {:?} does not cover {:?}", self.geo, target))
        })?;
        let sl = s![r0..r0 + target.n_rows, c0..c0 + target.n_cols];
        let geo = self.geo.window(r0, c0, target.n_rows, target.n_cols);
        let cut = |g: &Grid2D| {
            Grid2D::new(
                geo,
                g.values().slice(sl).to_owned(),
                g.valid().slice(sl).to_owned(),
            )
        };
        let landcover = ClassGrid::new(
            geo,
            self.landcover.classes.slice(sl).to_owned(),
            self.landcover.valid.slice(sl).to_owned(),
        )?;
        build_guide(landcover, cut(&self.elevation)?, cut(&self.canopy)?)
    }
}

/// Guide with the continuous channels min-max scaled over jointly valid cells.
#[derive(Debug, Clone)]
pub struct NormalizedGuide {
    pub geo: GeoTransform,
    pub landcover: Array2<u16>,
    pub elevation: Array2<f64>,
    pub canopy: Array2<f64>,
    pub valid: Array2<bool>,
}

pub fn normalize_guide(stack: &GuideStack) -> Result<NormalizedGuide> {
    let joint = |g: &Grid2D| Grid2D::new(stack.geo, g.values().clone(), stack.valid.clone());
    let elevation = joint(&stack.elevation)?;
    let canopy = joint(&stack.canopy)?;
    let scaled = |g: &Grid2D| -> Result<Array2<f64>> {
        let p = ScaleParams::fit(g).ok_or(Error::EmptyGuide)?;
        Ok(minmax_scale(g, p).into_parts().1)
    };
    Ok(NormalizedGuide {
        geo: stack.geo,
        landcover: stack.landcover.classes.clone(),
        elevation: scaled(&elevation)?,
        canopy: scaled(&canopy)?,
        valid: stack.valid.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeStop {
    /// exp(-(d/kappa)^2)
    Exponential,
    /// 1 / (1 + (d/kappa)^2)
    Rational,
}

impl std::str::FromStr for EdgeStop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(EdgeStop::Exponential),
            "rational" => Ok(EdgeStop::Rational),
            other => Err(Error::InvalidParams(format!(
                "unknown edge-stopping form {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuideParams {
    pub kappa: f64,
    pub w_landcover: f64,
    pub w_elevation: f64,
    pub w_canopy: f64,
    pub form: EdgeStop,
}

impl Default for GuideParams {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            w_landcover: 1.0 / 3.0,
            w_elevation: 1.0 / 3.0,
            w_canopy: 1.0 / 3.0,
            form: EdgeStop::Exponential,
        }
    }
}

impl GuideParams {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_landcover, self.w_elevation, self.w_canopy];
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidParams(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidParams(format!(
                "channel weights {w:?} must be non-negative with positive sum"
            )));
        }
        Ok(())
    }

    /// Weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> [f64; 3] {
        let s = self.w_landcover + self.w_elevation + self.w_canopy;
        [
            self.w_landcover / s,
            self.w_elevation / s,
            self.w_canopy / s,
        ]
    }

    pub fn conductance(&self, d: f64) -> f64 {
        let x = d / self.kappa;
        let c = match self.form {
            EdgeStop::Exponential => (-x * x).exp(),
            EdgeStop::Rational => 1.0 / (1.0 + x * x),
        };
        c.clamp(0.0, 1.0)
    }
}

/// Per-edge conductances on the high-resolution lattice.
///
/// `c_horizontal[[r, c]]` links (r, c) with (r, c + 1) and `c_vertical[[r, c]]`
/// links (r, c) with (r + 1, c). The last column of `c_horizontal` and the last
/// row of `c_vertical` have no partner edge and are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub geo: GeoTransform,
    pub c_horizontal: Array2<f64>,
    pub c_vertical: Array2<f64>,
}

impl CoefficientField {
    /// Builds a field, clamping entries into [0, 1] and zeroing boundary slots.
    /// Returns the field and the number of entries that needed clamping.
    pub fn new(
        geo: GeoTransform,
        mut c_horizontal: Array2<f64>,
        mut c_vertical: Array2<f64>,
    ) -> Result<(Self, usize)> {
        for dim in [c_horizontal.dim(), c_vertical.dim()] {
            if dim != geo.shape() {
                return Err(Error::GeoMismatch(format!(
                    "coefficient shape {dim:?} vs target {:?}",
                    geo.shape()
                )));
            }
        }
        let mut clamped = 0usize;
        for a in [&mut c_horizontal, &mut c_vertical] {
            for v in a.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                    clamped += 1;
                } else if !(0.0..=1.0).contains(v) {
                    *v = v.clamp(0.0, 1.0);
                    clamped += 1;
                }
            }
        }
        c_horizontal.column_mut(geo.n_cols - 1).fill(0.0);
        c_vertical.row_mut(geo.n_rows - 1).fill(0.0);
        Ok((
            Self {
                geo,
                c_horizontal,
                c_vertical,
            },
            clamped,
        ))
    }

    /// Uniform conductance on every interior edge.
    pub fn uniform(geo: GeoTransform, c: f64) -> Self {
        Self::new(
            geo,
            Array2::from_elem(geo.shape(), c),
            Array2::from_elem(geo.shape(), c),
        )
        .expect("shape from geo")
        .0
    }

    pub fn window(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        let geo = self.geo.window(row0, col0, height, width);
        let mut ch = self
            .c_horizontal
            .slice(s![row0..row0 + height, col0..col0 + width])
            .to_owned();
        let mut cv = self
            .c_vertical
            .slice(s![row0..row0 + height, col0..col0 + width])
            .to_owned();
        ch.column_mut(width - 1).fill(0.0);
        cv.row_mut(height - 1).fill(0.0);
        Self {
            geo,
            c_horizontal: ch,
            c_vertical: cv,
        }
    }
}

fn edge_dissimilarity(
    g: &NormalizedGuide,
    w: &[f64; 3],
    a: (usize, usize),
    b: (usize, usize),
) -> f64 {
    let lc = if g.landcover[a] != g.landcover[b] {
        1.0
    } else {
        0.0
    };
    w[0] * lc
        + w[1] * (g.elevation[a] - g.elevation[b]).abs()
        + w[2] * (g.canopy[a] - g.canopy[b]).abs()
}

/// Closed-form conductances: weighted guide dissimilarity across each edge fed
/// through the edge-stopping function. Edges touching an invalid guide cell get 0.
pub fn edge_coefficients(g: &NormalizedGuide, p: &GuideParams) -> Result<CoefficientField> {
    p.validate()?;
    let w = p.normalized_weights();
    let (rows, cols) = g.geo.shape();
    let edge = |a: (usize, usize), b: (usize, usize)| {
        if g.valid[a] && g.valid[b] {
            p.conductance(edge_dissimilarity(g, &w, a, b))
        } else {
            0.0
        }
    };
    let ch = Array2::from_shape_fn((rows, cols), |(r, c)| {
        if c + 1 < cols {
            edge((r, c), (r, c + 1))
        } else {
            0.0
        }
    });
    let cv = Array2::from_shape_fn((rows, cols), |(r, c)| {
        if r + 1 < rows {
            edge((r, c), (r + 1, c))
        } else {
            0.0
        }
    });
    Ok(CoefficientField::new(g.geo, ch, cv)?.0)
}

/// Packs a coefficient field as the two variables `c_horizontal` and `c_vertical`.
pub fn pack_coefficients(field: &CoefficientField, meta: &ProductMeta) -> Result<Vec<PackedGrid>> {
    let mut out = Vec::with_capacity(2);
    for (profile, values) in [
        (&profiles::C_HORIZONTAL, &field.c_horizontal),
        (&profiles::C_VERTICAL, &field.c_vertical),
    ] {
        let h = PackedHeader::from_profile(profile, field.geo, meta);
        let g = Grid2D::from_values(field.geo, values.clone())?;
        out.push(codec::pack(&g, &h)?);
    }
    Ok(out)
}

pub fn export_coefficients(
    path: &Path,
    field: &CoefficientField,
    meta: &ProductMeta,
) -> Result<()> {
    codec::write_file(path, &pack_coefficients(field, meta)?)
}

/// Result of reading externally produced conductances.
#[derive(Debug, Clone)]
pub struct ImportedCoefficients {
    pub field: CoefficientField,
    /// Entries outside [0, 1] (or missing) that were clamped.
    pub clamped: usize,
}

pub fn coefficients_from_packed(
    vars: &[PackedGrid],
    target: &GeoTransform,
) -> Result<ImportedCoefficients> {
    let find = |name: &str| {
        vars.iter()
            .find(|v| v.header.variable_name == name)
            .ok_or_else(|| Error::CorruptData(format!("coefficient file lacks variable {name:?}")))
    };
    let mut arrays = Vec::with_capacity(2);
    for name in ["c_horizontal", "c_vertical"] {
        let v = find(name)?;
        let (lo, hi) = (
            v.header.dequantize(v.header.code_range().0),
            v.header.dequantize(v.header.code_range().1),
        );
        if lo > 0.0 || hi < 1.0 {
            return Err(Error::CorruptData(format!(
                "{name}: encoding cannot represent [0, 1]"
            )));
        }
        target.require_match(&v.header.geo, name)?;
        let u = codec::unpack_with_specials(v, DecodeMode::Strict)?;
        arrays.push(u.grid.to_nan_array());
    }
    let cv = arrays.pop().expect("two arrays");
    let ch = arrays.pop().expect("two arrays");
    let (field, clamped) = CoefficientField::new(*target, ch, cv)?;
    if clamped > 0 {
        log::warn!("clamped {clamped} imported conductances into [0, 1]");
    }
    Ok(ImportedCoefficients { field, clamped })
}

pub fn import_coefficients(path: &Path, target: &GeoTransform) -> Result<ImportedCoefficients> {
    coefficients_from_packed(&codec::read_file(path)?, target)
}
