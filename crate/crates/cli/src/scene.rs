//! Scene, guide and product files on disk.
//!
//! An input scene is a container holding `LST_GAC` (cloud cells carry the
//! cloud special code) and any of the quality layers, all on one coarse grid.
//! A guide file holds `landcover`, `elevation` and `canopy` on a
//! high-resolution grid that contains every scene's refined extent.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use chrono::{DateTime, Utc};
use ndarray::Array2;

use lstsr::codec::{
    self, pack, pack_with_specials, profiles, unpack_with_specials, DecodeMode, PackedGrid,
    PackedHeader, ProductMeta, SpecialCell, Unpacked, VariableProfile, CLOUD_CODE,
};
use lstsr::guide::{build_guide, ClassGrid, GuideStack};
use lstsr::synth::Scene;
use lstsr::{GeoTransform, Grid2D};

pub fn find<'a>(vars: &'a [PackedGrid], name: &str) -> Option<&'a PackedGrid> {
    vars.iter().find(|v| v.header.variable_name == name)
}

pub fn require<'a>(vars: &'a [PackedGrid], name: &str, path: &Path) -> Result<&'a PackedGrid> {
    find(vars, name).ok_or_else(|| anyhow!("{}: no variable {name}", path.display()))
}

#[derive(Debug)]
pub struct InputScene {
    pub path: PathBuf,
    pub meta: ProductMeta,
    pub lst: Unpacked,
    pub quality: Vec<(&'static VariableProfile, Unpacked)>,
}

impl InputScene {
    pub fn geo(&self) -> GeoTransform {
        *self.lst.grid.geo()
    }

    pub fn cloud_mask(&self) -> Array2<bool> {
        self.lst.special_mask(CLOUD_CODE)
    }

    /// Fraction of cells that are invalid for reasons other than cloud.
    pub fn gap_fraction(&self) -> f64 {
        let cloud = self.cloud_mask();
        let gaps = self
            .lst
            .grid
            .valid()
            .iter()
            .zip(cloud.iter())
            .filter(|(&ok, &c)| !ok && !c)
            .count();
        gaps as f64 / self.lst.grid.geo().len().max(1) as f64
    }
}

pub fn read_scene(path: &Path, mode: DecodeMode) -> Result<InputScene> {
    let vars = codec::read_file(path)?;
    let lst_var = require(&vars, profiles::LST_GAC.name, path)?;
    let lst = unpack_with_specials(lst_var, mode)?;
    if lst.invalidated > 0 {
        log::warn!(
            "{}: {} undeclared codes invalidated",
            path.display(),
            lst.invalidated
        );
    }
    let mut quality = Vec::new();
    for profile in profiles::QUALITY.iter() {
        if let Some(v) = find(&vars, profile.name) {
            v.header.geo.require_match(lst.grid.geo(), profile.name)?;
            quality.push((profile, unpack_with_specials(v, mode)?));
        }
    }
    Ok(InputScene {
        path: path.to_path_buf(),
        meta: lst_var.header.meta(),
        lst,
        quality,
    })
}

pub fn load_guide(path: &Path) -> Result<GuideStack> {
    let vars =
        codec::read_file(path).with_context(|| format!("reading guide {}", path.display()))?;
    let grid = |name: &str| -> Result<Grid2D> { Ok(codec::unpack(require(&vars, name, path)?)?) };
    let landcover = ClassGrid::from_grid(&grid(profiles::LANDCOVER.name)?)?;
    Ok(build_guide(
        landcover,
        grid(profiles::ELEVATION.name)?,
        grid(profiles::CANOPY.name)?,
    )?)
}

pub fn pack_guide(g: &GuideStack, meta: &ProductMeta) -> Result<Vec<PackedGrid>> {
    let var = |p: &VariableProfile, grid: &Grid2D| {
        pack(grid, &PackedHeader::from_profile(p, g.geo, meta))
    };
    Ok(vec![
        var(&profiles::LANDCOVER, &g.landcover.to_grid())?,
        var(&profiles::ELEVATION, &g.elevation)?,
        var(&profiles::CANOPY, &g.canopy)?,
    ])
}

/// Synthetic quality layers on a coarse grid.
pub fn synthetic_quality(geo: GeoTransform) -> Vec<(&'static VariableProfile, Grid2D)> {
    let (rows, cols) = geo.shape();
    let across = |c: usize| {
        if cols > 1 {
            (2.0 * c as f64 / (cols - 1) as f64 - 1.0).abs()
        } else {
            0.0
        }
    };
    let down = |r: usize| r as f64 / rows as f64;
    let field = |f: &dyn Fn(usize, usize) -> f64| {
        Grid2D::from_values(geo, Array2::from_shape_fn(geo.shape(), |(r, c)| f(r, c)))
    };
    vec![
        (&profiles::SATZEN, field(&|_, c| 68.0 * across(c))),
        (&profiles::SUNZEN, field(&|r, _| 40.0 + 30.0 * down(r))),
        (
            &profiles::SCANLINE_TIME,
            field(&|r, _| 10.5 + 0.2 * down(r)),
        ),
        (&profiles::TEST_MAE, field(&|_, _| 1.2)),
        (&profiles::R2, field(&|_, _| 0.95)),
    ]
    .into_iter()
    .map(|(p, g)| (p, g.expect("shape from geo")))
    .collect()
}

/// Packs a synthetic scene's source as an input scene, cloud cells coded.
pub fn pack_input_scene(scene: &Scene, meta: &ProductMeta) -> Result<Vec<PackedGrid>> {
    let geo = *scene.source.geo();
    let specials: Vec<SpecialCell> = scene
        .cloud
        .indexed_iter()
        .filter(|(_, &c)| c)
        .map(|((row, col), _)| SpecialCell {
            row,
            col,
            code: CLOUD_CODE,
        })
        .collect();
    let mut vars = vec![pack_with_specials(
        &scene.source,
        &PackedHeader::from_profile(&profiles::LST_GAC, geo, meta),
        &specials,
    )?];
    for (p, g) in synthetic_quality(geo) {
        vars.push(pack(&g, &PackedHeader::from_profile(p, geo, meta))?);
    }
    Ok(vars)
}

pub fn pack_truth(scene: &Scene, meta: &ProductMeta) -> Result<Vec<PackedGrid>> {
    Ok(vec![pack(
        &scene.truth,
        &PackedHeader::from_profile(&profiles::LST, *scene.truth.geo(), meta),
    )?])
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let naive = chrono::NaiveDateTime::parse_from_str(s, "%Y%m%d%H%M")
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ"))
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|_| {
            anyhow!("bad timestamp {s:?}; expected YYYYMMDDhhmm or YYYY-MM-DDThh:mm[:ssZ]")
        })?;
    Ok(naive.and_utc())
}

/// `*.npg` files directly inside `dir`, sorted by name.
pub fn list_products(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == codec::EXTENSION) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lstsr::codec::Node;
    use lstsr::synth::{generate, SynthParams};

    fn meta() -> ProductMeta {
        ProductMeta {
            timestamp: parse_timestamp("202008201030").unwrap(),
            satellite: "MetOp-A".into(),
            version: "v1.0".into(),
            node: Node::Day,
        }
    }

    #[test]
    fn scene_file_round_trip_keeps_clouds() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(
            &SynthParams {
                n_rows: 50,
                n_cols: 60,
                cloud_fraction: 0.2,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let path = dir.path().join("scene.npg");
        codec::write_file(&path, &pack_input_scene(&s, &meta()).unwrap()).unwrap();
        let back = read_scene(&path, DecodeMode::Strict).unwrap();
        assert_eq!(back.cloud_mask(), s.cloud);
        assert_eq!(back.quality.len(), 5);
        assert_eq!(back.gap_fraction(), 0.0);
        assert_eq!(back.meta, meta());
    }

    #[test]
    fn guide_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(
            &SynthParams {
                n_rows: 50,
                n_cols: 60,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let path = dir.path().join("guide.npg");
        codec::write_file(&path, &pack_guide(&s.guide, &meta()).unwrap()).unwrap();
        let g = load_guide(&path).unwrap();
        assert_eq!(g.landcover, s.guide.landcover);
        for (a, b) in g.elevation.values().iter().zip(s.guide.elevation.values()) {
            assert!((a - b).abs() <= 0.25 + 1e-9);
        }
    }

    #[test]
    fn timestamps() {
        assert_eq!(
            parse_timestamp("2020-08-20T10:30").unwrap(),
            parse_timestamp("202008201030").unwrap()
        );
        assert!(parse_timestamp("2020").is_err());
    }
}
