//! Thin wrappers: synth, coarsen, pack, unpack, tileplan.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use lstsr::codec::{self, format_filename, pack, profiles, PackedHeader, ProductMeta};
use lstsr::grid::coarsen_nan_aware;
use lstsr::synth::{generate, Scene, SynthParams};
use lstsr::tiler::{plan, TilePlan};

use crate::scene::{pack_guide, pack_input_scene, pack_truth, require};
use crate::textgrid;

pub const GUIDE_FILE: &str = "guide.npg";

#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub scene: PathBuf,
    pub guide: PathBuf,
    pub truth: PathBuf,
}

/// Writes `<dir>/input/<product name>`, `<dir>/truth/<product name>` and
/// `<dir>/guide.npg` for one synthetic scene.
pub fn write_synthetic(dir: &Path, scene: &Scene, meta: &ProductMeta) -> Result<SynthOutputs> {
    let input = pack_input_scene(scene, meta)?;
    let name = format_filename(&input[0].header)?;
    let (in_dir, truth_dir) = (dir.join("input"), dir.join("truth"));
    std::fs::create_dir_all(&in_dir)?;
    std::fs::create_dir_all(&truth_dir)?;
    let out = SynthOutputs {
        scene: in_dir.join(&name),
        guide: dir.join(GUIDE_FILE),
        truth: truth_dir.join(&name),
    };
    codec::write_file(&out.scene, &input)?;
    codec::write_file(&out.truth, &pack_truth(scene, meta)?)?;
    codec::write_file(&out.guide, &pack_guide(&scene.guide, meta)?)?;
    Ok(out)
}

pub fn cmd_synth(
    dir: &Path,
    p: &SynthParams,
    factor: usize,
    meta: &ProductMeta,
) -> Result<SynthOutputs> {
    let scene = generate(p, factor)?;
    write_synthetic(dir, &scene, meta)
}

/// Coarsens one variable of a product file into a single-variable file.
pub fn cmd_coarsen(input: &Path, variable: &str, factor: usize, output: &Path) -> Result<()> {
    let vars = codec::read_file(input)?;
    let var = require(&vars, variable, input)?;
    let grid = codec::unpack(var)?;
    let coarse = coarsen_nan_aware(&grid, factor)?;
    let mut header = var.header.clone();
    header.geo = *coarse.geo();
    codec::write_file(output, &[pack(&coarse, &header)?])?;
    Ok(())
}

/// Packs a text grid; with `output` a directory, the file is named canonically.
pub fn cmd_pack(
    text_grid: &Path,
    variable: &str,
    meta: &ProductMeta,
    output: &Path,
) -> Result<PathBuf> {
    let profile =
        profiles::by_name(variable).ok_or_else(|| anyhow!("unknown variable {variable:?}"))?;
    let text = std::fs::read_to_string(text_grid)
        .with_context(|| format!("reading {}", text_grid.display()))?;
    let grid =
        textgrid::parse(&text).with_context(|| format!("parsing {}", text_grid.display()))?;
    let packed = pack(
        &grid,
        &PackedHeader::from_profile(profile, *grid.geo(), meta),
    )?;
    let path = if output.is_dir() {
        output.join(format_filename(&packed.header)?)
    } else {
        output.to_path_buf()
    };
    codec::write_file(&path, &[packed])?;
    Ok(path)
}

/// Text rendering of one variable (the first when `variable` is `None`).
pub fn cmd_unpack(input: &Path, variable: Option<&str>) -> Result<String> {
    let vars = codec::read_file(input)?;
    let var = match variable {
        Some(name) => require(&vars, name, input)?,
        None => vars
            .first()
            .ok_or_else(|| anyhow!("{}: no variables", input.display()))?,
    };
    Ok(textgrid::write(&codec::unpack(var)?))
}

pub fn cmd_tileplan(dims: [usize; 6]) -> Result<(TilePlan, String)> {
    let [r, c, ph, pw, sv, sh] = dims;
    let p = plan(r, c, ph, pw, sv, sh)?;
    let mut out = String::new();
    for w in &p.windows {
        let _ = writeln!(out, "{} {} {} {}", w.row0, w.col0, w.height, w.width);
    }
    let _ = writeln!(out, "{} windows", p.len());
    Ok((p, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tileplan_prints_count() {
        let (p, text) = cmd_tileplan([960, 960, 240, 240, 240, 240]).unwrap();
        assert_eq!(p.len(), 16);
        assert!(text.ends_with("16 windows\n"));
        assert!(cmd_tileplan([10, 10, 20, 20, 5, 5]).is_err());
    }
}
