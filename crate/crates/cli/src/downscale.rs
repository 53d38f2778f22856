//! The `downscale` batch: every scene in the input directory is cloud-masked,
//! super-resolved tile by tile, re-masked at high resolution and written with
//! its quality layers replicated to the output grid.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ndarray::Array2;

use lstsr::codec::{
    self, format_filename, pack, pack_with_specials, profiles, DecodeMode, PackedGrid,
    PackedHeader, SpecialCell, CLOUD_CODE,
};
use lstsr::grid::{apply_mask, replicate_nearest};
use lstsr::guide::{
    edge_coefficients, import_coefficients, normalize_guide, CoefficientField, GuideStack,
};
use lstsr::pipeline::{solve_tiled, TiledReport};
use lstsr::{Error, GeoTransform, Grid2D};

use crate::config::{ConfigFile, RunConfig};
use crate::scene::{list_products, load_guide, read_scene, InputScene};

pub const RUN_LOG: &str = "run.log";

#[derive(Debug)]
pub enum Outcome {
    Written {
        output: PathBuf,
        report: TiledReport,
        wall_time: f64,
    },
    Skipped(String),
    Failed(anyhow::Error),
}

#[derive(Debug, Default)]
pub struct BatchSummary {
    pub scenes: usize,
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl BatchSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 {
            1
        } else {
            0
        }
    }
}

fn is_fatal(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<Error>(), Some(Error::GeoMismatch(_)))
}

/// Whole-guide conductances, computed once and windowed per scene.
struct Coefficients {
    field: CoefficientField,
}

impl Coefficients {
    fn prepare(cfg: &RunConfig, guide: &GuideStack) -> Result<Self> {
        let field = match &cfg.coefficient_file {
            Some(path) => {
                let imported = import_coefficients(path, &guide.geo)
                    .with_context(|| format!("importing coefficients {}", path.display()))?;
                if imported.clamped > 0 {
                    log::warn!(
                        "{} imported conductances clamped to [0, 1]",
                        imported.clamped
                    );
                }
                imported.field
            }
            None => edge_coefficients(&normalize_guide(guide)?, &cfg.guide)?,
        };
        Ok(Self { field })
    }

    fn for_scene(&self, hr: &GeoTransform) -> Result<CoefficientField> {
        let (r0, c0) = self.field.geo.offset_of(hr).ok_or_else(|| {
            Error::GeoMismatch(format!(
                "guide {:?} does not cover scene {:?}",
                self.field.geo, hr
            ))
        })?;
        Ok(self.field.window(r0, c0, hr.n_rows, hr.n_cols))
    }
}

fn hr_mask(mask: &Array2<bool>, factor: usize) -> Array2<bool> {
    Array2::from_shape_fn((mask.nrows() * factor, mask.ncols() * factor), |(r, c)| {
        mask[[r / factor, c / factor]]
    })
}

/// Output variables: LST, LST_GAC and the quality layers, all on the output grid.
fn product_variables(scene: &InputScene, lst: &Grid2D, factor: usize) -> Result<Vec<PackedGrid>> {
    let hr = *lst.geo();
    let mut vars = vec![pack(
        lst,
        &PackedHeader::from_profile(&profiles::LST, hr, &scene.meta),
    )?];

    let hr_cloud = hr_mask(&scene.cloud_mask(), factor);
    let cloud_cells: Vec<SpecialCell> = hr_cloud
        .indexed_iter()
        .filter(|(_, &c)| c)
        .map(|((row, col), _)| SpecialCell {
            row,
            col,
            code: CLOUD_CODE,
        })
        .collect();
    let gac = replicate_nearest(&scene.lst.grid, factor);
    vars.push(pack_with_specials(
        &gac,
        &PackedHeader::from_profile(&profiles::LST_GAC, hr, &scene.meta),
        &cloud_cells,
    )?);

    for (profile, layer) in &scene.quality {
        let up = replicate_nearest(&layer.grid, factor);
        vars.push(pack(
            &up,
            &PackedHeader::from_profile(profile, hr, &scene.meta),
        )?);
    }
    Ok(vars)
}

fn process(cfg: &RunConfig, coeffs: &Coefficients, path: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let mode = if cfg.strict_codec {
        DecodeMode::Strict
    } else {
        DecodeMode::Lenient
    };
    let scene = read_scene(path, mode)?;
    let gaps = scene.gap_fraction();
    if let Some(limit) = cfg.max_gap_fraction {
        if gaps > limit {
            return Ok(Outcome::Skipped(format!(
                "gap fraction {gaps:.4} exceeds {limit}"
            )));
        }
    }
    let factor = cfg.solver.factor;
    let hr = scene.geo().refined(factor);
    let field = coeffs.for_scene(&hr)?;

    let cloud = scene.cloud_mask();
    let source = apply_mask(&scene.lst.grid, &cloud)?;
    if source.valid_count() == 0 {
        log::warn!("{}: scene fully masked", path.display());
    }
    let (out, report) = solve_tiled(&source, &field, &cfg.solver, &cfg.tile, cfg.workers)?;
    let out = apply_mask(&out, &hr_mask(&cloud, factor))?;

    let vars = product_variables(&scene, &out, factor)?;
    let name = format_filename(&vars[0].header)?;
    let output = cfg.output_dir.join(name);
    codec::write_file(&output, &vars)?;
    Ok(Outcome::Written {
        output,
        report,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn log_line(path: &Path, outcome: &Outcome) -> String {
    let scene = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    match outcome {
        Outcome::Written {
            output,
            report,
            wall_time,
        } => {
            format!(
            "scene={scene} status=ok output={} windows={} max_iterations={} final_max_delta={:e} \
             consistency_residual={:e} empty_blocks={} wall_time_s={wall_time:.3}",
            output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            report.windows,
            report.max_iterations(),
            report.tiles.iter().map(|t| t.final_max_delta).fold(0.0, f64::max),
            report.consistency_residual,
            report.empty_blocks,
        )
        }
        Outcome::Skipped(why) => format!("scene={scene} status=skipped reason=\"{why}\""),
        Outcome::Failed(e) => format!("scene={scene} status=failed error=\"{e:#}\""),
    }
}

/// Runs the batch. `Err` means a fatal (configuration or geometry) failure.
pub fn cmd_downscale(file: &ConfigFile) -> Result<BatchSummary> {
    let cfg = file.resolve()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let log_path = cfg.output_dir.join(RUN_LOG);
    let mut run_log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    writeln!(
        run_log,
        "run started {}",
        chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ")
    )?;
    for line in file.to_toml().lines().filter(|l| !l.trim().is_empty()) {
        writeln!(run_log, "config {line}")?;
    }

    let scenes = list_products(&cfg.input_dir)?;
    log::info!("{} scenes", scenes.len());
    writeln!(run_log, "{} scenes", scenes.len())?;
    let mut summary = BatchSummary {
        scenes: scenes.len(),
        ..Default::default()
    };
    if scenes.is_empty() {
        return Ok(summary);
    }

    let guide = load_guide(&cfg.guide_path)?;
    let coeffs = Coefficients::prepare(&cfg, &guide)?;
    drop(guide);

    let run_one = |path: &PathBuf| match process(&cfg, &coeffs, path) {
        Ok(o) => o,
        Err(e) => Outcome::Failed(e),
    };
    let outcomes: Vec<Outcome> = if cfg.scene_workers > 1 {
        use rayon::prelude::*;
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.scene_workers)
            .build()?
            .install(|| scenes.par_iter().map(run_one).collect())
    } else {
        let mut v = Vec::with_capacity(scenes.len());
        for path in &scenes {
            let o = run_one(path);
            let fatal = matches!(&o, Outcome::Failed(e) if is_fatal(e));
            v.push(o);
            if fatal {
                break;
            }
        }
        v
    };

    let mut fatal = None;
    for (path, outcome) in scenes.iter().zip(outcomes) {
        writeln!(run_log, "{}", log_line(path, &outcome))?;
        match outcome {
            Outcome::Written { .. } => summary.written += 1,
            Outcome::Skipped(why) => {
                log::warn!("{}: skipped, {why}", path.display());
                summary.skipped += 1;
            }
            Outcome::Failed(e) => {
                log::error!("{}: {e:#}", path.display());
                summary.failed += 1;
                if is_fatal(&e) && fatal.is_none() {
                    fatal = Some(e);
                }
            }
        }
    }
    writeln!(
        run_log,
        "run finished written={} skipped={} failed={}",
        summary.written, summary.skipped, summary.failed
    )?;
    match fatal {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
