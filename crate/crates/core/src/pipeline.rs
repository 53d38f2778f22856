//! Whole-scene solving: plan patches, solve them in parallel, stitch, re-adjust.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid2D, ScaleParams};
use crate::guide::CoefficientField;
use crate::solver::{
    adjust_step, consistency_residual, solve_with_scale, SolveReport, SolverParams,
};
use crate::tiler::{extract, plan, Stitcher, TilePlan, Window};

/// Patch geometry in high-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_v: usize,
    pub stride_h: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            patch_h: 1920,
            patch_w: 1920,
            stride_v: 1480,
            stride_h: 1790,
        }
    }
}

impl TileSpec {
    /// Clamps the patch to the raster and the strides to the patch.
    pub fn fitted(&self, n_rows: usize, n_cols: usize) -> Self {
        let patch_h = self.patch_h.min(n_rows);
        let patch_w = self.patch_w.min(n_cols);
        Self {
            patch_h,
            patch_w,
            stride_v: self.stride_v.min(patch_h),
            stride_h: self.stride_h.min(patch_w),
        }
    }

    pub fn check_factor(&self, factor: usize) -> Result<()> {
        for (name, v) in [
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("stride_v", self.stride_v),
            ("stride_h", self.stride_h),
        ] {
            if v == 0 || v % factor != 0 {
                return Err(Error::InvalidParams(format!(
                    "{name} = {v} is not a positive multiple of factor {factor}"
                )));
            }
        }
        Ok(())
    }

    /// The plan actually used for an `n_rows`×`n_cols` high-resolution raster.
    pub fn plan_for(&self, n_rows: usize, n_cols: usize, factor: usize) -> Result<TilePlan> {
        self.check_factor(factor)?;
        let f = self.fitted(n_rows, n_cols);
        plan(n_rows, n_cols, f.patch_h, f.patch_w, f.stride_v, f.stride_h)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TiledReport {
    pub windows: usize,
    pub tiles: Vec<SolveReport>,
    pub consistency_residual: f64,
    pub empty_blocks: usize,
    pub wall_time: f64,
}

impl TiledReport {
    pub fn max_iterations(&self) -> usize {
        self.tiles
            .iter()
            .map(|t| t.iterations_run)
            .max()
            .unwrap_or(0)
    }
}

fn solve_window(
    source: &Grid2D,
    coeffs: &CoefficientField,
    params: &SolverParams,
    scale: Option<ScaleParams>,
    w: &Window,
) -> Result<(Grid2D, SolveReport)> {
    let f = params.factor;
    let coarse = Window {
        row0: w.row0 / f,
        col0: w.col0 / f,
        height: w.height / f,
        width: w.width / f,
    };
    let sub_source = extract(source, &coarse)?;
    let sub_coeffs = coeffs.window(w.row0, w.col0, w.height, w.width);
    solve_with_scale(&sub_source, &sub_coeffs, params, scale)
}

/// Solves a whole scene patch by patch on `workers` threads.
///
/// All patches share the scene-wide scaler, patches are reduced in plan order,
/// and the stitched field gets one more block adjustment, so the result is
/// independent of `workers`.
pub fn solve_tiled(
    source: &Grid2D,
    coeffs: &CoefficientField,
    params: &SolverParams,
    spec: &TileSpec,
    workers: usize,
) -> Result<(Grid2D, TiledReport)> {
    let started = Instant::now();
    params.validate()?;
    if workers == 0 {
        return Err(Error::InvalidParams("workers must be at least 1".into()));
    }
    let factor = params.factor;
    let hr_geo = source.geo().refined(factor);
    coeffs
        .geo
        .require_match(&hr_geo, "coefficients vs refined source")?;
    let tiles = spec.plan_for(hr_geo.n_rows, hr_geo.n_cols, factor)?;
    let scale = ScaleParams::fit(source);
    log::info!(
        "solving {} patches of {}x{} on {} worker(s)",
        tiles.len(),
        tiles.patch_h,
        tiles.patch_w,
        workers
    );

    let run = || -> Result<Vec<(Grid2D, SolveReport)>> {
        tiles
            .windows
            .par_iter()
            .map(|w| solve_window(source, coeffs, params, scale, w))
            .collect()
    };
    let solved = if workers == 1 {
        tiles
            .windows
            .iter()
            .map(|w| solve_window(source, coeffs, params, scale, w))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?
            .install(run)?
    };

    let mut stitcher = Stitcher::new(&tiles, hr_geo)?;
    let mut reports = Vec::with_capacity(solved.len());
    for (i, (patch, rep)) in solved.into_iter().enumerate() {
        stitcher.insert(i, patch)?;
        reports.push(rep);
    }
    let stitched = stitcher.finish()?;
    let (out, empty_blocks) = adjust_step(&stitched, source, factor)?;
    let residual = consistency_residual(&out, source, factor)?;
    Ok((
        out,
        TiledReport {
            windows: tiles.len(),
            tiles: reports,
            consistency_residual: residual,
            empty_blocks,
            wall_time: started.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guide::{edge_coefficients, normalize_guide, GuideParams};
    use crate::solver::solve;
    use crate::synth::{generate, SynthParams};

    fn params() -> SolverParams {
        SolverParams {
            n_iterations: 60,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_plans_pan_arctic() {
        let p = TileSpec::default().plan_for(4000, 36000, 5).unwrap();
        assert_eq!(p.len(), 3 * 21);
    }

    #[test]
    fn non_multiple_strides_rejected() {
        let spec = TileSpec {
            stride_h: 1792,
            ..Default::default()
        };
        assert!(matches!(
            spec.plan_for(4000, 36000, 5),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn single_window_matches_plain_solve() {
        let s = generate(
            &SynthParams {
                n_rows: 60,
                n_cols: 80,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let c = edge_coefficients(&normalize_guide(&s.guide).unwrap(), &GuideParams::default())
            .unwrap();
        let (tiled, rep) = solve_tiled(&s.source, &c, &params(), &TileSpec::default(), 1).unwrap();
        let (plain, _) = solve(&s.source, &c, &params()).unwrap();
        assert_eq!(rep.windows, 1);
        for (a, b) in tiled.values().iter().zip(plain.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tiled_is_consistent_and_worker_independent() {
        let s = generate(
            &SynthParams {
                n_rows: 100,
                n_cols: 150,
                cloud_fraction: 0.1,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let c = edge_coefficients(&normalize_guide(&s.guide).unwrap(), &GuideParams::default())
            .unwrap();
        let spec = TileSpec {
            patch_h: 50,
            patch_w: 60,
            stride_v: 40,
            stride_h: 45,
        };
        let (one, rep) = solve_tiled(&s.source, &c, &params(), &spec, 1).unwrap();
        let (three, _) = solve_tiled(&s.source, &c, &params(), &spec, 3).unwrap();
        assert!(rep.windows > 1);
        assert!(rep.consistency_residual <= 1e-9);
        assert_eq!(one, three);
    }

    #[test]
    fn zero_workers_rejected() {
        let s = generate(
            &SynthParams {
                n_rows: 20,
                n_cols: 20,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let c = CoefficientField::uniform(*s.truth.geo(), 1.0);
        assert!(solve_tiled(&s.source, &c, &params(), &TileSpec::default(), 0).is_err());
    }
}
