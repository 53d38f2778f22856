//! Run configuration: a TOML document with one table per module, plus flag
//! overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lstsr::guide::{EdgeStop, GuideParams};
use lstsr::pipeline::TileSpec;
use lstsr::solver::{Init, SolverParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub input_dir: PathBuf,
    pub guide_path: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Scenes solved concurrently; each uses its own pool of `workers`.
    pub scene_workers: usize,
    pub coefficient_file: Option<PathBuf>,
    pub strict_codec: bool,
    /// Skip scenes whose fraction of fill (non-cloud) cells exceeds this.
    pub max_gap_fraction: Option<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("input"),
            guide_path: PathBuf::from("guide.npg"),
            output_dir: PathBuf::from("output"),
            workers: 1,
            scene_workers: 1,
            coefficient_file: None,
            strict_codec: true,
            max_gap_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub factor: usize,
    pub lambda: f64,
    pub n_iterations: usize,
    pub adjust_every: usize,
    pub tolerance: f64,
    pub init: String,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = SolverParams::default();
        Self {
            factor: p.factor,
            lambda: p.lambda,
            n_iterations: p.n_iterations,
            adjust_every: p.adjust_every,
            tolerance: p.tolerance,
            init: "bicubic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideSection {
    pub kappa: f64,
    pub w_landcover: f64,
    pub w_elevation: f64,
    pub w_canopy: f64,
    pub form: String,
}

impl Default for GuideSection {
    fn default() -> Self {
        let g = GuideParams::default();
        Self {
            kappa: g.kappa,
            w_landcover: g.w_landcover,
            w_elevation: g.w_elevation,
            w_canopy: g.w_canopy,
            form: "exponential".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSection {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_v: usize,
    pub stride_h: usize,
}

impl Default for TileSection {
    fn default() -> Self {
        let t = TileSpec::default();
        Self {
            patch_h: t.patch_h,
            patch_w: t.patch_w,
            stride_v: t.stride_v,
            stride_h: t.stride_h,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunSection,
    pub solver: SolverSection,
    pub guide: GuideSection,
    pub tile: TileSection,
}

/// Command-line overrides; every field of [`ConfigFile`] is reachable.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long = "guide")]
    pub guide_path: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub scene_workers: Option<usize>,
    /// Precomputed conductance file (c_horizontal, c_vertical) on the guide grid.
    #[arg(long = "coefficients")]
    pub coefficient_file: Option<PathBuf>,
    /// Invalidate undeclared codes with a warning instead of failing the scene.
    #[arg(long)]
    pub lenient: bool,
    #[arg(long)]
    pub max_gap_fraction: Option<f64>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "iterations")]
    pub n_iterations: Option<usize>,
    #[arg(long)]
    pub adjust_every: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// bicubic or replicate
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub w_landcover: Option<f64>,
    #[arg(long)]
    pub w_elevation: Option<f64>,
    #[arg(long)]
    pub w_canopy: Option<f64>,
    /// exponential or rational
    #[arg(long = "edge-stop")]
    pub form: Option<String>,
    #[arg(long)]
    pub patch_h: Option<usize>,
    #[arg(long)]
    pub patch_w: Option<usize>,
    #[arg(long)]
    pub stride_v: Option<usize>,
    #[arg(long)]
    pub stride_h: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: Overrides) {
        let (r, s, g, t) = (
            &mut self.run,
            &mut self.solver,
            &mut self.guide,
            &mut self.tile,
        );
        set(&mut r.input_dir, o.input_dir);
        set(&mut r.guide_path, o.guide_path);
        set(&mut r.output_dir, o.output_dir);
        set(&mut r.workers, o.workers);
        set(&mut r.scene_workers, o.scene_workers);
        if o.coefficient_file.is_some() {
            r.coefficient_file = o.coefficient_file;
        }
        if o.lenient {
            r.strict_codec = false;
        }
        if o.max_gap_fraction.is_some() {
            r.max_gap_fraction = o.max_gap_fraction;
        }
        set(&mut s.factor, o.factor);
        set(&mut s.lambda, o.lambda);
        set(&mut s.n_iterations, o.n_iterations);
        set(&mut s.adjust_every, o.adjust_every);
        set(&mut s.tolerance, o.tolerance);
        set(&mut s.init, o.init);
        set(&mut g.kappa, o.kappa);
        set(&mut g.w_landcover, o.w_landcover);
        set(&mut g.w_elevation, o.w_elevation);
        set(&mut g.w_canopy, o.w_canopy);
        set(&mut g.form, o.form);
        set(&mut t.patch_h, o.patch_h);
        set(&mut t.patch_w, o.patch_w);
        set(&mut t.stride_v, o.stride_v);
        set(&mut t.stride_h, o.stride_h);
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let s = &self.solver;
        let solver = SolverParams {
            factor: s.factor,
            lambda: s.lambda,
            n_iterations: s.n_iterations,
            adjust_every: s.adjust_every,
            tolerance: s.tolerance,
            init: s.init.parse::<Init>()?,
        };
        solver.validate()?;
        let g = &self.guide;
        let guide = GuideParams {
            kappa: g.kappa,
            w_landcover: g.w_landcover,
            w_elevation: g.w_elevation,
            w_canopy: g.w_canopy,
            form: g.form.parse::<EdgeStop>()?,
        };
        guide.validate()?;
        let t = &self.tile;
        let tile = TileSpec {
            patch_h: t.patch_h,
            patch_w: t.patch_w,
            stride_v: t.stride_v,
            stride_h: t.stride_h,
        };
        tile.check_factor(solver.factor)?;
        let r = &self.run;
        if r.workers == 0 || r.scene_workers == 0 {
            bail!("workers and scene_workers must be at least 1");
        }
        if let Some(f) = r.max_gap_fraction {
            if !(0.0..=1.0).contains(&f) {
                bail!("max_gap_fraction {f} outside [0, 1]");
            }
        }
        Ok(RunConfig {
            input_dir: r.input_dir.clone(),
            guide_path: r.guide_path.clone(),
            output_dir: r.output_dir.clone(),
            solver,
            guide,
            tile,
            workers: r.workers,
            scene_workers: r.scene_workers,
            coefficient_file: r.coefficient_file.clone(),
            strict_codec: r.strict_codec,
            max_gap_fraction: r.max_gap_fraction,
        })
    }
}

/// Validated configuration in core types.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input_dir: PathBuf,
    pub guide_path: PathBuf,
    pub output_dir: PathBuf,
    pub solver: SolverParams,
    pub guide: GuideParams,
    pub tile: TileSpec,
    pub workers: usize,
    pub scene_workers: usize,
    pub coefficient_file: Option<PathBuf>,
    pub strict_codec: bool,
    pub max_gap_fraction: Option<f64>,
}
