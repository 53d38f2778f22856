//! Command-line front end for guided LST super-resolution.
//!
//! Exit codes: 0 success, 1 some scenes failed, 2 configuration or fatal error.

pub mod config;
pub mod downscale;
pub mod scene;
pub mod textgrid;
pub mod tools;
pub mod validate;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use lstsr::codec::{Node, ProductMeta};
use lstsr::synth::SynthParams;

use config::{ConfigFile, Overrides};
use validate::ValidateOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lstsr",
    version,
    about = "Guided super-resolution of land surface temperature grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct MetaArgs {
    #[arg(long, default_value = "MetOp-A")]
    pub satellite: String,
    /// YYYYMMDDhhmm
    #[arg(long, default_value = "202008201030")]
    pub timestamp: String,
    /// DAY or NIGHT
    #[arg(long, default_value = "DAY")]
    pub node: String,
    #[arg(long = "product-version", default_value = "v1.0")]
    pub version: String,
}

impl MetaArgs {
    pub fn to_meta(&self) -> Result<ProductMeta> {
        Ok(ProductMeta {
            timestamp: scene::parse_timestamp(&self.timestamp)?,
            satellite: self.satellite.clone(),
            version: self.version.clone(),
            node: self.node.parse::<Node>()?,
        })
    }
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Super-resolve every scene in the input directory.
    Downscale {
        /// TOML configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare products against station measurements.
    Validate {
        #[arg(long)]
        products: PathBuf,
        /// Pipe-separated station table; defaults to the bundled stations.
        #[arg(long)]
        stations: Option<PathBuf>,
        /// CSV with station_id,timestamp,node,reference_k
        #[arg(long)]
        matchups: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        bin_width: f64,
        /// Maximum |product time - measurement time|, minutes.
        #[arg(long)]
        tolerance_minutes: f64,
    },
    /// Generate a synthetic scene, its guide and its truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reseeds temperatures and clouds while keeping the guide.
        #[arg(long, default_value_t = 0)]
        variant: u64,
        #[arg(long, default_value_t = 600)]
        rows: usize,
        #[arg(long, default_value_t = 600)]
        cols: usize,
        #[arg(long, default_value_t = 5)]
        factor: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        roughness: f64,
        #[arg(long, default_value_t = 0.0)]
        cloud_fraction: f64,
        #[command(flatten)]
        meta: MetaArgs,
    },
    /// NaN-aware block mean of one variable.
    Coarsen {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        factor: usize,
        #[arg(long, default_value = "LST")]
        variable: String,
    },
    /// Pack a text grid into a product file.
    Pack {
        input: PathBuf,
        /// Output file, or a directory to use the canonical product name.
        output: PathBuf,
        #[arg(long, default_value = "LST")]
        variable: String,
        #[command(flatten)]
        meta: MetaArgs,
    },
    /// Print one variable of a product file as a text grid.
    Unpack {
        input: PathBuf,
        #[arg(long)]
        variable: Option<String>,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the patch windows for a raster.
    Tileplan {
        n_rows: usize,
        n_cols: usize,
        patch_h: usize,
        patch_w: usize,
        stride_v: usize,
        stride_h: usize,
    },
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Downscale { config, overrides } => {
            let mut file = match config {
                Some(p) => ConfigFile::load(&p)?,
                None => ConfigFile::default(),
            };
            file.apply(overrides);
            let s = downscale::cmd_downscale(&file)?;
            println!(
                "{} scenes: {} written, {} skipped, {} failed",
                s.scenes, s.written, s.skipped, s.failed
            );
            Ok(s.exit_code())
        }
        Command::Validate {
            products,
            stations,
            matchups,
            output,
            bin_width,
            tolerance_minutes,
        } => {
            let reports = validate::cmd_validate(&ValidateOptions {
                product_dir: products,
                station_table: stations,
                matchup_file: matchups,
                output_dir: output,
                bin_width,
                tolerance_minutes,
            })?;
            print!("{}", validate::summary_table(&reports));
            Ok(EXIT_OK)
        }
        Command::Synth {
            out,
            seed,
            variant,
            rows,
            cols,
            factor,
            classes,
            noise,
            roughness,
            cloud_fraction,
            meta,
        } => {
            let p = SynthParams {
                seed,
                variant,
                n_rows: rows,
                n_cols: cols,
                n_classes: classes,
                noise_sigma: noise,
                terrain_roughness: roughness,
                cloud_fraction,
                ..Default::default()
            };
            let o = tools::cmd_synth(&out, &p, factor, &meta.to_meta()?)?;
            println!(
                "{}\n{}\n{}",
                o.scene.display(),
                o.guide.display(),
                o.truth.display()
            );
            Ok(EXIT_OK)
        }
        Command::Coarsen {
            input,
            output,
            factor,
            variable,
        } => {
            tools::cmd_coarsen(&input, &variable, factor, &output)?;
            Ok(EXIT_OK)
        }
        Command::Pack {
            input,
            output,
            variable,
            meta,
        } => {
            let path = tools::cmd_pack(&input, &variable, &meta.to_meta()?, &output)?;
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
        Command::Unpack {
            input,
            variable,
            output,
        } => {
            let text = tools::cmd_unpack(&input, variable.as_deref())?;
            match output {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
        Command::Tileplan {
            n_rows,
            n_cols,
            patch_h,
            patch_w,
            stride_v,
            stride_h,
        } => {
            let (_, text) =
                tools::cmd_tileplan([n_rows, n_cols, patch_h, patch_w, stride_v, stride_h])?;
            print!("{text}");
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            EXIT_FATAL
        }
    }
}
