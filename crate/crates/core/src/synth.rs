//! Synthetic guide-correlated temperature scenes with known truth.
//!
//! Land cover is a jittered-grid Voronoi partition, elevation a sum of Gaussian
//! hills, canopy height a per-class base plus noise. Truth temperature follows
//! a lapse rate in elevation plus a per-class offset plus white noise, and the
//! coarse source is its NaN-aware coarsening.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{apply_mask, coarsen_nan_aware, GeoTransform, Grid2D};
use crate::guide::{build_guide, ClassGrid, GuideStack};

pub const MAX_CLASSES: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_classes: usize,
    /// K per km
    pub lapse_rate: f64,
    /// Width of the uniform distribution of per-class offsets, K.
    pub class_offset_range: f64,
    pub noise_sigma: f64,
    /// Multiplier on a nominal 1000 m relief; 0 gives flat terrain.
    pub terrain_roughness: f64,
    pub base_temperature: f64,
    /// Target fraction of clouded coarse cells, in [0, 1).
    pub cloud_fraction: f64,
    /// Mean spacing of land cover regions, in high-resolution pixels.
    pub region_size: usize,
    pub lon_min: f64,
    pub lat_max: f64,
    pub cell_size: f64,
    /// Reseeds temperatures and clouds only; scenes differing in `variant`
    /// share one guide.
    pub variant: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_rows: 600,
            n_cols: 600,
            n_classes: 6,
            lapse_rate: 6.5,
            class_offset_range: 8.0,
            noise_sigma: 0.3,
            terrain_roughness: 1.0,
            base_temperature: 278.0,
            cloud_fraction: 0.0,
            region_size: 60,
            lon_min: 20.0,
            lat_max: 70.0,
            cell_size: 0.01,
            variant: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, factor: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if factor == 0 || self.n_rows == 0 || self.n_cols == 0 {
            return bad("empty scene or zero factor".into());
        }
        if !self.n_rows.is_multiple_of(factor) || !self.n_cols.is_multiple_of(factor) {
            return bad(format!(
                "{}x{} is not divisible by factor {factor}",
                self.n_rows, self.n_cols
            ));
        }
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return bad(format!("n_classes must lie in 1..={MAX_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return bad(format!(
                "cloud_fraction {} outside [0, 1)",
                self.cloud_fraction
            ));
        }
        if self.region_size == 0 {
            return bad("region_size must be positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("terrain_roughness", self.terrain_roughness),
            ("class_offset_range", self.class_offset_range),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !self.lapse_rate.is_finite() || !self.base_temperature.is_finite() {
            return bad("non-finite temperature parameters".into());
        }
        Ok(())
    }

    pub fn geo(&self) -> Result<GeoTransform> {
        GeoTransform::new(
            self.lon_min,
            self.lat_max,
            self.cell_size,
            self.n_rows,
            self.n_cols,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub truth: Grid2D,
    pub guide: GuideStack,
    pub source: Grid2D,
    /// Coarse cells covered by synthetic cloud.
    pub cloud: Array2<bool>,
}

/// Class code for class index `k`; LCCS-like multiples of ten.
pub fn class_code(k: usize) -> u16 {
    10 * (k as u16 + 1)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn temperature_seed(p: &SynthParams) -> u64 {
    p.seed ^ p.variant.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn voronoi(p: &SynthParams) -> Array2<usize> {
    let mut r = rng(p.seed, 1);
    let s = p.region_size;
    let gr = p.n_rows.div_ceil(s);
    let gc = p.n_cols.div_ceil(s);
    let seeds: Vec<(f64, f64, usize)> = (0..gr * gc)
        .map(|i| {
            let (a, b) = (i / gc, i % gc);
            (
                (a as f64 + r.random::<f64>()) * s as f64,
                (b as f64 + r.random::<f64>()) * s as f64,
                r.random_range(0..p.n_classes),
            )
        })
        .collect();
    Array2::from_shape_fn((p.n_rows, p.n_cols), |(row, col)| {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        let (a, b) = (row / s, col / s);
        let mut best = (f64::INFINITY, 0);
        for da in a.saturating_sub(1)..=(a + 1).min(gr - 1) {
            for db in b.saturating_sub(1)..=(b + 1).min(gc - 1) {
                let (sy, sx, k) = seeds[da * gc + db];
                let d = (sy - y).powi(2) + (sx - x).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    })
}

fn terrain(p: &SynthParams) -> Array2<f64> {
    let mut elev = Array2::<f64>::zeros((p.n_rows, p.n_cols));
    if p.terrain_roughness == 0.0 {
        return elev;
    }
    let mut r = rng(p.seed, 2);
    let n_hills = ((p.n_rows * p.n_cols) as f64 / 6000.0).ceil().max(6.0) as usize;
    for _ in 0..n_hills {
        let cy = r.random_range(0.0..p.n_rows as f64);
        let cx = r.random_range(0.0..p.n_cols as f64);
        let sigma: f64 = r.random_range(6.0..60.0);
        let height = r.random_range(0.1..1.0) * 400.0;
        let reach = (3.0 * sigma).ceil() as isize;
        let r0 = (cy as isize - reach).max(0) as usize;
        let r1 = ((cy as isize + reach) as usize).min(p.n_rows - 1);
        let c0 = (cx as isize - reach).max(0) as usize;
        let c1 = ((cx as isize + reach) as usize).min(p.n_cols - 1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for row in r0..=r1 {
            let dy2 = (row as f64 + 0.5 - cy).powi(2);
            for col in c0..=c1 {
                let dx2 = (col as f64 + 0.5 - cx).powi(2);
                elev[[row, col]] += height * (-(dy2 + dx2) * inv).exp();
            }
        }
    }
    // rescale to a nominal 1000 m relief above a 100 m floor
    let max = elev.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        elev.mapv_inplace(|v| 100.0 + v / max * 1000.0 * p.terrain_roughness);
    }
    elev
}

fn clouds(p: &SynthParams, coarse: (usize, usize)) -> Array2<bool> {
    let mut mask = Array2::from_elem(coarse, false);
    if p.cloud_fraction <= 0.0 {
        return mask;
    }
    let mut r = rng(temperature_seed(p), 5);
    let target = (p.cloud_fraction * mask.len() as f64).round() as usize;
    let mut covered = 0usize;
    while covered < target {
        let cy = r.random_range(0..coarse.0) as isize;
        let cx = r.random_range(0..coarse.1) as isize;
        let rad = r.random_range(1..=6i64) as isize;
        for y in (cy - rad).max(0)..=(cy + rad).min(coarse.0 as isize - 1) {
            for x in (cx - rad).max(0)..=(cx + rad).min(coarse.1 as isize - 1) {
                if (y - cy).pow(2) + (x - cx).pow(2) <= rad * rad && covered < target {
                    let cell = &mut mask[[y as usize, x as usize]];
                    if !*cell {
                        *cell = true;
                        covered += 1;
                    }
                }
            }
        }
    }
    mask
}

pub fn generate(p: &SynthParams, factor: usize) -> Result<Scene> {
    p.validate(factor)?;
    let geo = p.geo()?;

    let regions = voronoi(p);
    let elevation = terrain(p);

    let mut canopy_rng = rng(p.seed, 3);
    let canopy_base: Vec<f64> = (0..p.n_classes)
        .map(|_| canopy_rng.random_range(0.0..25.0))
        .collect();
    let canopy_noise = Normal::new(0.0, 1.5).expect("valid sigma");
    let canopy = Array2::from_shape_fn(geo.shape(), |(r, c)| {
        (canopy_base[regions[[r, c]]] + canopy_noise.sample(&mut canopy_rng)).clamp(0.0, 60.0)
    });

    let mut noise_rng = rng(temperature_seed(p), 4);
    let offsets: Vec<f64> = (0..p.n_classes)
        .map(|_| noise_rng.random_range(-0.5..=0.5) * p.class_offset_range)
        .collect();

    let temp_noise = Normal::new(0.0, p.noise_sigma).expect("non-negative sigma");
    let truth = Array2::from_shape_fn(geo.shape(), |(r, c)| {
        p.base_temperature - p.lapse_rate * elevation[[r, c]] / 1000.0
            + offsets[regions[[r, c]]]
            + temp_noise.sample(&mut noise_rng)
    });

    let landcover = ClassGrid::new(
        geo,
        regions.mapv(class_code),
        Array2::from_elem(geo.shape(), true),
    )?;
    let guide = build_guide(
        landcover,
        Grid2D::from_values(geo, elevation)?,
        Grid2D::from_values(geo, canopy)?,
    )?;

    let truth = Grid2D::from_values(geo, truth)?;
    let clean_source = coarsen_nan_aware(&truth, factor)?;
    let cloud = clouds(p, clean_source.shape());
    let source = apply_mask(&clean_source, &cloud)?;
    let hr_cloud = Array2::from_shape_fn(geo.shape(), |(r, c)| cloud[[r / factor, c / factor]]);
    let truth = apply_mask(&truth, &hr_cloud)?;
    Ok(Scene {
        truth,
        guide,
        source,
        cloud,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::coarsen_nan_aware;

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            seed,
            n_rows: 100,
            n_cols: 120,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(7), 5).unwrap();
        let b = generate(&small(7), 5).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.source, b.source);
        assert_eq!(a.guide.landcover, b.guide.landcover);
        let c = generate(&small(8), 5).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn flat_single_class_noiseless_is_constant() {
        let p = SynthParams {
            n_classes: 1,
            noise_sigma: 0.0,
            terrain_roughness: 0.0,
            ..small(1)
        };
        let s = generate(&p, 5).unwrap();
        let first = s.truth.values()[[0, 0]];
        assert!(s.truth.values().iter().all(|&v| v == first));
    }

    #[test]
    fn source_is_coarsened_truth_outside_clouds() {
        let p = SynthParams {
            cloud_fraction: 0.25,
            ..small(3)
        };
        let s = generate(&p, 5).unwrap();
        let clouded = s.cloud.iter().filter(|&&c| c).count();
        assert_eq!(clouded, (0.25 * s.cloud.len() as f64).round() as usize);
        let c = coarsen_nan_aware(&s.truth, 5).unwrap();
        assert_eq!(c.valid(), s.source.valid());
        for ((r, col), &ok) in s.source.valid().indexed_iter() {
            if ok {
                assert_eq!(c.values()[[r, col]], s.source.values()[[r, col]]);
            }
        }
    }

    #[test]
    fn class_edges_carry_larger_gradients() {
        let p = SynthParams {
            noise_sigma: 0.1,
            ..small(5)
        };
        let s = generate(&p, 5).unwrap();
        let lc = &s.guide.landcover.classes;
        let t = s.truth.values();
        let (mut across, mut n_across, mut within, mut n_within) = (0.0, 0, 0.0, 0);
        for r in 0..p.n_rows {
            for c in 0..p.n_cols - 1 {
                let g = (t[[r, c + 1]] - t[[r, c]]).abs();
                if lc[[r, c]] != lc[[r, c + 1]] {
                    across += g;
                    n_across += 1;
                } else {
                    within += g;
                    n_within += 1;
                }
            }
        }
        assert!(n_across > 0);
        assert!(across / n_across as f64 > within / n_within as f64);
    }

    #[test]
    fn variants_share_the_guide() {
        let a = generate(&small(4), 5).unwrap();
        let b = generate(
            &SynthParams {
                variant: 1,
                ..small(4)
            },
            5,
        )
        .unwrap();
        assert_eq!(a.guide.landcover, b.guide.landcover);
        assert_eq!(a.guide.elevation, b.guide.elevation);
        assert_eq!(a.guide.canopy, b.guide.canopy);
        assert_ne!(a.truth, b.truth);
    }

    #[test]
    fn invalid_params() {
        assert!(generate(
            &SynthParams {
                n_rows: 101,
                ..small(0)
            },
            5
        )
        .is_err());
        assert!(generate(
            &SynthParams {
                n_classes: 0,
                ..small(0)
            },
            5
        )
        .is_err());
        assert!(generate(
            &SynthParams {
                cloud_fraction: 1.0,
                ..small(0)
            },
            5
        )
        .is_err());
    }
}
