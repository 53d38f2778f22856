//! Patch planning, extraction and overlap-average stitching.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0
            && row < self.row0 + self.height
            && col >= self.col0
            && col < self.col0 + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub n_rows: usize,
    pub n_cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_v: usize,
    pub stride_h: usize,
    /// Row-major by (row0, col0).
    pub windows: Vec<Window>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Start positions along one axis: 0, s, 2s, ... and, if the last regular patch
/// stops short of the edge, one final patch clamped to end exactly at the edge.
pub fn axis_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut start = 0;
    while start + patch < extent {
        start += stride;
        if start + patch > extent {
            out.push(extent - patch);
            break;
        }
        out.push(start);
    }
    out
}

/// Plans full-size patches over an `n_rows`×`n_cols` raster.
///
/// Strides may not exceed the patch size, otherwise cells between regular
/// patches would be left uncovered.
pub fn plan(
    n_rows: usize,
    n_cols: usize,
    patch_h: usize,
    patch_w: usize,
    stride_v: usize,
    stride_h: usize,
) -> Result<TilePlan> {
    if patch_h == 0 || patch_w == 0 || stride_v == 0 || stride_h == 0 {
        return Err(Error::InvalidParams(
            "patch sizes and strides must be positive".into(),
        ));
    }
    if patch_h > n_rows || patch_w > n_cols {
        return Err(Error::PatchTooLarge {
            n_rows,
            n_cols,
            patch_h,
            patch_w,
        });
    }
    if stride_v > patch_h || stride_h > patch_w {
        return Err(Error::InvalidParams(format!(
            "strides {stride_v}x{stride_h} exceed patch {patch_h}x{patch_w} and would leave gaps"
        )));
    }
    let rows = axis_positions(n_rows, patch_h, stride_v);
    let cols = axis_positions(n_cols, patch_w, stride_h);
    let windows = rows
        .iter()
        .flat_map(|&row0| {
            cols.iter().map(move |&col0| Window {
                row0,
                col0,
                height: patch_h,
                width: patch_w,
            })
        })
        .collect();
    Ok(TilePlan {
        n_rows,
        n_cols,
        patch_h,
        patch_w,
        stride_v,
        stride_h,
        windows,
    })
}

pub fn extract(g: &Grid2D, w: &Window) -> Result<Grid2D> {
    let (n_rows, n_cols) = g.shape();
    if w.height == 0 || w.width == 0 || w.row0 + w.height > n_rows || w.col0 + w.width > n_cols {
        return Err(Error::OutOfBounds {
            row0: w.row0,
            col0: w.col0,
            height: w.height,
            width: w.width,
            n_rows,
            n_cols,
        });
    }
    let sl = s![w.row0..w.row0 + w.height, w.col0..w.col0 + w.width];
    Grid2D::new(
        g.geo().window(w.row0, w.col0, w.height, w.width),
        g.values().slice(sl).to_owned(),
        g.valid().slice(sl).to_owned(),
    )
}

/// Collects solved patches in any completion order and reduces them in plan
/// order, so the stitched result does not depend on scheduling.
#[derive(Debug)]
pub struct Stitcher<'a> {
    plan: &'a TilePlan,
    target: GeoTransform,
    slots: Vec<Option<Grid2D>>,
}

impl<'a> Stitcher<'a> {
    pub fn new(plan: &'a TilePlan, target: GeoTransform) -> Result<Self> {
        if target.shape() != (plan.n_rows, plan.n_cols) {
            return Err(Error::ShapeMismatch {
                expected: (plan.n_rows, plan.n_cols),
                actual: target.shape(),
            });
        }
        Ok(Self {
            plan,
            target,
            slots: vec![None; plan.len()],
        })
    }

    pub fn insert(&mut self, index: usize, patch: Grid2D) -> Result<()> {
        let w = self.plan.windows.get(index).ok_or(Error::PlanMismatch {
            windows: self.plan.len(),
            patches: index + 1,
        })?;
        if patch.shape() != (w.height, w.width) {
            return Err(Error::ShapeMismatch {
                expected: (w.height, w.width),
                actual: patch.shape(),
            });
        }
        self.slots[index] = Some(patch);
        Ok(())
    }

    /// Mean of valid contributions per cell, plus the number of contributions.
    pub fn finish_with_counts(self) -> Result<(Grid2D, Array2<u32>)> {
        let filled = self.slots.iter().filter(|s| s.is_some()).count();
        if filled != self.plan.len() {
            return Err(Error::PlanMismatch {
                windows: self.plan.len(),
                patches: filled,
            });
        }
        // accumulate offsets from each cell's first contribution so that
        // agreeing overlaps reproduce their common value exactly
        let shape = self.target.shape();
        let mut pivot = Array2::<f64>::zeros(shape);
        let mut dev = Array2::<f64>::zeros(shape);
        let mut count = Array2::<u32>::zeros(shape);
        for (w, patch) in self.plan.windows.iter().zip(self.slots.iter().flatten()) {
            let sl = s![w.row0..w.row0 + w.height, w.col0..w.col0 + w.width];
            ndarray::Zip::from(pivot.slice_mut(sl))
                .and(dev.slice_mut(sl))
                .and(count.slice_mut(sl))
                .and(patch.values())
                .and(patch.valid())
                .for_each(|p, d, n, &v, &ok| {
                    if ok {
                        if *n == 0 {
                            *p = v;
                        } else {
                            *d += v - *p;
                        }
                        *n += 1;
                    }
                });
        }
        let valid = count.mapv(|n| n > 0);
        let mut sum = pivot;
        ndarray::Zip::from(&mut sum)
            .and(&dev)
            .and(&count)
            .for_each(|s, &d, &n| {
                if n > 1 {
                    *s += d / n as f64;
                }
            });
        Ok((Grid2D::new(self.target, sum, valid)?, count))
    }

    pub fn finish(self) -> Result<Grid2D> {
        self.finish_with_counts().map(|(g, _)| g)
    }
}

/// Per-cell mean of the valid contributions of all patches covering it.
pub fn stitch_average(
    plan: &TilePlan,
    patches: &[Grid2D],
    target_geo: GeoTransform,
) -> Result<Grid2D> {
    if patches.len() != plan.len() {
        return Err(Error::PlanMismatch {
            windows: plan.len(),
            patches: patches.len(),
        });
    }
    let mut st = Stitcher::new(plan, target_geo)?;
    for (i, p) in patches.iter().enumerate() {
        st.insert(i, p.clone())?;
    }
    st.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(rows: usize, cols: usize) -> GeoTransform {
        GeoTransform::new(0.0, 80.0, 0.01, rows, cols).unwrap()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan(960, 960, 240, 240, 240, 240).unwrap().len(), 16);
        let single = plan(240, 240, 240, 240, 240, 240).unwrap();
        assert_eq!(
            single.windows,
            vec![Window {
                row0: 0,
                col0: 0,
                height: 240,
                width: 240
            }]
        );
        assert_eq!(axis_positions(500, 240, 200), vec![0, 200, 260]);
        assert_eq!(plan(500, 500, 240, 240, 200, 200).unwrap().len(), 9);
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(
            plan(100, 100, 101, 10, 5, 5),
            Err(Error::PatchTooLarge { .. })
        ));
        assert!(matches!(
            plan(100, 100, 10, 10, 0, 5),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            plan(100, 100, 10, 10, 11, 5),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn pan_arctic_default_tiling_count() {
        // the product grid with 1920 patches and 1480/1790 strides
        let p = plan(4000, 36000, 1920, 1920, 1480, 1790).unwrap();
        assert_eq!(axis_positions(4000, 1920, 1480), vec![0, 1480, 2080]);
        assert_eq!(p.len(), 3 * 21);
    }

    #[test]
    fn extract_examples() {
        let mut v = Array2::from_shape_fn((6, 8), |(r, c)| (r * 8 + c) as f64);
        v[[0, 0]] = f64::NAN;
        let g = Grid2D::from_values(geo(6, 8), v).unwrap();
        assert_eq!(
            extract(
                &g,
                &Window {
                    row0: 0,
                    col0: 0,
                    height: 6,
                    width: 8
                }
            )
            .unwrap(),
            g
        );
        let one = extract(
            &g,
            &Window {
                row0: 2,
                col0: 3,
                height: 1,
                width: 1,
            },
        )
        .unwrap();
        assert_eq!(one.get(0, 0), Some(19.0));
        let (lon, lat) = one.geo().cell_center(0, 0);
        let (elon, elat) = g.geo().cell_center(2, 3);
        assert!((lon - elon).abs() < 1e-12 && (lat - elat).abs() < 1e-12);
        assert!((lon - 0.035).abs() < 1e-12 && (lat - 79.975).abs() < 1e-12);
        let hole = extract(
            &g,
            &Window {
                row0: 0,
                col0: 0,
                height: 1,
                width: 1,
            },
        )
        .unwrap();
        assert_eq!(hole.valid_count(), 0);
        assert!(matches!(
            extract(
                &g,
                &Window {
                    row0: 5,
                    col0: 0,
                    height: 2,
                    width: 1
                }
            ),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn disagreeing_overlap_gives_midpoint() {
        let p = plan(1, 3, 1, 2, 1, 1).unwrap();
        assert_eq!(p.len(), 2);
        let a = Grid2D::filled(geo(1, 2), 280.0);
        let b = Grid2D::filled(geo(1, 2), 282.0);
        let out = stitch_average(&p, &[a, b], geo(1, 3)).unwrap();
        assert_eq!(out.get(0, 1), Some(281.0));
        assert_eq!(out.get(0, 0), Some(280.0));
        assert_eq!(out.get(0, 2), Some(282.0));
    }

    #[test]
    fn invalid_contribution_ignored() {
        let p = plan(1, 3, 1, 2, 1, 1).unwrap();
        let a = Grid2D::filled(geo(1, 2), 280.0);
        let b = Grid2D::from_values(geo(1, 2), ndarray::array![[f64::NAN, 275.0]]).unwrap();
        let out = stitch_average(&p, &[a, b], geo(1, 3)).unwrap();
        assert_eq!(out.get(0, 1), Some(280.0));
    }

    #[test]
    fn patch_count_checked() {
        let p = plan(4, 4, 2, 2, 2, 2).unwrap();
        assert!(matches!(
            stitch_average(&p, &[Grid2D::filled(geo(2, 2), 1.0)], geo(4, 4)),
            Err(Error::PlanMismatch { .. })
        ));
    }

    fn arb_plan() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
        (1usize..=40, 1usize..=40).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), 1..=r, 1..=c).prop_flat_map(|(r, c, ph, pw)| {
                (Just(r), Just(c), Just(ph), Just(pw), 1..=ph, 1..=pw)
            })
        })
    }

    proptest! {
        #[test]
        fn reconstruction_and_counts((r, c, ph, pw, sv, sh) in arb_plan(), seed in any::<u64>()) {
            let p = plan(r, c, ph, pw, sv, sh).unwrap();
            let values = Array2::from_shape_fn((r, c), |(i, j)| ((seed ^ (i * 131 + j) as u64) % 1000) as f64 * 0.37 + 200.0);
            let valid = Array2::from_shape_fn((r, c), |(i, j)| (seed >> ((i + 3 * j) % 64)) & 3 != 0);
            let g = Grid2D::new(geo(r, c), values, valid).unwrap();
            let patches: Vec<_> = p.windows.iter().map(|w| extract(&g, w).unwrap()).collect();

            let mut st = Stitcher::new(&p, geo(r, c)).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.reverse();
            for i in order {
                st.insert(i, patches[i].clone()).unwrap();
            }
            let (out, counts) = st.finish_with_counts().unwrap();
            prop_assert_eq!(&out, &stitch_average(&p, &patches, geo(r, c)).unwrap());
            prop_assert_eq!(out.valid(), g.valid());
            for ((i, j), &ok) in g.valid().indexed_iter() {
                if ok {
                    let v = out.values()[[i, j]];
                    let e = g.values()[[i, j]];
                    prop_assert_eq!(v, e);
                    let covering = p.windows.iter().filter(|w| w.contains(i, j)).count() as u32;
                    prop_assert_eq!(counts[[i, j]], covering);
                }
            }
        }
    }
}
