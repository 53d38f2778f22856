use ndarray::Array2;

use super::Grid2D;

/// Cubic convolution parameter (Catmull-Rom).
const CUBIC_A: f64 = -0.5;

fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Sampling taps along one axis for one output index.
#[derive(Clone, Copy)]
struct Taps {
    cubic_idx: [usize; 4],
    cubic_w: [f64; 4],
    lin_idx: [usize; 2],
    lin_w: [f64; 2],
}

fn axis_taps(n_in: usize, factor: usize) -> Vec<Taps> {
    let last = n_in as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..n_in * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let i = s.floor();
            let t = s - i;
            let i = i as isize;
            Taps {
                cubic_idx: [clamp(i - 1), clamp(i), clamp(i + 1), clamp(i + 2)],
                cubic_w: [
                    cubic_kernel(t + 1.0),
                    cubic_kernel(t),
                    cubic_kernel(1.0 - t),
                    cubic_kernel(2.0 - t),
                ],
                lin_idx: [clamp(i), clamp(i + 1)],
                lin_w: [1.0 - t, t],
            }
        })
        .collect()
}

/// Bicubic (cubic convolution, a = -0.5) upsampling by an integer factor with
/// replicated borders.
///
/// Where the 4×4 support touches an invalid cell the output falls back to a
/// bilinear blend of the valid cells among the 2×2 support; it is invalid only
/// when none of those is valid.
pub fn upsample_bicubic(g: &Grid2D, factor: usize) -> Grid2D {
    if factor <= 1 {
        return g.clone();
    }
    let (rows, cols) = g.shape();
    let geo = g.geo.refined(factor);
    let ty = axis_taps(rows, factor);
    let tx = axis_taps(cols, factor);
    let vals = &g.values;
    let ok = &g.valid;

    let mut values = Array2::<f64>::zeros(geo.shape());
    let mut valid = Array2::from_elem(geo.shape(), false);
    for (r, y) in ty.iter().enumerate() {
        for (c, x) in tx.iter().enumerate() {
            let full_support = y
                .cubic_idx
                .iter()
                .all(|&iy| x.cubic_idx.iter().all(|&ix| ok[[iy, ix]]));
            let out = if full_support {
                let mut acc = 0.0;
                for (&iy, &wy) in y.cubic_idx.iter().zip(&y.cubic_w) {
                    let mut row = 0.0;
                    for (&ix, &wx) in x.cubic_idx.iter().zip(&x.cubic_w) {
                        row += wx * vals[[iy, ix]];
                    }
                    acc += wy * row;
                }
                Some(acc)
            } else {
                bilinear_valid(vals, ok, y, x)
            };
            if let Some(v) = out {
                values[[r, c]] = v;
                valid[[r, c]] = true;
            }
        }
    }
    Grid2D { geo, values, valid }
}

fn bilinear_valid(vals: &Array2<f64>, ok: &Array2<bool>, y: &Taps, x: &Taps) -> Option<f64> {
    let mut wsum = 0.0;
    let mut acc = 0.0;
    let mut plain = 0.0;
    let mut n = 0usize;
    for (&iy, &wy) in y.lin_idx.iter().zip(&y.lin_w) {
        for (&ix, &wx) in x.lin_idx.iter().zip(&x.lin_w) {
            if ok[[iy, ix]] {
                let v = vals[[iy, ix]];
                wsum += wy * wx;
                acc += wy * wx * v;
                plain += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else if wsum > 0.0 {
        Some(acc / wsum)
    } else {
        Some(plain / n as f64)
    }
}
