//! Diffuse-adjust super-resolution.
//!
//! The high-resolution estimate is smoothed by explicit anisotropic diffusion
//! over the guide's conductances and, between diffusion steps, shifted block by
//! block so that its NaN-aware coarsening equals the coarse source.

use std::time::Instant;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{
    check_factor, coarsen_nan_aware, minmax_scale, minmax_unscale, replicate_nearest,
    upsample_bicubic, Grid2D, ScaleParams,
};
use crate::guide::CoefficientField;

/// Largest step for which the explicit 4-neighbour update with conductances in
/// [0, 1] stays a convex combination.
pub const MAX_LAMBDA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Bicubic,
    Replicate,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bicubic" => Ok(Init::Bicubic),
            "replicate" => Ok(Init::Replicate),
            other => Err(Error::InvalidParams(format!(
                "unknown init strategy {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub factor: usize,
    pub lambda: f64,
    pub n_iterations: usize,
    pub adjust_every: usize,
    /// Early-stopping threshold on the max per-cell change between consecutive
    /// adjusted states, in min-max scaled units.
    pub tolerance: f64,
    pub init: Init,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            factor: 5,
            lambda: 0.2,
            n_iterations: 2000,
            adjust_every: 1,
            tolerance: 1e-6,
            init: Init::Bicubic,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        check_factor(self.factor)?;
        if !(self.lambda > 0.0 && self.lambda <= MAX_LAMBDA) {
            return Err(Error::InvalidParams(format!(
                "lambda must lie in (0, 0.25], got {}",
                self.lambda
            )));
        }
        if self.n_iterations == 0 || self.adjust_every == 0 {
            return Err(Error::InvalidParams(
                "n_iterations and adjust_every must be positive".into(),
            ));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "tolerance must be non-negative, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    pub iterations_run: usize,
    pub final_max_delta: f64,
    /// Max over source-valid blocks of |coarsen(output) - source|, physical units.
    pub consistency_residual: f64,
    /// Source-valid blocks without any valid high-resolution cell.
    pub empty_blocks: usize,
    pub wall_time: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= MAX_LAMBDA {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "lambda must lie in (0, 0.25], got {lambda}"
        )))
    }
}

/// Row-major lattice with conductances already zeroed on edges that touch an
/// invalid cell. Invalid cells hold 0.0 and never exchange flux.
struct Lattice {
    rows: usize,
    cols: usize,
    /// towards the east neighbour
    ch: Vec<f32>,
    /// towards the south neighbour
    cv: Vec<f32>,
    zeros: Vec<f32>,
}

/// Per-column running totals over the rows of one block row.
struct ColumnAcc {
    sum: Vec<f64>,
    inc_min: Vec<f64>,
    inc_max: Vec<f64>,
}

impl ColumnAcc {
    fn new(cols: usize) -> Self {
        Self {
            sum: vec![0.0; cols],
            inc_min: vec![f64::INFINITY; cols],
            inc_max: vec![f64::NEG_INFINITY; cols],
        }
    }

    /// Folds the columns into per-block totals starting at `offset`, and resets.
    #[inline(always)]
    fn flush(&mut self, factor: usize, out: &mut BlockAcc, offset: usize) {
        let chunks = self
            .sum
            .chunks_exact(factor)
            .zip(self.inc_min.chunks_exact(factor))
            .zip(self.inc_max.chunks_exact(factor));
        for (i, ((s, lo), hi)) in chunks.enumerate() {
            out.sums[offset + i] = s.iter().sum::<f64>();
            out.inc_min[offset + i] = lo.iter().copied().fold(f64::INFINITY, f64::min);
            out.inc_max[offset + i] = hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.inc_min.iter_mut().for_each(|v| *v = f64::INFINITY);
        self.inc_max.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    }
}

/// Per-block sums of a diffused state and extremes of the step's increments.
struct BlockAcc {
    sums: Vec<f64>,
    inc_min: Vec<f64>,
    inc_max: Vec<f64>,
}

impl BlockAcc {
    fn new(n: usize) -> Self {
        Self {
            sums: vec![0.0; n],
            inc_min: vec![0.0; n],
            inc_max: vec![0.0; n],
        }
    }
}

/// Explicit update of one row from the rows above and below.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn step_row(
    out: &mut [f64],
    m: &[f64],
    n: &[f64],
    s: &[f64],
    cn: &[f32],
    cs: &[f32],
    ch: &[f32],
    lambda: f64,
    acc: &mut ColumnAcc,
) {
    let cols = out.len();
    let (m, n, s, cn, cs, ch) = (
        &m[..cols],
        &n[..cols],
        &s[..cols],
        &cn[..cols],
        &cs[..cols],
        &ch[..cols],
    );
    let (sum, lo, hi) = (
        &mut acc.sum[..cols],
        &mut acc.inc_min[..cols],
        &mut acc.inc_max[..cols],
    );
    let mut put = |i: usize, inc: f64| {
        let v = m[i] + inc;
        out[i] = v;
        sum[i] += v;
        lo[i] = if inc < lo[i] { inc } else { lo[i] };
        hi[i] = if inc > hi[i] { inc } else { hi[i] };
    };
    let vertical = |i: usize| f64::from(cn[i]) * (n[i] - m[i]) + f64::from(cs[i]) * (s[i] - m[i]);
    if cols == 1 {
        put(0, lambda * vertical(0));
        return;
    }
    put(0, lambda * (vertical(0) + f64::from(ch[0]) * (m[1] - m[0])));
    for i in 1..cols - 1 {
        let u = m[i];
        let (cn, cs, ce, cw) = (
            f64::from(cn[i]),
            f64::from(cs[i]),
            f64::from(ch[i]),
            f64::from(ch[i - 1]),
        );
        let flux = cn * (n[i] - u) + cs * (s[i] - u) + ce * (m[i + 1] - u) + cw * (m[i - 1] - u);
        put(i, lambda * flux);
    }
    let l = cols - 1;
    put(
        l,
        lambda * (vertical(l) + f64::from(ch[l - 1]) * (m[l - 1] - m[l])),
    );
}

/// One pass of explicit steps over the lattice, row by row and in place.
///
/// Input rows are read with their block offsets added and kept in a rolling
/// window, so each row of the state is overwritten only after its neighbours
/// have been read.
struct Stage {
    factor: usize,
    bcols: usize,
    /// block row whose offsets are expanded in `offsets`
    cached: Option<usize>,
    offsets: Vec<f64>,
    up: Vec<f64>,
    mid: Vec<f64>,
    down: Vec<f64>,
    columns: ColumnAcc,
}

impl Stage {
    fn new(factor: usize, bcols: usize, cols: usize) -> Self {
        let row = || vec![0.0; cols];
        Self {
            factor,
            bcols,
            cached: None,
            offsets: row(),
            up: row(),
            mid: row(),
            down: row(),
            columns: ColumnAcc::new(cols),
        }
    }

    /// `src + offsets of row r` into `dst` (one of the rolling rows).
    #[inline(always)]
    fn load(&mut self, r: usize, src: &[f64], shift: &[f64], into_mid: bool) {
        let br = r / self.factor;
        if self.cached != Some(br) {
            let s = &shift[br * self.bcols..][..self.bcols];
            for (chunk, &v) in self.offsets.chunks_exact_mut(self.factor).zip(s) {
                chunk.fill(v);
            }
            self.cached = Some(br);
        }
        let dst = if into_mid {
            &mut self.mid
        } else {
            &mut self.down
        };
        dst.iter_mut()
            .zip(src)
            .zip(&self.offsets)
            .for_each(|((o, &i), &s)| *o = i + s);
    }

    /// Steps row `r` of `d`; rows must come in order 0, 1, 2, ...
    #[inline(always)]
    fn row(
        &mut self,
        lat: &Lattice,
        d: &mut [f64],
        r: usize,
        shift: &[f64],
        lambda: f64,
        acc: &mut BlockAcc,
    ) {
        let (rows, cols, f) = (lat.rows, lat.cols, self.factor);
        let base = r * cols;
        let last = r + 1 == rows;
        if r == 0 {
            self.load(0, &d[..cols], shift, true);
        }
        if !last {
            self.load(r + 1, &d[base + cols..base + 2 * cols], shift, false);
        }
        let (n, cn) = if r > 0 {
            (&self.up[..], &lat.cv[base - cols..base])
        } else {
            (&self.mid[..], &lat.zeros[..])
        };
        let (s, cs) = if !last {
            (&self.down[..], &lat.cv[base..base + cols])
        } else {
            (&self.mid[..], &lat.zeros[..])
        };
        let ch = &lat.ch[base..base + cols];
        step_row(
            &mut d[base..base + cols],
            &self.mid,
            n,
            s,
            cn,
            cs,
            ch,
            lambda,
            &mut self.columns,
        );
        if r % f == f - 1 || last {
            self.columns.flush(f, acc, (r / f) * self.bcols);
        }
        std::mem::swap(&mut self.up, &mut self.mid);
        std::mem::swap(&mut self.mid, &mut self.down);
    }
}

impl Lattice {
    fn new(coeffs: &CoefficientField, valid: &Array2<bool>) -> Self {
        let (rows, cols) = valid.dim();
        let mut ch = Vec::with_capacity(rows * cols);
        let mut cv = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let here = valid[[r, c]];
                let east = c + 1 < cols && here && valid[[r, c + 1]];
                let south = r + 1 < rows && here && valid[[r + 1, c]];
                ch.push(if east {
                    coeffs.c_horizontal[[r, c]] as f32
                } else {
                    0.0
                });
                cv.push(if south {
                    coeffs.c_vertical[[r, c]] as f32
                } else {
                    0.0
                });
            }
        }
        Self {
            rows,
            cols,
            ch,
            cv,
            zeros: vec![0.0; cols],
        }
    }

    /// One explicit step of the state `d + shift`, in place: afterwards `d`
    /// holds the diffused field without offsets.
    fn sweep(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        lambda: f64,
        acc: &mut BlockAcc,
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { self.sweep_avx2(d, blocks, shift, lambda, acc) };
        }
        self.sweep_generic(d, blocks, shift, lambda, acc)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn sweep_avx2(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        lambda: f64,
        acc: &mut BlockAcc,
    ) {
        self.sweep_generic(d, blocks, shift, lambda, acc)
    }

    #[inline(always)]
    fn sweep_generic(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        lambda: f64,
        acc: &mut BlockAcc,
    ) {
        let mut stage = Stage::new(blocks.factor, blocks.bcols, self.cols);
        for r in 0..self.rows {
            stage.row(self, d, r, shift, lambda, acc);
        }
    }

    /// Two steps with an adjustment in between, in one pass over `d`.
    ///
    /// The second step trails the first by up to two block rows: a row can be
    /// stepped again once the offsets of every block row it reads are known.
    /// The offsets of the first step land in `mid_shift`. Results are
    /// bit-identical to two calls of [`Lattice::sweep`].
    #[allow(clippy::too_many_arguments)]
    fn sweep_twice(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        mid_shift: &mut [f64],
        lambda: f64,
        first: &mut BlockAcc,
        second: &mut BlockAcc,
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe {
                self.sweep_twice_avx2(d, blocks, shift, mid_shift, lambda, first, second)
            };
        }
        self.sweep_twice_generic(d, blocks, shift, mid_shift, lambda, first, second)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn sweep_twice_avx2(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        mid_shift: &mut [f64],
        lambda: f64,
        first: &mut BlockAcc,
        second: &mut BlockAcc,
    ) {
        self.sweep_twice_generic(d, blocks, shift, mid_shift, lambda, first, second)
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn sweep_twice_generic(
        &self,
        d: &mut [f64],
        blocks: &Blocks,
        shift: &[f64],
        mid_shift: &mut [f64],
        lambda: f64,
        first: &mut BlockAcc,
        second: &mut BlockAcc,
    ) {
        let (rows, f, bcols) = (self.rows, blocks.factor, blocks.bcols);
        // last row of the first step that row r of the second step depends on
        let needs = |r: usize| ((r + 1).min(rows - 1) / f * f + f - 1).min(rows - 1);
        let mut a = Stage::new(f, bcols, self.cols);
        let mut b = Stage::new(f, bcols, self.cols);
        let mut next = 0;
        for r in 0..rows {
            a.row(self, d, r, shift, lambda, first);
            if r % f == f - 1 || r + 1 == rows {
                let br = r / f;
                blocks.shifts(&first.sums, mid_shift, br * bcols..(br + 1) * bcols);
                while next < rows && needs(next) <= r {
                    b.row(self, d, next, mid_shift, lambda, second);
                    next += 1;
                }
            }
        }
    }
}

/// Block bookkeeping for the adjustment inside [`solve`]: the mask is fixed for
/// the whole solve, so per-block valid counts are computed once.
struct Blocks {
    factor: usize,
    bcols: usize,
    source: Vec<f64>,
    source_valid: Vec<bool>,
    count: Vec<usize>,
}

impl Blocks {
    fn new(source: &Grid2D, valid: &Array2<bool>, factor: usize) -> Self {
        let (brows, bcols) = source.shape();
        let mut count = vec![0usize; brows * bcols];
        for ((r, c), &ok) in valid.indexed_iter() {
            if ok {
                count[(r / factor) * bcols + c / factor] += 1;
            }
        }
        Self {
            factor,
            bcols,
            source: source.values().iter().copied().collect(),
            source_valid: source.valid().iter().copied().collect(),
            count,
        }
    }

    /// Blocks that leave every cell alone, for a single plain step.
    fn identity(rows: usize, cols: usize) -> Self {
        Self {
            factor: 1,
            bcols: cols,
            source: Vec::new(),
            source_valid: Vec::new(),
            count: vec![0; rows * cols],
        }
    }

    fn len(&self) -> usize {
        self.count.len()
    }

    /// Offsets over `range` that bring each source-valid block mean onto the
    /// source value.
    fn shifts(&self, sums: &[f64], out: &mut [f64], range: std::ops::Range<usize>) {
        for (i, o) in out.iter_mut().enumerate().take(range.end).skip(range.start) {
            *o = if self.source_valid[i] && self.count[i] > 0 {
                self.source[i] - sums[i] / self.count[i] as f64
            } else {
                0.0
            };
        }
    }

    /// Max per-cell change of a step whose increments are summarised in `acc`,
    /// once `shift` is added. NaN wins.
    fn max_change(&self, acc: &BlockAcc, shift: &[f64]) -> f64 {
        let mut delta = 0.0f64;
        for (i, &s) in shift.iter().enumerate() {
            let x = (acc.inc_max[i] + s).abs().max((acc.inc_min[i] + s).abs());
            let x = if acc.sums[i].is_nan() || s.is_nan() {
                f64::NAN
            } else {
                x
            };
            if !(x <= delta) {
                delta = x;
            }
        }
        delta
    }

    /// Adds the offsets to every cell of `d`.
    fn apply(&self, d: &mut [f64], shift: &[f64], cols: usize) {
        for (r, row) in d.chunks_exact_mut(cols).enumerate() {
            let s = &shift[(r / self.factor) * self.bcols..][..self.bcols];
            for (chunk, &v) in row.chunks_exact_mut(self.factor).zip(s) {
                chunk.iter_mut().for_each(|x| *x += v);
            }
        }
    }
}

/// Outcome of the diffuse-adjust loop in scaled units.
enum Iterated {
    Done(Vec<f64>),
    /// The change dropped below the tolerance inside a double step; rerun
    /// with single steps.
    Overshot,
}

/// A double step is taken while the change is at least this multiple of the
/// tolerance, so that a stop inside it is unlikely.
const DOUBLE_STEP_MARGIN: f64 = 4.0;

fn iterate(
    lattice: &Lattice,
    blocks: &Blocks,
    init: &[f64],
    p: &SolverParams,
    double_margin: Option<f64>,
    report: &mut SolveReport,
) -> Result<Iterated> {
    let cols = lattice.cols;
    let n = blocks.len();
    let mut state = init.to_vec();
    let mut acc = BlockAcc::new(n);
    let mut acc2 = BlockAcc::new(n);
    let mut shift = vec![0.0; n];
    let mut pending = vec![0.0; n];

    if p.adjust_every > 1 {
        // offsets are added to the state at each adjustment, so `shift` stays zero
        let mut snapshot = state.clone();
        for k in 1..=p.n_iterations {
            lattice.sweep(&mut state, blocks, &shift, p.lambda, &mut acc);
            report.iterations_run = k;
            if k % p.adjust_every != 0 {
                continue;
            }
            blocks.shifts(&acc.sums, &mut pending, 0..n);
            blocks.apply(&mut state, &pending, cols);
            let mut delta = 0.0f64;
            for (a, b) in state.iter().zip(&snapshot) {
                let x = (a - b).abs();
                if !(x <= delta) {
                    delta = x;
                }
            }
            snapshot.copy_from_slice(&state);
            report.final_max_delta = delta;
            if !delta.is_finite() {
                return Err(Error::NonFinite { iteration: k });
            }
            if delta < p.tolerance {
                break;
            }
        }
        return Ok(Iterated::Done(state));
    }

    // The state after step k is D_k + S_k: `state` holds the diffused field D_k
    // and `shift` the block offsets S_k, which the next sweep adds on the fly.
    // The change of step k is max |increment + offset|, taken from per-block
    // increment extremes.
    let mut k = 0;
    while k < p.n_iterations {
        let double = double_margin.is_some_and(|m| {
            k >= 1 && k + 2 <= p.n_iterations && report.final_max_delta >= m * p.tolerance
        });
        if double {
            lattice.sweep_twice(
                &mut state,
                blocks,
                &shift,
                &mut pending,
                p.lambda,
                &mut acc,
                &mut acc2,
            );
            let delta = blocks.max_change(&acc, &pending);
            if !delta.is_finite() {
                return Err(Error::NonFinite { iteration: k + 1 });
            }
            if delta < p.tolerance {
                return Ok(Iterated::Overshot);
            }
            blocks.shifts(&acc2.sums, &mut shift, 0..n);
            k += 2;
            report.final_max_delta = blocks.max_change(&acc2, &shift);
        } else {
            lattice.sweep(&mut state, blocks, &shift, p.lambda, &mut acc);
            blocks.shifts(&acc.sums, &mut shift, 0..n);
            k += 1;
            report.final_max_delta = blocks.max_change(&acc, &shift);
        }
        report.iterations_run = k;
        if !report.final_max_delta.is_finite() {
            return Err(Error::NonFinite { iteration: k });
        }
        if report.final_max_delta < p.tolerance {
            break;
        }
    }
    blocks.apply(&mut state, &shift, cols);
    Ok(Iterated::Done(state))
}

/// One explicit diffusion step on the valid cells of `u`.
pub fn diffuse_step(u: &Grid2D, coeffs: &CoefficientField, lambda: f64) -> Result<Grid2D> {
    check_lambda(lambda)?;
    coeffs.geo.require_match(u.geo(), "coefficients vs field")?;
    let lattice = Lattice::new(coeffs, u.valid());
    let (rows, cols) = u.shape();
    let mut next: Vec<f64> = u.values().iter().copied().collect();
    let blocks = Blocks::identity(rows, cols);
    let zeros = vec![0.0; rows * cols];
    lattice.sweep(
        &mut next,
        &blocks,
        &zeros,
        lambda,
        &mut BlockAcc::new(rows * cols),
    );
    let values = Array2::from_shape_vec(u.shape(), next).expect("same length");
    Grid2D::new(*u.geo(), values, u.valid().clone())
}

/// Adds to every valid cell of each source-valid block the difference between the
/// source value and the block's current mean. Returns the adjusted field and the
/// number of source-valid blocks that had no valid cell to adjust.
pub fn adjust_step(u: &Grid2D, source: &Grid2D, factor: usize) -> Result<(Grid2D, usize)> {
    let coarse = u.geo().coarsened(factor)?;
    source
        .geo()
        .require_match(&coarse, "source vs coarsened field")?;
    let mean = coarsen_nan_aware(u, factor)?;
    let mut values = u.values().clone();
    let mut empty = 0usize;
    for ((br, bc), &ok) in source.valid().indexed_iter() {
        if !ok {
            continue;
        }
        let Some(m) = mean.get(br, bc) else {
            empty += 1;
            continue;
        };
        let shift = source.values()[[br, bc]] - m;
        for r in br * factor..(br + 1) * factor {
            for c in bc * factor..(bc + 1) * factor {
                if u.valid()[[r, c]] {
                    values[[r, c]] += shift;
                }
            }
        }
    }
    Ok((Grid2D::new(*u.geo(), values, u.valid().clone())?, empty))
}

/// Max over source-valid blocks of |coarsen(u) - source|; blocks with no valid
/// cell in `u` are skipped.
pub fn consistency_residual(u: &Grid2D, source: &Grid2D, factor: usize) -> Result<f64> {
    let c = coarsen_nan_aware(u, factor)?;
    source
        .geo()
        .require_match(c.geo(), "source vs coarsened output")?;
    let mut worst = 0.0f64;
    for ((r, col), &ok) in source.valid().indexed_iter() {
        if let (true, Some(v)) = (ok, c.get(r, col)) {
            worst = worst.max((v - source.values()[[r, col]]).abs());
        }
    }
    Ok(worst)
}

/// Super-resolves `source` by `p.factor` on the lattice of `coeffs`.
///
/// Runs in min-max scaled space fitted to the source and returns physical units.
/// Output cells are valid exactly where their source block is valid.
pub fn solve(
    source: &Grid2D,
    coeffs: &CoefficientField,
    p: &SolverParams,
) -> Result<(Grid2D, SolveReport)> {
    solve_with_scale(source, coeffs, p, None)
}

/// As [`solve`], with an explicit scaler (tiles of one scene share the scene's).
pub fn solve_with_scale(
    source: &Grid2D,
    coeffs: &CoefficientField,
    p: &SolverParams,
    scale: Option<ScaleParams>,
) -> Result<(Grid2D, SolveReport)> {
    let started = Instant::now();
    p.validate()?;
    let factor = p.factor;
    let hr_geo = source.geo().refined(factor);
    coeffs
        .geo
        .require_match(&hr_geo, "coefficients vs refined source")?;

    let mask = replicate_nearest(source, factor).valid().clone();
    let Some(scale) = scale.or_else(|| ScaleParams::fit(source)) else {
        log::warn!("source has no valid cell; output is empty");
        return Ok((
            Grid2D::invalid(hr_geo),
            SolveReport {
                wall_time: started.elapsed().as_secs_f64(),
                ..Default::default()
            },
        ));
    };
    let scaled_source = minmax_scale(source, scale);

    let init = match p.init {
        Init::Bicubic => {
            let up = upsample_bicubic(&scaled_source, factor);
            let fallback = replicate_nearest(&scaled_source, factor);
            let values = Array2::from_shape_fn(hr_geo.shape(), |(r, c)| {
                up.get(r, c).unwrap_or(fallback.values()[[r, c]])
            });
            Grid2D::new(hr_geo, values, mask.clone())?
        }
        Init::Replicate => replicate_nearest(&scaled_source, factor),
    };

    let lattice = Lattice::new(coeffs, &mask);
    let blocks = Blocks::new(&scaled_source, &mask, factor);
    let init: Vec<f64> = init.values().iter().copied().collect();
    let fresh = SolveReport {
        final_max_delta: f64::INFINITY,
        ..Default::default()
    };
    let mut report = fresh;
    let cur = match iterate(
        &lattice,
        &blocks,
        &init,
        p,
        Some(DOUBLE_STEP_MARGIN),
        &mut report,
    )? {
        Iterated::Done(v) => v,
        Iterated::Overshot => {
            report = fresh;
            match iterate(&lattice, &blocks, &init, p, None, &mut report)? {
                Iterated::Done(v) => v,
                Iterated::Overshot => unreachable!("single steps never overshoot"),
            }
        }
    };
    if cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration: report.iterations_run,
        });
    }

    let scaled = Grid2D::new(
        hr_geo,
        Array2::from_shape_vec(hr_geo.shape(), cur).expect("same length"),
        mask,
    )?;
    let physical = minmax_unscale(&scaled, scale);
    let (out, empty) = adjust_step(&physical, source, factor)?;
    report.empty_blocks = empty;
    report.consistency_residual = consistency_residual(&out, source, factor)?;
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo(rows: usize, cols: usize) -> GeoTransform {
        GeoTransform::new(5.0, 65.0, 0.01, rows, cols).unwrap()
    }

    #[test]
    fn two_cell_examples() {
        let u = Grid2D::from_values(geo(1, 2), array![[0.0, 1.0]]).unwrap();
        let full = CoefficientField::uniform(geo(1, 2), 1.0);
        let out = diffuse_step(&u, &full, 0.25).unwrap();
        assert_eq!(out.values(), &array![[0.25, 0.75]]);
        let blocked = CoefficientField::uniform(geo(1, 2), 0.0);
        assert_eq!(diffuse_step(&u, &blocked, 0.25).unwrap(), u);
    }

    #[test]
    fn invalid_neighbour_drops_out() {
        let u = Grid2D::from_values(geo(1, 3), array![[0.0, f64::NAN, 1.0]]).unwrap();
        let out = diffuse_step(&u, &CoefficientField::uniform(geo(1, 3), 1.0), 0.25).unwrap();
        assert_eq!(out.get(0, 0), Some(0.0));
        assert_eq!(out.get(0, 1), None);
        assert_eq!(out.get(0, 2), Some(1.0));
    }

    #[test]
    fn lambda_and_geometry_checked() {
        let u = Grid2D::filled(geo(2, 2), 1.0);
        let c = CoefficientField::uniform(geo(2, 2), 1.0);
        assert!(diffuse_step(&u, &c, 0.3).is_err());
        assert!(diffuse_step(&u, &c, 0.0).is_err());
        let other = CoefficientField::uniform(geo(2, 3), 1.0);
        assert!(matches!(
            diffuse_step(&u, &other, 0.1),
            Err(Error::GeoMismatch(_))
        ));
    }

    #[test]
    fn adjust_examples() {
        let src_geo = geo(2, 2).coarsened(2).unwrap();
        let u = Grid2D::filled(geo(2, 2), 0.0);
        let (out, empty) = adjust_step(&u, &Grid2D::filled(src_geo, 1.0), 2).unwrap();
        assert_eq!(out.values(), &array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(empty, 0);

        let u = Grid2D::from_values(geo(2, 2), array![[0.0, 2.0], [4.0, 6.0]]).unwrap();
        let (out, _) = adjust_step(&u, &Grid2D::filled(src_geo, 2.0), 2).unwrap();
        assert_eq!(out.values(), &array![[-1.0, 1.0], [3.0, 5.0]]);

        let (out, _) = adjust_step(&u, &Grid2D::invalid(src_geo), 2).unwrap();
        assert_eq!(out, u);

        let (_, empty) = adjust_step(
            &Grid2D::invalid(geo(2, 2)),
            &Grid2D::filled(src_geo, 2.0),
            2,
        )
        .unwrap();
        assert_eq!(empty, 1);
    }

    #[test]
    fn adjust_is_identity_at_fixed_point() {
        let u = Grid2D::from_values(
            geo(4, 4),
            Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64),
        )
        .unwrap();
        let src = coarsen_nan_aware(&u, 2).unwrap();
        let (out, _) = adjust_step(&u, &src, 2).unwrap();
        for (a, b) in out.values().iter().zip(u.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_source_is_fixed_point() {
        let src = Grid2D::filled(geo(4, 6), 271.3);
        let coeffs = CoefficientField::uniform(src.geo().refined(5), 0.7);
        let (out, rep) = solve(
            &src,
            &coeffs,
            &SolverParams {
                n_iterations: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.values().iter().all(|&v| v == 271.3));
        assert_eq!(rep.consistency_residual, 0.0);
    }

    #[test]
    fn fused_loop_matches_step_by_step_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut v = Array2::from_shape_fn((6, 7), |_| rng.random_range(250.0..300.0));
        v[[1, 4]] = f64::NAN;
        let src = Grid2D::from_values(geo(6, 7), v).unwrap();
        let hr = src.geo().refined(4);
        let (h, vv) = (
            Array2::from_shape_fn(hr.shape(), |_| rng.random::<f64>()),
            Array2::from_shape_fn(hr.shape(), |_| rng.random::<f64>()),
        );
        let coeffs = CoefficientField::new(hr, h, vv).unwrap().0;
        for (n, adjust_every) in [(1, 1), (2, 1), (37, 1), (36, 3), (37, 3)] {
            let p = SolverParams {
                factor: 4,
                n_iterations: n,
                adjust_every,
                tolerance: 0.0,
                init: Init::Replicate,
                ..Default::default()
            };
            let (out, rep) = solve(&src, &coeffs, &p).unwrap();
            assert_eq!(rep.iterations_run, n);

            let scale = ScaleParams::fit(&src).unwrap();
            let scaled = minmax_scale(&src, scale);
            let mut u = replicate_nearest(&scaled, 4);
            let mut last = u.clone();
            let mut delta = f64::INFINITY;
            for k in 1..=n {
                u = diffuse_step(&u, &coeffs, p.lambda).unwrap();
                if k % adjust_every == 0 {
                    u = adjust_step(&u, &scaled, 4).unwrap().0;
                    delta = u
                        .values()
                        .iter()
                        .zip(last.values())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    last = u.clone();
                }
            }
            let expected = adjust_step(&minmax_unscale(&u, scale), &src, 4).unwrap().0;
            for (a, b) in out.values().iter().zip(expected.values()) {
                assert!(
                    (a - b).abs() < 1e-10,
                    "n={n} every={adjust_every}: {a} vs {b}"
                );
            }
            if n % adjust_every == 0 {
                assert!((rep.final_max_delta - delta).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_steps_match_single_steps_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut overshoots = 0;
        for (brows, bcols, factor) in [
            (1, 1, 1),
            (1, 9, 1),
            (7, 1, 1),
            (4, 5, 3),
            (6, 7, 4),
            (3, 3, 5),
            (5, 2, 2),
        ] {
            let mut v = Array2::from_shape_fn((brows, bcols), |_| rng.random_range(250.0..300.0));
            if brows * bcols > 4 {
                v[[brows / 2, bcols / 2]] = f64::NAN;
            }
            let src = Grid2D::from_values(geo(brows, bcols), v).unwrap();
            let hr = src.geo().refined(factor);
            let h = Array2::from_shape_fn(hr.shape(), |_| rng.random::<f64>());
            let vv = Array2::from_shape_fn(hr.shape(), |_| rng.random::<f64>());
            let coeffs = CoefficientField::new(hr, h, vv).unwrap().0;
            let mask = replicate_nearest(&src, factor).valid().clone();
            let scaled = minmax_scale(&src, ScaleParams::fit(&src).unwrap());
            let lattice = Lattice::new(&coeffs, &mask);
            let blocks = Blocks::new(&scaled, &mask, factor);
            let init: Vec<f64> = upsample_bicubic(&scaled, factor)
                .values()
                .iter()
                .copied()
                .collect();
            for (n, tolerance) in [
                (1, 0.0),
                (2, 0.0),
                (3, 0.0),
                (40, 0.0),
                (41, 0.0),
                (200, 1e-3),
                (200, 1e-4),
            ] {
                let p = SolverParams {
                    factor,
                    n_iterations: n,
                    tolerance,
                    ..Default::default()
                };
                let mut single = SolveReport::default();
                let Iterated::Done(expected) =
                    iterate(&lattice, &blocks, &init, &p, None, &mut single).unwrap()
                else {
                    panic!("single steps overshot");
                };
                let mut double = SolveReport::default();
                match iterate(&lattice, &blocks, &init, &p, Some(1.0), &mut double).unwrap() {
                    Iterated::Done(got) => {
                        assert_eq!(double.iterations_run, single.iterations_run);
                        assert_eq!(
                            double.final_max_delta.to_bits(),
                            single.final_max_delta.to_bits()
                        );
                        assert!(got
                            .iter()
                            .zip(&expected)
                            .all(|(a, b)| a.to_bits() == b.to_bits()));
                    }
                    Iterated::Overshot => {
                        overshoots += 1;
                        let (_, rep) = solve(&src, &coeffs, &p).unwrap();
                        assert_eq!(rep.iterations_run, single.iterations_run);
                    }
                }
            }
        }
        assert!(overshoots > 0);
    }

    #[test]
    fn zero_conductance_gives_replication() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Grid2D::from_values(
            geo(5, 4),
            Array2::from_shape_fn((5, 4), |_| rng.random_range(250.0..300.0)),
        )
        .unwrap();
        let coeffs = CoefficientField::uniform(src.geo().refined(3), 0.0);
        let p = SolverParams {
            factor: 3,
            n_iterations: 20,
            init: Init::Replicate,
            ..Default::default()
        };
        let (out, rep) = solve(&src, &coeffs, &p).unwrap();
        let rep_src = replicate_nearest(&src, 3);
        for (a, b) in out.values().iter().zip(rep_src.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(rep.consistency_residual < 1e-9);
    }

    #[test]
    fn clouded_blocks_stay_invalid_and_others_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = Array2::from_shape_fn((6, 6), |_| rng.random_range(240.0..290.0));
        v[[2, 3]] = f64::NAN;
        v[[0, 0]] = f64::NAN;
        let src = Grid2D::from_values(geo(6, 6), v).unwrap();
        let coeffs = CoefficientField::uniform(src.geo().refined(5), 1.0);
        let (out, rep) = solve(
            &src,
            &coeffs,
            &SolverParams {
                n_iterations: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.valid(), replicate_nearest(&src, 5).valid());
        assert!(rep.consistency_residual <= 1e-9);
        assert_eq!(rep.empty_blocks, 0);
    }

    #[test]
    fn early_stop_and_sparse_adjustment() {
        let src = Grid2D::from_values(
            geo(3, 3),
            Array2::from_shape_fn((3, 3), |(r, c)| 260.0 + (r * 3 + c) as f64),
        )
        .unwrap();
        let coeffs = CoefficientField::uniform(src.geo().refined(5), 1.0);
        let p = SolverParams {
            n_iterations: 100_000,
            tolerance: 1e-5,
            adjust_every: 3,
            ..Default::default()
        };
        let (_, rep) = solve(&src, &coeffs, &p).unwrap();
        assert!(rep.iterations_run < 100_000);
        assert!(rep.final_max_delta < 1e-5);
        assert_eq!(rep.iterations_run % 3, 0);
        assert!(rep.consistency_residual <= 1e-9);
    }

    #[test]
    fn all_invalid_source() {
        let src = Grid2D::invalid(geo(2, 2));
        let coeffs = CoefficientField::uniform(src.geo().refined(5), 1.0);
        let (out, rep) = solve(&src, &coeffs, &SolverParams::default()).unwrap();
        assert_eq!(out.valid_count(), 0);
        assert_eq!(rep.consistency_residual, 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        let src = Grid2D::filled(geo(2, 2), 1.0);
        let coeffs = CoefficientField::uniform(src.geo().refined(5), 1.0);
        for p in [
            SolverParams {
                lambda: 0.26,
                ..Default::default()
            },
            SolverParams {
                n_iterations: 0,
                ..Default::default()
            },
            SolverParams {
                adjust_every: 0,
                ..Default::default()
            },
            SolverParams {
                tolerance: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                solve(&src, &coeffs, &p),
                Err(Error::InvalidParams(_))
            ));
        }
        let wrong = CoefficientField::uniform(src.geo().refined(4), 1.0);
        assert!(matches!(
            solve(&src, &wrong, &SolverParams::default()),
            Err(Error::GeoMismatch(_))
        ));
    }

    fn random_case(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Grid2D, CoefficientField) {
        let v = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0));
        let m = Array2::from_shape_fn((rows, cols), |_| rng.random_bool(0.85));
        let u = Grid2D::new(geo(rows, cols), v, m).unwrap();
        let ch = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..=1.0));
        let cv = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..=1.0));
        (u, CoefficientField::new(geo(rows, cols), ch, cv).unwrap().0)
    }

    proptest! {
        #[test]
        fn extremum_principle(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9, lambda in 1e-3f64..=0.25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, c) = random_case(&mut rng, rows, cols);
            let out = diffuse_step(&u, &c, lambda).unwrap();
            for r in 0..rows {
                for cc in 0..cols {
                    let Some(v) = out.get(r, cc) else { continue };
                    let mut hood = vec![u.get(r, cc).unwrap()];
                    if r > 0 { hood.extend(u.get(r - 1, cc)); }
                    if r + 1 < rows { hood.extend(u.get(r + 1, cc)); }
                    if cc > 0 { hood.extend(u.get(r, cc - 1)); }
                    if cc + 1 < cols { hood.extend(u.get(r, cc + 1)); }
                    let lo = hood.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = hood.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn mass_conserved_on_valid_lattice(seed in any::<u64>(), rows in 2usize..20, cols in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, c) = random_case(&mut rng, rows, cols);
            let u = Grid2D::new(*u.geo(), u.values().mapv(|v| v + 300.0), Array2::from_elem((rows, cols), true)).unwrap();
            let out = diffuse_step(&u, &c, 0.25).unwrap();
            let before: f64 = u.values().sum();
            let after: f64 = out.values().sum();
            prop_assert!((before - after).abs() <= 1e-9 * before.abs());
        }
    }
}
