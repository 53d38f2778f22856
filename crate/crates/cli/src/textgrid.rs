//! Plain-text raster exchange format used by `pack` and `unpack`.
//!
//! ```text
//! lon_min = 20
//! lat_max = 70
//! cell_size = 0.01
//! n_rows = 2
//! n_cols = 3
//! values
//! 273.15 NaN 280
//! 271 272.5 NaN
//! ```
//! Lines starting with `#` are comments. `NaN` marks an invalid cell.

use anyhow::{anyhow, bail, Result};
use ndarray::Array2;

use lstsr::{GeoTransform, Grid2D};

pub fn write(g: &Grid2D) -> String {
    let geo = g.geo();
    let mut out = format!(
        "lon_min = {}\nlat_max = {}\ncell_size = {}\nn_rows = {}\nn_cols = {}\nvalues\n",
        geo.lon_min, geo.lat_max, geo.cell_size, geo.n_rows, geo.n_cols
    );
    for r in 0..geo.n_rows {
        let row: Vec<String> = (0..geo.n_cols)
            .map(|c| match g.get(r, c) {
                Some(v) => v.to_string(),
                None => "NaN".to_string(),
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> Result<Grid2D> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    });
    let mut keys = std::collections::HashMap::new();
    for (i, line) in lines.by_ref() {
        let line = line.trim();
        if line == "values" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        keys.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
    }
    let num = |k: &str| -> Result<f64> {
        let (line, v) = keys.get(k).ok_or_else(|| anyhow!("missing key {k}"))?;
        v.parse()
            .map_err(|_| anyhow!("line {line}: bad value for {k}: {v:?}"))
    };
    let count = |k: &str| -> Result<usize> {
        let (line, v) = keys.get(k).ok_or_else(|| anyhow!("missing key {k}"))?;
        v.parse()
            .map_err(|_| anyhow!("line {line}: bad count for {k}: {v:?}"))
    };
    let geo = GeoTransform::new(
        num("lon_min")?,
        num("lat_max")?,
        num("cell_size")?,
        count("n_rows")?,
        count("n_cols")?,
    )?;
    let mut values = Vec::with_capacity(geo.len());
    for (row, (i, line)) in lines.by_ref().take(geo.n_rows).enumerate() {
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| anyhow!("line {}: bad number {tok:?}", i + 1))?;
            values.push(v);
        }
        if values.len() - before != geo.n_cols {
            bail!(
                "line {}: row {row} has {} values, expected {}",
                i + 1,
                values.len() - before,
                geo.n_cols
            );
        }
    }
    if values.len() != geo.len() {
        bail!("expected {} rows of values", geo.n_rows);
    }
    if let Some((i, _)) = lines.next() {
        bail!("line {}: trailing data after {} rows", i + 1, geo.n_rows);
    }
    let values = Array2::from_shape_vec(geo.shape(), values)?;
    Ok(Grid2D::from_values(geo, values)?)
}
