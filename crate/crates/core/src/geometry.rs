//! Coordinate conventions and resampling.
//!
//! Every axis of an `N`-cell lattice is mapped onto `[-1, 1]` with cell `i`
//! centered at `-1 + (2i + 1) / N`. Spatial coordinates are `[y, x]` pairs.
//! Sampling outside the lattice clamps to the border cells.

use crate::error::{Error, Result};
use crate::numerics::{Grads, Graph, Op, Values, Var};

/// Continuous center of cell `i` on an `n`-cell axis.
pub fn normalize_index(i: usize, n: usize) -> Result<f64> {
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    Ok(center(i, n))
}

#[inline]
pub(crate) fn center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Cell centers of an `h × w` lattice in row-major order.
pub fn lattice_centers(h: usize, w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = center(i, h);
        for j in 0..w {
            out.push([y, center(j, w)]);
        }
    }
    out
}

/// Index of the cell whose center is nearest to `coord`; ties go to the
/// smaller index. `coord` is clamped to `[-1, 1]`.
#[inline]
pub fn nearest_index(coord: f64, n: usize) -> usize {
    let u = (coord.clamp(-1.0, 1.0) + 1.0) * n as f64 / 2.0;
    (u.ceil() as usize).saturating_sub(1).min(n - 1)
}

/// `channels × height × width` real array on the normalized lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "grid dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "feature_grid",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
        .expect("positive dims")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// Feature vector of cell `(i, j)`.
    pub fn vector(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, i, j)).collect()
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [center(i, self.height), center(j, self.width)]
    }

    /// Builds a grid from `rows = h·w` row-major vectors of length `channels`.
    pub fn from_rows(channels: usize, h: usize, w: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != channels * h * w {
            return Err(Error::Dimension {
                op: "from_rows",
                lhs: vec![h * w, channels],
                rhs: vec![rows.len()],
            });
        }
        let mut data = vec![0.0; rows.len()];
        for (p, row) in rows.chunks_exact(channels).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                data[c * h * w + p] = v;
            }
        }
        Self::new(channels, h, w, data)
    }

    /// Row-major `h·w × channels` layout (one feature vector per row).
    pub fn to_rows(&self) -> Vec<f64> {
        let plane = self.plane();
        let mut rows = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                rows[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        rows
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::Size(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for i in top..top + h {
                let start = (c * self.height + i) * self.width + left;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Self::new(self.channels, h, w, data)
    }

    /// Concatenates along the channel axis.
    pub fn stack(parts: &[&FeatureGrid]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("stack of zero grids".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Self::new(channels, first.height, first.width, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestCell {
    pub row: usize,
    pub col: usize,
    /// Feature vector of the nearest cell.
    pub feature: Vec<f64>,
    /// Center of the nearest cell.
    pub center: [f64; 2],
    /// Offset from the center to the query, optionally in cell units.
    pub delta: [f64; 2],
}

/// Nearest cell to `xs` and the offset `xs - center`, scaled per axis by
/// `N/2` when `scaled` (one cell width maps to length 1).
pub fn nearest_cell(grid: &FeatureGrid, xs: [f64; 2], scaled: bool) -> NearestCell {
    let q = [xs[0].clamp(-1.0, 1.0), xs[1].clamp(-1.0, 1.0)];
    let row = nearest_index(q[0], grid.height);
    let col = nearest_index(q[1], grid.width);
    let c = grid.center(row, col);
    let (sy, sx) = delta_scale(grid.height, grid.width, scaled);
    NearestCell {
        row,
        col,
        feature: grid.vector(row, col),
        center: c,
        delta: [(q[0] - c[0]) * sy, (q[1] - c[1]) * sx],
    }
}

fn delta_scale(h: usize, w: usize, scaled: bool) -> (f64, f64) {
    if scaled {
        (h as f64 / 2.0, w as f64 / 2.0)
    } else {
        (1.0, 1.0)
    }
}

/// Bilinear taps along one axis: `(i0, i1, frac, du/dcoord)`.
#[inline]
fn axis_taps(coord: f64, n: usize) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let u = (coord + 1.0) * n as f64 / 2.0 - 0.5;
    let last = (n - 1) as f64;
    let (u, du) = if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= last {
        (last, 0.0)
    } else {
        (u, n as f64 / 2.0)
    };
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64, du)
}

/// Bilinear interpolation of the four surrounding cell centers at every
/// coordinate. Returns `coords.len() × channels`, row-major.
pub fn bilinear_sample(grid: &FeatureGrid, coords: &[[f64; 2]]) -> Vec<f64> {
    let c = grid.channels;
    let mut out = vec![0.0; coords.len() * c];
    for (q, row) in coords.iter().zip(out.chunks_exact_mut(c)) {
        sample_into(grid.height, grid.width, c, &grid.data, *q, row);
    }
    out
}

#[inline]
fn sample_into(h: usize, w: usize, c: usize, data: &[f64], q: [f64; 2], out: &mut [f64]) {
    let (y0, y1, fy, _) = axis_taps(q[0], h);
    let (x0, x1, fx, _) = axis_taps(q[1], w);
    let plane = h * w;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let base = ch * plane;
        let v00 = data[base + y0 * w + x0];
        let v01 = data[base + y0 * w + x1];
        let v10 = data[base + y1 * w + x0];
        let v11 = data[base + y1 * w + x1];
        *o = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
}

/// A rectangular block of cells of a larger `full_h × full_w` lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeWindow {
    pub full_h: usize,
    pub full_w: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl LatticeWindow {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            full_h: h,
            full_w: w,
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    /// Centers of the window's cells (in the full lattice's frame).
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for i in self.top..self.top + self.height {
            let y = center(i, self.full_h);
            for j in self.left..self.left + self.width {
                out.push([y, center(j, self.full_w)]);
            }
        }
        out
    }

    pub fn contains(&self, other: &LatticeWindow) -> bool {
        other.top >= self.top
            && other.left >= self.left
            && other.top + other.height <= self.top + self.height
            && other.left + other.width <= self.left + self.width
    }

    /// Smallest window covering this one and every bilinear tap of `coords`.
    pub fn grow_to_taps(&self, coords: &[[f64; 2]]) -> LatticeWindow {
        let (mut r0, mut r1) = (self.top, self.top + self.height - 1);
        let (mut c0, mut c1) = (self.left, self.left + self.width - 1);
        for q in coords {
            let (y0, y1, _, _) = axis_taps(q[0], self.full_h);
            let (x0, x1, _, _) = axis_taps(q[1], self.full_w);
            r0 = r0.min(y0);
            r1 = r1.max(y1);
            c0 = c0.min(x0);
            c1 = c1.max(x1);
        }
        LatticeWindow {
            top: r0,
            left: c0,
            height: r1 - r0 + 1,
            width: c1 - c0 + 1,
            ..*self
        }
    }
}

/// Bilinear sampling on the full lattice of `window` when only the window's
/// cells are stored in `grid`. Every tap must fall inside the window.
pub fn bilinear_sample_window(grid: &FeatureGrid, window: &LatticeWindow, coords: &[[f64; 2]]) -> Result<Vec<f64>> {
    if (grid.height, grid.width) != (window.height, window.width) {
        return Err(Error::Dimension {
            op: "bilinear_sample_window",
            lhs: grid.shape().to_vec(),
            rhs: vec![grid.channels, window.height, window.width],
        });
    }
    let c = grid.channels;
    let plane = grid.plane();
    let mut out = vec![0.0; coords.len() * c];
    for (q, row) in coords.iter().zip(out.chunks_exact_mut(c)) {
        let (y0, y1, fy, _) = axis_taps(q[0], window.full_h);
        let (x0, x1, fx, _) = axis_taps(q[1], window.full_w);
        let inside = |r: usize, k: usize| {
            r >= window.top && r < window.top + window.height && k >= window.left && k < window.left + window.width
        };
        if !(inside(y0, x0) && inside(y1, x1)) {
            return Err(Error::Index {
                index: y1.max(x1),
                len: window.height.max(window.width),
            });
        }
        let (y0, y1) = (y0 - window.top, y1 - window.top);
        let (x0, x1) = (x0 - window.left, x1 - window.left);
        let w = window.width;
        for (ch, o) in row.iter_mut().enumerate() {
            let base = ch * plane;
            let v00 = grid.data[base + y0 * w + x0];
            let v01 = grid.data[base + y0 * w + x1];
            let v10 = grid.data[base + y1 * w + x0];
            let v11 = grid.data[base + y1 * w + x1];
            *o = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    Ok(out)
}

/// Samples `grid` at every `H'×W'` lattice center displaced by `flow`
/// (`2 × H' × W'`, channels `[dy, dx]`, normalized units).
pub fn warp_grid(grid: &FeatureGrid, flow: &FeatureGrid) -> Result<FeatureGrid> {
    if flow.channels != 2 {
        return Err(Error::Dimension {
            op: "warp_grid",
            lhs: flow.shape().to_vec(),
            rhs: vec![2, flow.height, flow.width],
        });
    }
    let coords: Vec<[f64; 2]> = lattice_centers(flow.height, flow.width)
        .into_iter()
        .enumerate()
        .map(|(p, c)| {
            [
                c[0] + flow.data[p],
                c[1] + flow.data[flow.plane() + p],
            ]
        })
        .collect();
    let rows = bilinear_sample(grid, &coords);
    FeatureGrid::from_rows(grid.channels, flow.height, flow.width, &rows)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection of `i` into `0..n`.
pub fn mirror_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Normalized resampling taps `(indices, weights)` for each output index.
fn contributions(n_in: usize, n_out: usize, scale: f64, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let (kscale, width) = if antialias && scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as isize + 2;
    (0..n_out)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as isize;
            let mut ws: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            let mut total = 0.0;
            for p in 0..taps {
                let idx = left + p;
                let wgt = kscale * cubic_kernel(kscale * (u - idx as f64));
                if wgt != 0.0 {
                    ws.push((mirror_index(idx, n_in), wgt));
                    total += wgt;
                }
            }
            ws.iter_mut().for_each(|(_, w)| *w /= total);
            ws
        })
        .collect()
}

fn resample_rows(img: &FeatureGrid, taps: &[Vec<(usize, f64)>]) -> FeatureGrid {
    let (c, h, w) = (img.channels, img.height, img.width);
    let hn = taps.len();
    let mut data = vec![0.0; c * hn * w];
    for ch in 0..c {
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut data[(ch * hn + o) * w..(ch * hn + o + 1) * w];
            for &(i, wt) in t {
                let src = &img.data[(ch * h + i) * w..(ch * h + i + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
            }
        }
    }
    FeatureGrid::new(c, hn, w, data).expect("positive dims")
}

fn resample_cols(img: &FeatureGrid, taps: &[Vec<(usize, f64)>]) -> FeatureGrid {
    let (c, h, w) = (img.channels, img.height, img.width);
    let wn = taps.len();
    let mut data = vec![0.0; c * h * wn];
    for r in 0..c * h {
        let src = &img.data[r * w..(r + 1) * w];
        let dst = &mut data[r * wn..(r + 1) * wn];
        for (d, t) in dst.iter_mut().zip(taps) {
            *d = t.iter().map(|&(j, wt)| wt * src[j]).sum();
        }
    }
    FeatureGrid::new(c, h, wn, data).expect("positive dims")
}

/// Antialiased bicubic downsampling by `scale ∈ (0, 1]`.
///
/// Output dims are `round(dim · scale)`. For `scale < 1` the kernel is
/// stretched by `1/scale` and the taps renormalized; borders reflect.
pub fn bicubic_resize(image: &FeatureGrid, scale: f64) -> Result<FeatureGrid> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Size(format!("downsampling scale must be in (0, 1], got {scale}")));
    }
    if scale == 1.0 {
        return Ok(image.clone());
    }
    let h = (image.height as f64 * scale).round() as usize;
    let w = (image.width as f64 * scale).round() as usize;
    if h == 0 || w == 0 {
        return Err(Error::Size(format!(
            "{}x{} at scale {scale} collapses to {h}x{w}",
            image.height, image.width
        )));
    }
    let rows = resample_rows(image, &contributions(image.height, h, scale, true));
    Ok(resample_cols(&rows, &contributions(image.width, w, scale, true)))
}

/// Bicubic resampling to an explicit size, antialiased along shrinking axes.
pub fn bicubic_resize_to(image: &FeatureGrid, height: usize, width: usize) -> Result<FeatureGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Size(format!("cannot resize to {height}x{width}")));
    }
    let sy = height as f64 / image.height as f64;
    let sx = width as f64 / image.width as f64;
    let rows = if height == image.height {
        image.clone()
    } else {
        resample_rows(image, &contributions(image.height, height, sy, true))
    };
    if width == image.width {
        return Ok(rows);
    }
    Ok(resample_cols(&rows, &contributions(image.width, width, sx, true)))
}

// ---------------------------------------------------------------------------
// Differentiable sampling ops

fn grid_dims(g: &Graph<'_>, grid: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(grid) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

fn coord_rows(g: &Graph<'_>, coords: Var, op: &'static str) -> Result<usize> {
    let (n, k) = g.dims2(coords, op)?;
    if k != 2 {
        return Err(Error::Dimension {
            op,
            lhs: g.shape(coords).to_vec(),
            rhs: vec![n, 2],
        });
    }
    Ok(n)
}

struct Bilinear {
    grid: Var,
    coords: Var,
}

impl Op for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (c, h, w) = {
            let s = values.shape(self.grid);
            (s[0], s[1], s[2])
        };
        let plane = h * w;
        let coords = values.get(self.coords);
        let data = values.get(self.grid);
        if let Some(dg) = grads.slot(self.grid) {
            for (q, g) in coords.chunks_exact(2).zip(dy.chunks_exact(c)) {
                let (y0, y1, fy, _) = axis_taps(q[0], h);
                let (x0, x1, fx, _) = axis_taps(q[1], w);
                for (ch, &gv) in g.iter().enumerate() {
                    let base = ch * plane;
                    dg[base + y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                    dg[base + y0 * w + x1] += (1.0 - fy) * fx * gv;
                    dg[base + y1 * w + x0] += fy * (1.0 - fx) * gv;
                    dg[base + y1 * w + x1] += fy * fx * gv;
                }
            }
        }
        if let Some(dc) = grads.slot(self.coords) {
            for ((q, g), d) in coords.chunks_exact(2).zip(dy.chunks_exact(c)).zip(dc.chunks_exact_mut(2)) {
                let (y0, y1, fy, duy) = axis_taps(q[0], h);
                let (x0, x1, fx, dux) = axis_taps(q[1], w);
                let (mut gy, mut gx) = (0.0, 0.0);
                for (ch, &gv) in g.iter().enumerate() {
                    let base = ch * plane;
                    let v00 = data[base + y0 * w + x0];
                    let v01 = data[base + y0 * w + x1];
                    let v10 = data[base + y1 * w + x0];
                    let v11 = data[base + y1 * w + x1];
                    gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                d[0] += gy * duy;
                d[1] += gx * dux;
            }
        }
    }
}

/// Differentiable bilinear sampling of a `[C, H, W]` grid at `[n, 2]`
/// coordinates; returns `[n, C]`.
pub fn bilinear(g: &mut Graph<'_>, grid: Var, coords: Var) -> Result<Var> {
    let (c, h, w) = grid_dims(g, grid, "bilinear")?;
    let n = coord_rows(g, coords, "bilinear")?;
    let mut out = vec![0.0; n * c];
    {
        let data = g.value(grid);
        for (q, row) in g.value(coords).chunks_exact(2).zip(out.chunks_exact_mut(c)) {
            sample_into(h, w, c, data, [q[0], q[1]], row);
        }
    }
    Ok(g.push(vec![n, c], out, &[grid, coords], Bilinear { grid, coords }))
}

struct Lookup {
    grid: Var,
    coords: Var,
    cells: Vec<(usize, usize)>,
    /// Per-row `d delta / d coord` (zero where the coordinate was clamped).
    slopes: Vec<[f64; 2]>,
}

impl Op for Lookup {
    fn name(&self) -> &'static str {
        "nearest_lookup"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (c, h, w) = {
            let s = values.shape(self.grid);
            (s[0], s[1], s[2])
        };
        let plane = h * w;
        let k = c + 2;
        if let Some(dg) = grads.slot(self.grid) {
            for (&(i, j), g) in self.cells.iter().zip(dy.chunks_exact(k)) {
                for ch in 0..c {
                    dg[ch * plane + i * w + j] += g[ch];
                }
            }
        }
        if let Some(dc) = grads.slot(self.coords) {
            for ((s, g), d) in self.slopes.iter().zip(dy.chunks_exact(k)).zip(dc.chunks_exact_mut(2)) {
                d[0] += s[0] * g[c];
                d[1] += s[1] * g[c + 1];
            }
        }
    }
}

/// Nearest-cell lookup: for each coordinate row returns the nearest cell's
/// feature vector followed by the (optionally cell-scaled) offset
/// `[dy, dx]`, i.e. `[n, C + 2]`.
///
/// `shift` displaces only the cell selection (the offset is still measured
/// from the unshifted query); it selects neighbouring cells for ensembling.
/// The offset is differentiable in the coordinate inside each cell; the cell
/// choice itself is piecewise constant.
pub fn nearest_lookup(
    g: &mut Graph<'_>,
    grid: Var,
    coords: Var,
    scaled: bool,
    shift: [f64; 2],
) -> Result<Var> {
    let (c, h, w) = grid_dims(g, grid, "nearest_lookup")?;
    let n = coord_rows(g, coords, "nearest_lookup")?;
    let (sy, sx) = delta_scale(h, w, scaled);
    let plane = h * w;
    let k = c + 2;
    let mut out = vec![0.0; n * k];
    let mut cells = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    {
        let data = g.value(grid);
        for (q, row) in g.value(coords).chunks_exact(2).zip(out.chunks_exact_mut(k)) {
            let qy = q[0].clamp(-1.0, 1.0);
            let qx = q[1].clamp(-1.0, 1.0);
            let i = nearest_index(qy + shift[0], h);
            let j = nearest_index(qx + shift[1], w);
            for ch in 0..c {
                row[ch] = data[ch * plane + i * w + j];
            }
            row[c] = (qy - center(i, h)) * sy;
            row[c + 1] = (qx - center(j, w)) * sx;
            cells.push((i, j));
            slopes.push([
                if q[0].abs() <= 1.0 { sy } else { 0.0 },
                if q[1].abs() <= 1.0 { sx } else { 0.0 },
            ]);
        }
    }
    Ok(g.push(
        vec![n, k],
        out,
        &[grid, coords],
        Lookup {
            grid,
            coords,
            cells,
            slopes,
        },
    ))
}
