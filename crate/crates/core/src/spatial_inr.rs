//! Continuous feature field over an encoded grid: the feature at `xs` is a
//! SIREN applied to the nearest cell's vector and the offset to its center.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{lattice_centers, nearest_lookup, FeatureGrid};
use crate::numerics::{Grads, Graph, Op, ParamStore, Siren, SirenSpec, Values, Var};

/// Rows per inference graph when evaluating large coordinate sets.
pub const QUERY_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialInrConfig {
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    /// Offsets measured in cells rather than normalized units.
    pub scaled_delta: bool,
    /// Blend the four surrounding cells by opposite-area weights.
    pub local_ensemble: bool,
    /// Append the output pixel size to the MLP input.
    pub cell_decode: bool,
}

impl Default for SpatialInrConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 256],
            out_dim: 64,
            scaled_delta: true,
            local_ensemble: false,
            cell_decode: false,
        }
    }
}

impl SpatialInrConfig {
    pub fn in_dim(&self, feat_channels: usize) -> usize {
        feat_channels + 2 + if self.cell_decode { 2 } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialInr {
    pub config: SpatialInrConfig,
    pub feat_channels: usize,
    pub net: Siren,
}

impl SpatialInr {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &SpatialInrConfig,
        feat_channels: usize,
        omegas: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let spec = SirenSpec {
            in_dim: config.in_dim(feat_channels),
            hidden: config.hidden.clone(),
            out_dim: config.out_dim,
            first_omega: omegas.0,
            hidden_omega: omegas.1,
        };
        Self {
            config: config.clone(),
            feat_channels,
            net: Siren::new(store, "spatial_inr", &spec, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Features at `coords: [n, 2]` from `grid: [C, h, w]`.
    ///
    /// `cell` is the size of one output pixel in normalized units; it is only
    /// read when cell conditioning is enabled.
    pub fn query(&self, g: &mut Graph<'_>, grid: Var, coords: Var, cell: [f64; 2]) -> Result<Var> {
        if g.shape(grid).first() != Some(&self.feat_channels) {
            return Err(Error::Dimension {
                op: "spatial_inr",
                lhs: g.shape(grid).to_vec(),
                rhs: vec![self.feat_channels, 0, 0],
            });
        }
        if !self.config.local_ensemble {
            return self.query_shifted(g, grid, coords, cell, [0.0, 0.0]);
        }
        let (h, w) = (g.shape(grid)[1] as f64, g.shape(grid)[2] as f64);
        let mut preds = [coords; 4];
        let mut looks = [coords; 4];
        for (k, (vy, vx)) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)].into_iter().enumerate() {
            let shift = [vy / h, vx / w];
            looks[k] = nearest_lookup(g, grid, coords, self.config.scaled_delta, shift)?;
            preds[k] = self.decode(g, looks[k], cell, (h, w))?;
        }
        ensemble_blend(g, preds, looks, self.feat_channels)
    }

    fn query_shifted(
        &self,
        g: &mut Graph<'_>,
        grid: Var,
        coords: Var,
        cell: [f64; 2],
        shift: [f64; 2],
    ) -> Result<Var> {
        let (h, w) = (g.shape(grid)[1] as f64, g.shape(grid)[2] as f64);
        let look = nearest_lookup(g, grid, coords, self.config.scaled_delta, shift)?;
        self.decode(g, look, cell, (h, w))
    }

    fn decode(&self, g: &mut Graph<'_>, look: Var, cell: [f64; 2], (h, w): (f64, f64)) -> Result<Var> {
        let input = if self.config.cell_decode {
            let n = g.shape(look)[0];
            let (sy, sx) = if self.config.scaled_delta {
                (h / 2.0, w / 2.0)
            } else {
                (1.0, 1.0)
            };
            let cells = g.constant(vec![n, 2], [cell[0] * sy, cell[1] * sx].repeat(n));
            g.concat_cols(&[look, cells])?
        } else {
            look
        };
        self.net.forward(g, input)
    }

    /// Inference over an arbitrary coordinate list; `[n × C_s]` row-major.
    pub fn query_values(
        &self,
        store: &ParamStore,
        grid: &FeatureGrid,
        coords: &[[f64; 2]],
        cell: [f64; 2],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(coords.len() * self.out_dim());
        for chunk in coords.chunks(QUERY_CHUNK) {
            let mut g = Graph::inference(store);
            let gv = g.constant(grid.shape().to_vec(), grid.data.clone());
            let cv = g.constant(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect());
            let y = self.query(&mut g, gv, cv, cell)?;
            out.extend_from_slice(g.value(y));
        }
        Ok(out)
    }

    /// Features at every center of an `h × w` lattice.
    pub fn materialize(
        &self,
        store: &ParamStore,
        grid: &FeatureGrid,
        h: usize,
        w: usize,
    ) -> Result<FeatureGrid> {
        if h == 0 || w == 0 {
            return Err(Error::Size(format!("cannot materialize a {h}x{w} lattice")));
        }
        let rows = self.query_values(store, grid, &lattice_centers(h, w), pixel_cell(h, w))?;
        FeatureGrid::from_rows(self.out_dim(), h, w, &rows)
    }
}

/// `Σ_k w_k · preds[k]` with `w_k` the area spanned by the offset of the
/// diagonally opposite lookup, normalized; areas are `|dy·dx| + 1e-9` read
/// from the offset columns of `looks[k]` (after the `c` feature columns).
fn ensemble_blend(g: &mut Graph<'_>, preds: [Var; 4], looks: [Var; 4], c: usize) -> Result<Var> {
    let (n, cols) = g.dims2(preds[0], "ensemble")?;
    let area = |g: &Graph<'_>, k: usize| -> Vec<f64> {
        g.value(looks[k]).chunks_exact(c + 2).map(|r| (r[c] * r[c + 1]).abs() + 1e-9).collect()
    };
    let areas: Vec<Vec<f64>> = (0..4).map(|k| area(g, k)).collect();
    let total: Vec<f64> = (0..n).map(|i| areas.iter().map(|a| a[i]).sum()).collect();
    let mut y = vec![0.0; n * cols];
    for (k, p) in preds.iter().enumerate() {
        let pv = g.value(*p);
        for i in 0..n {
            let wk = areas[3 - k][i] / total[i];
            for j in 0..cols {
                y[i * cols + j] += wk * pv[i * cols + j];
            }
        }
    }
    let mut inputs = preds.to_vec();
    inputs.extend_from_slice(&looks);
    Ok(g.push(
        vec![n, cols],
        y,
        &inputs,
        EnsembleBlend { preds, looks, c, cols, areas, total },
    ))
}

struct EnsembleBlend {
    preds: [Var; 4],
    looks: [Var; 4],
    c: usize,
    cols: usize,
    areas: Vec<Vec<f64>>,
    total: Vec<f64>,
}

impl Op for EnsembleBlend {
    fn name(&self) -> &'static str {
        "ensemble_blend"
    }

    fn backward(&self, values: &Values<'_>, out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (n, cols, c) = (self.total.len(), self.cols, self.c);
        for k in 0..4 {
            if let Some(dp) = grads.slot(self.preds[k]) {
                for i in 0..n {
                    let wk = self.areas[3 - k][i] / self.total[i];
                    for j in 0..cols {
                        dp[i * cols + j] += wk * dy[i * cols + j];
                    }
                }
            }
        }
        if !self.looks.iter().any(|&l| grads.wants(l)) {
            return;
        }
        let yv = values.get(out);
        let dot = |a: &[f64], i: usize| -> f64 { (0..cols).map(|j| a[i * cols + j] * dy[i * cols + j]).sum() };
        for j in 0..4 {
            // area j weights prediction 3 - j and enters every normalizer
            let p = values.get(self.preds[3 - j]);
            let look = values.get(self.looks[j]);
            let Some(dl) = grads.slot(self.looks[j]) else { continue };
            for i in 0..n {
                let da = (dot(p, i) - dot(yv, i)) / self.total[i];
                let r = &look[i * (c + 2)..(i + 1) * (c + 2)];
                let s = (r[c] * r[c + 1]).signum();
                if r[c] * r[c + 1] == 0.0 {
                    continue;
                }
                dl[i * (c + 2) + c] += da * s * r[c + 1];
                dl[i * (c + 2) + c + 1] += da * s * r[c];
            }
        }
    }
}

/// Size of one pixel of an `h × w` lattice in normalized units.
pub fn pixel_cell(h: usize, w: usize) -> [f64; 2] {
    [2.0 / h as f64, 2.0 / w as f64]
}
