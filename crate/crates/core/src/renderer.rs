//! Space-time features, RGB decoding and frame synthesis.
//!
//! Two ways to produce a frame:
//!
//! * per coordinate: every query re-evaluates the spatial field at its
//!   warped position. Training uses this path.
//! * whole frame: the spatial field is materialized once on the output
//!   lattice, the flow field is evaluated on it, and the warped features are
//!   read back by bilinear interpolation of the materialized map.
//!
//! Both agree exactly when every warped coordinate lands on a lattice center.

use crate::error::{Error, Result};
use crate::geometry::{bilinear, bilinear_sample, bilinear_sample_window, nearest_lookup, FeatureGrid, LatticeWindow};
use crate::model::Model;
use crate::numerics::{Graph, Var};
use crate::spatial_inr::{pixel_cell, QUERY_CHUNK};

/// Graph handles of an encoded scene: feature grid and both input frames.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub grid: Var,
    pub i0: Var,
    pub i1: Var,
}

/// Sub-rectangle of the frame as fractions of its height and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    /// Output pixels whose centers fall inside the region.
    pub fn window(&self, h: usize, w: usize) -> Result<LatticeWindow> {
        let span = |a: f64, b: f64, n: usize| -> Option<(usize, usize)> {
            let inside: Vec<usize> = (0..n)
                .filter(|&i| {
                    let c = (i as f64 + 0.5) / n as f64;
                    c >= a && c < b
                })
                .collect();
            Some((*inside.first()?, inside.len()))
        };
        match (span(self.y0, self.y1, h), span(self.x0, self.x1, w)) {
            (Some((top, height)), Some((left, width))) => Ok(LatticeWindow {
                full_h: h,
                full_w: w,
                top,
                left,
                height,
                width,
            }),
            _ => Err(Error::Usage(format!("region {self:?} contains no output pixel"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderRequest {
    pub space_scale: f64,
    pub times: Vec<f64>,
    pub region: Option<Region>,
    /// Permit times outside `[0, 1]`.
    pub allow_extrapolation: bool,
}

impl RenderRequest {
    pub fn new(space_scale: f64, times: Vec<f64>) -> Self {
        Self {
            space_scale,
            times,
            region: None,
            allow_extrapolation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::Usage("no times requested".into()));
        }
        if !(self.space_scale.is_finite() && self.space_scale > 0.0) {
            return Err(Error::Usage(format!("invalid space scale {}", self.space_scale)));
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Usage("times must be sorted ascending".into()));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Usage("times must be finite".into()));
        }
        if !self.allow_extrapolation && self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Usage("times outside [0, 1] need explicit extrapolation".into()));
        }
        if let Some(r) = self.region {
            if !(r.x1 > r.x0 && r.y1 > r.y0) {
                return Err(Error::Usage(format!("region {r:?} has no extent")));
            }
        }
        Ok(())
    }
}

impl Model {
    pub fn scene_vars(&self, g: &mut Graph<'_>, grid: &FeatureGrid, i0: &FeatureGrid, i1: &FeatureGrid) -> SceneVars {
        SceneVars {
            grid: g.constant(grid.shape().to_vec(), grid.data.clone()),
            i0: g.constant(i0.shape().to_vec(), i0.data.clone()),
            i1: g.constant(i1.shape().to_vec(), i1.data.clone()),
        }
    }

    /// Time-independent per-query input: the spatial feature, or in
    /// single-network mode the nearest cell vector and offset.
    pub fn base_features(&self, g: &mut Graph<'_>, scene: SceneVars, coords: Var, cell: [f64; 2]) -> Result<Var> {
        match &self.spatial {
            Some(s) => s.query(g, scene.grid, coords, cell),
            None => {
                let sp = &self.config.spatial;
                let look = nearest_lookup(g, scene.grid, coords, sp.scaled_delta, [0.0, 0.0])?;
                if !sp.cell_decode {
                    return Ok(look);
                }
                let (h, w) = (g.shape(scene.grid)[1] as f64, g.shape(scene.grid)[2] as f64);
                let (sy, sx) = if sp.scaled_delta { (h / 2.0, w / 2.0) } else { (1.0, 1.0) };
                let n = g.shape(look)[0];
                let cells = g.constant(vec![n, 2], [cell[0] * sy, cell[1] * sx].repeat(n));
                g.concat_cols(&[look, cells])
            }
        }
    }

    /// Bilinear samples of the encoded grid and both frames at `coords`.
    pub fn multiscale_features(&self, g: &mut Graph<'_>, scene: SceneVars, coords: Var) -> Result<Var> {
        let z = bilinear(g, scene.grid, coords)?;
        let a = bilinear(g, scene.i0, coords)?;
        let b = bilinear(g, scene.i1, coords)?;
        g.concat_cols(&[z, a, b])
    }

    /// Raw output of the time network for the given base features.
    pub fn time_output(&self, g: &mut Graph<'_>, base: Var, xt: f64) -> Result<Var> {
        self.temporal.forward(g, base, xt)
    }

    /// Space-time feature from base features and (flow-mode) flows.
    pub fn spacetime_from(
        &self,
        g: &mut Graph<'_>,
        scene: SceneVars,
        coords: Var,
        base: Var,
        time_out: Var,
        cell: [f64; 2],
    ) -> Result<Var> {
        let f = self.config.flags;
        if !f.use_flow {
            return if f.single_network {
                Ok(time_out)
            } else {
                g.concat_cols(&[base, time_out])
            };
        }
        let nf = self.config.temporal.num_flows();
        if g.shape(time_out) != [g.shape(coords)[0], 2 * nf] {
            return Err(Error::Dimension {
                op: "flows",
                lhs: g.shape(time_out).to_vec(),
                rhs: vec![g.shape(coords)[0], 2 * nf],
            });
        }
        let mut parts = Vec::with_capacity(4);
        for k in 0..nf {
            let m = g.slice_cols(time_out, 2 * k, 2)?;
            let warped = g.add(coords, m)?;
            match &self.spatial {
                Some(s) => parts.push(s.query(g, scene.grid, warped, cell)?),
                None => {
                    parts.push(bilinear(g, scene.grid, warped)?);
                    if nf == 2 {
                        let frame = if k == 0 { scene.i0 } else { scene.i1 };
                        parts.push(bilinear(g, frame, warped)?);
                    } else {
                        parts.push(bilinear(g, scene.i0, warped)?);
                        parts.push(bilinear(g, scene.i1, warped)?);
                    }
                }
            }
        }
        g.concat_cols(&parts)
    }

    fn decode_from(&self, g: &mut Graph<'_>, st: Var, multiscale: Option<Var>) -> Result<Var> {
        let input = match multiscale {
            Some(ms) => g.concat_cols(&[st, ms])?,
            None => st,
        };
        if g.shape(input)[1] != self.decoder.in_dim() {
            return Err(Error::Config(format!(
                "decoder expects {} inputs, features provide {}",
                self.decoder.in_dim(),
                g.shape(input)[1]
            )));
        }
        self.decoder.forward(g, input)
    }

    /// RGB (unclamped) at `coords` for each time in `xts`; the spatial part
    /// and the multi-scale samples are shared across times.
    pub fn decode_times(
        &self,
        g: &mut Graph<'_>,
        scene: SceneVars,
        coords: Var,
        xts: &[f64],
        cell: [f64; 2],
    ) -> Result<Vec<Var>> {
        let base = self.base_features(g, scene, coords, cell)?;
        let ms = if self.config.flags.use_multiscale {
            Some(self.multiscale_features(g, scene, coords)?)
        } else {
            None
        };
        xts.iter()
            .map(|&xt| {
                let t = self.time_output(g, base, xt)?;
                let st = self.spacetime_from(g, scene, coords, base, t, cell)?;
                self.decode_from(g, st, ms)
            })
            .collect()
    }

    /// RGB at `coords` with the flow network bypassed by `flows: [n, 2·flows]`.
    pub fn decode_with_flows(
        &self,
        g: &mut Graph<'_>,
        scene: SceneVars,
        coords: Var,
        flows: Var,
        cell: [f64; 2],
    ) -> Result<Var> {
        if !self.config.flags.use_flow {
            return Err(Error::Usage("external flows need a flow-based model".into()));
        }
        let base = self.base_features(g, scene, coords, cell)?;
        let ms = if self.config.flags.use_multiscale {
            Some(self.multiscale_features(g, scene, coords)?)
        } else {
            None
        };
        let st = self.spacetime_from(g, scene, coords, base, flows, cell)?;
        self.decode_from(g, st, ms)
    }

    /// Encodes two frames into a feature grid.
    pub fn encode(&self, i0: &FeatureGrid, i1: &FeatureGrid) -> Result<FeatureGrid> {
        self.encoder.encode_grid(&self.params, i0, i1)
    }

    /// Per-coordinate decode; `[n × 3]` row-major, unclamped.
    pub fn decode_rgb(
        &self,
        grid: &FeatureGrid,
        i0: &FeatureGrid,
        i1: &FeatureGrid,
        coords: &[[f64; 2]],
        xt: f64,
        cell: [f64; 2],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(coords.len() * 3);
        for chunk in coords.chunks(QUERY_CHUNK) {
            let mut g = Graph::inference(&self.params);
            let scene = self.scene_vars(&mut g, grid, i0, i1);
            let c = g.constant(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect());
            let y = self.decode_times(&mut g, scene, c, &[xt], cell)?[0];
            out.extend_from_slice(g.value(y));
        }
        Ok(out)
    }

    /// Per-coordinate decode with given flows (`[n × 2·flows]`).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_rgb_with_flows(
        &self,
        grid: &FeatureGrid,
        i0: &FeatureGrid,
        i1: &FeatureGrid,
        coords: &[[f64; 2]],
        flows: &[f64],
        cell: [f64; 2],
    ) -> Result<Vec<f64>> {
        let k = 2 * self.config.temporal.num_flows();
        if flows.len() != coords.len() * k {
            return Err(Error::Dimension {
                op: "decode_rgb_with_flows",
                lhs: vec![flows.len()],
                rhs: vec![coords.len(), k],
            });
        }
        let mut out = Vec::with_capacity(coords.len() * 3);
        for (chunk, fl) in coords.chunks(QUERY_CHUNK).zip(flows.chunks(QUERY_CHUNK * k)) {
            let mut g = Graph::inference(&self.params);
            let scene = self.scene_vars(&mut g, grid, i0, i1);
            let c = g.constant(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect());
            let f = g.constant(vec![chunk.len(), k], fl.to_vec());
            let y = self.decode_with_flows(&mut g, scene, c, f, cell)?;
            out.extend_from_slice(g.value(y));
        }
        Ok(out)
    }

    /// Per-coordinate space-time feature (the decoder input before the
    /// multi-scale part); `[n × width]`.
    pub fn spacetime_feature(&self, grid: &FeatureGrid, coords: &[[f64; 2]], xt: f64, cell: [f64; 2]) -> Result<Vec<f64>> {
        let blank = FeatureGrid::filled(3, grid.height, grid.width, 0.0);
        let mut out = Vec::new();
        for chunk in coords.chunks(QUERY_CHUNK) {
            let mut g = Graph::inference(&self.params);
            let scene = self.scene_vars(&mut g, grid, &blank, &blank);
            let c = g.constant(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect());
            let base = self.base_features(&mut g, scene, c, cell)?;
            let t = self.time_output(&mut g, base, xt)?;
            let st = self.spacetime_from(&mut g, scene, c, base, t, cell)?;
            out.extend_from_slice(g.value(st));
        }
        Ok(out)
    }

    /// Frame at every center of an `h × w` lattice through the per-coordinate
    /// path.
    pub fn synthesize_frame_per_coordinate(
        &self,
        grid: &FeatureGrid,
        i0: &FeatureGrid,
        i1: &FeatureGrid,
        h: usize,
        w: usize,
        xt: f64,
    ) -> Result<FeatureGrid> {
        let win = LatticeWindow::full(h, w);
        let rgb = self.decode_rgb(grid, i0, i1, &win.centers(), xt, pixel_cell(h, w))?;
        FeatureGrid::from_rows(3, h, w, &rgb)
    }

    /// Whole-frame synthesis on an `h × w` output lattice.
    pub fn synthesize_frame(
        &self,
        grid: &FeatureGrid,
        i0: &FeatureGrid,
        i1: &FeatureGrid,
        h: usize,
        w: usize,
        xt: f64,
    ) -> Result<FeatureGrid> {
        if h == 0 || w == 0 {
            return Err(Error::Size(format!("cannot synthesize a {h}x{w} frame")));
        }
        self.synthesize_window(grid, i0, i1, LatticeWindow::full(h, w), xt, None)
    }

    /// Whole-frame synthesis restricted to `window`, optionally with the flow
    /// field replaced by `flow` (`[2·flows × window]`).
    pub fn synthesize_window(
        &self,
        grid: &FeatureGrid,
        i0: &FeatureGrid,
        i1: &FeatureGrid,
        window: LatticeWindow,
        xt: f64,
        flow: Option<&FeatureGrid>,
    ) -> Result<FeatureGrid> {
        let centers = window.centers();
        let n = centers.len();
        let cell = pixel_cell(window.full_h, window.full_w);
        let f = self.config.flags;
        let nf = self.config.temporal.num_flows();
        if flow.is_some() && !f.use_flow {
            return Err(Error::Usage("external flows need a flow-based model".into()));
        }

        let spacetime: Vec<f64> = match (&self.spatial, f.use_flow) {
            (Some(spatial), true) => {
                let s = spatial.query_values(&self.params, grid, &centers, cell)?;
                let flows = match flow {
                    Some(fl) => fl.to_rows(),
                    None => self.temporal.forward_values(&self.params, &s, xt)?,
                };
                check_flow_rows(&flows, n, 2 * nf)?;
                let warped: Vec<Vec<[f64; 2]>> = (0..nf)
                    .map(|k| {
                        centers
                            .iter()
                            .zip(flows.chunks_exact(2 * nf))
                            .map(|(c, m)| [c[0] + m[2 * k], c[1] + m[2 * k + 1]])
                            .collect()
                    })
                    .collect();
                let mut needed = window;
                for wk in &warped {
                    needed = needed.grow_to_taps(wk);
                }
                let (map, map_win) = if needed == window {
                    (FeatureGrid::from_rows(spatial.out_dim(), window.height, window.width, &s)?, window)
                } else {
                    let rows = spatial.query_values(&self.params, grid, &needed.centers(), cell)?;
                    (FeatureGrid::from_rows(spatial.out_dim(), needed.height, needed.width, &rows)?, needed)
                };
                let sampled = warped
                    .iter()
                    .map(|wk| bilinear_sample_window(&map, &map_win, wk))
                    .collect::<Result<Vec<_>>>()?;
                interleave(&sampled, n)
            }
            _ => {
                // no materialized field to warp: the per-coordinate graph is
                // already the whole-frame computation
                let mut out = Vec::new();
                for (ci, chunk) in centers.chunks(QUERY_CHUNK).enumerate() {
                    let mut g = Graph::inference(&self.params);
                    let scene = self.scene_vars(&mut g, grid, i0, i1);
                    let c = g.constant(vec![chunk.len(), 2], chunk.iter().flatten().copied().collect());
                    let base = self.base_features(&mut g, scene, c, cell)?;
                    let t = match flow {
                        Some(fl) => {
                            let rows = fl.to_rows();
                            check_flow_rows(&rows, n, 2 * nf)?;
                            let k = 2 * nf;
                            let start = ci * QUERY_CHUNK * k;
                            g.constant(vec![chunk.len(), k], rows[start..start + chunk.len() * k].to_vec())
                        }
                        None => self.time_output(&mut g, base, xt)?,
                    };
                    let st = self.spacetime_from(&mut g, scene, c, base, t, cell)?;
                    out.extend_from_slice(g.value(st));
                }
                out
            }
        };

        let ms = if f.use_multiscale {
            Some(interleave(
                &[
                    bilinear_sample(grid, &centers),
                    bilinear_sample(i0, &centers),
                    bilinear_sample(i1, &centers),
                ],
                n,
            ))
        } else {
            None
        };
        let st_w = spacetime.len() / n.max(1);
        let mut rgb = Vec::with_capacity(n * 3);
        for start in (0..n).step_by(QUERY_CHUNK) {
            let rows = QUERY_CHUNK.min(n - start);
            let mut g = Graph::inference(&self.params);
            let st = g.constant(vec![rows, st_w], spacetime[start * st_w..(start + rows) * st_w].to_vec());
            let msv = ms.as_ref().map(|m| {
                let k = m.len() / n;
                g.constant(vec![rows, k], m[start * k..(start + rows) * k].to_vec())
            });
            let y = self.decode_from(&mut g, st, msv)?;
            rgb.extend_from_slice(g.value(y));
        }
        FeatureGrid::from_rows(3, window.height, window.width, &rgb)
    }

    /// Encodes the two frames once and synthesizes one frame per time.
    pub fn render_video(&self, i0: &FeatureGrid, i1: &FeatureGrid, req: &RenderRequest) -> Result<Vec<FeatureGrid>> {
        req.validate()?;
        let grid = self.encode(i0, i1)?;
        let h = (i0.height as f64 * req.space_scale).round() as usize;
        let w = (i0.width as f64 * req.space_scale).round() as usize;
        if h == 0 || w == 0 {
            return Err(Error::Size(format!("scale {} gives an empty frame", req.space_scale)));
        }
        let window = match req.region {
            Some(r) => r.window(h, w)?,
            None => LatticeWindow::full(h, w),
        };
        req.times
            .iter()
            .map(|&t| self.synthesize_window(&grid, i0, i1, window, t, None))
            .collect()
    }
}

fn check_flow_rows(flows: &[f64], n: usize, k: usize) -> Result<()> {
    if flows.len() != n * k {
        return Err(Error::Dimension {
            op: "flow field",
            lhs: vec![flows.len()],
            rhs: vec![n, k],
        });
    }
    Ok(())
}

/// Row-wise concatenation of `n`-row blocks.
fn interleave(parts: &[Vec<f64>], n: usize) -> Vec<f64> {
    let widths: Vec<usize> = parts.iter().map(|p| p.len() / n.max(1)).collect();
    let mut out = Vec::with_capacity(parts.iter().map(Vec::len).sum());
    for i in 0..n {
        for (p, &k) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p[i * k..(i + 1) * k]);
        }
    }
    out
}

/// Clamps to `[0, 1]` and quantizes to 8 bits, interleaved RGB.
pub fn to_rgb8(img: &FeatureGrid) -> Vec<u8> {
    let plane = img.plane();
    let mut out = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push((img.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// File name of the `index`-th rendered frame at time `t`.
pub fn frame_file_name(index: usize, t: f64, ext: &str) -> String {
    format!("frame_{index:04}_t{t:.4}.{ext}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::lattice_centers;
    use crate::gradcheck::{check, FdOptions, Leaf};
    use crate::model::{AblationFlags, ModelConfig};
    use crate::numerics::{charbonnier_loss, CHARBONNIER_EPS};
    use rand::{Rng, SeedableRng};

    fn frame(h: usize, w: usize, seed: u64) -> FeatureGrid {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::new(3, h, w, (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn micro(flags: AblationFlags, dual: bool) -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.feat_channels = 3;
        cfg.encoder.num_blocks = 1;
        cfg.spatial.hidden = vec![6];
        cfg.spatial.out_dim = 3;
        cfg.temporal.hidden = vec![6];
        cfg.temporal.dual_flow = dual;
        cfg.temporal.output_init_scale = 0.1;
        cfg.decoder.hidden = vec![6];
        cfg.flags = flags;
        cfg
    }

    fn scene(model: &Model, h: usize, w: usize) -> (FeatureGrid, FeatureGrid, FeatureGrid) {
        let (a, b) = (frame(h, w, 1), frame(h, w, 2));
        (model.encode(&a, &b).unwrap(), a, b)
    }

    fn zero_prefix(model: &mut Model, prefix: &str) {
        let ids: Vec<_> = model.params.ids().filter(|&id| model.params.name(id).starts_with(prefix)).collect();
        for id in ids {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_flow_network_duplicates_the_spatial_feature() {
        let mut model = Model::new(&ModelConfig::tiny(), 3).unwrap();
        zero_prefix(&mut model, "temporal_inr");
        let (grid, _, _) = scene(&model, 6, 6);
        let coords = [[0.1, 0.2], [-0.7, 0.4]];
        let st = model.spacetime_feature(&grid, &coords, 0.3, [0.1, 0.1]).unwrap();
        let fs = model.spatial.as_ref().unwrap().query_values(&model.params, &grid, &coords, [0.1, 0.1]).unwrap();
        for (row, f) in st.chunks(32).zip(fs.chunks(16)) {
            assert_eq!(&row[..16], f);
            assert_eq!(&row[16..], f);
        }
    }

    #[test]
    fn warped_branch_on_a_center_equals_the_query_there() {
        let model = Model::new(&micro(AblationFlags::default(), true), 4).unwrap();
        let (grid, a, b) = scene(&model, 4, 4);
        let spatial = model.spatial.as_ref().unwrap();
        let src = [[-0.75, -0.25]];
        let dst = [0.25, 0.75];
        let flows = [dst[0] - src[0][0], dst[1] - src[0][1], 0.0, 0.0];
        let mut g = Graph::inference(&model.params);
        let sc = model.scene_vars(&mut g, &grid, &a, &b);
        let c = g.constant(vec![1, 2], src[0].to_vec());
        let f = g.constant(vec![1, 4], flows.to_vec());
        let base = model.base_features(&mut g, sc, c, [0.5, 0.5]).unwrap();
        let st = model.spacetime_from(&mut g, sc, c, base, f, [0.5, 0.5]).unwrap();
        let direct = spatial.query_values(&model.params, &grid, &[dst], [0.5, 0.5]).unwrap();
        assert_eq!(&g.value(st)[..3], &direct[..]);
    }

    #[test]
    fn constant_decoder_output() {
        let mut model = Model::new(&ModelConfig::tiny(), 5).unwrap();
        zero_prefix(&mut model, "decoder");
        let last = model.decoder.output_layer().bias;
        model.params.get_mut(last).data_mut().fill(0.5);
        let (grid, a, b) = scene(&model, 5, 5);
        let img = model.synthesize_frame(&grid, &a, &b, 7, 9, 0.4).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn whole_frame_shape() {
        let model = Model::new(&ModelConfig::tiny(), 6).unwrap();
        let (grid, a, b) = scene(&model, 6, 5);
        let img = model.synthesize_frame(&grid, &a, &b, 12, 10, 0.5).unwrap();
        assert_eq!(img.shape(), [3, 12, 10]);
    }

    /// Flow sending pixel (i, j) to the center of `target(i, j)`.
    fn lattice_flow(h: usize, w: usize, targets: &[fn(usize, usize, usize, usize) -> (usize, usize)]) -> FeatureGrid {
        let centers = lattice_centers(h, w);
        let mut rows = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let src = centers[i * w + j];
                for t in targets {
                    let (ti, tj) = t(i, j, h, w);
                    let dst = centers[ti * w + tj];
                    rows.extend_from_slice(&[dst[0] - src[0], dst[1] - src[1]]);
                }
            }
        }
        FeatureGrid::from_rows(2 * targets.len(), h, w, &rows).unwrap()
    }

    #[test]
    fn paths_agree_exactly_under_lattice_aligned_flows() {
        let mirror: fn(usize, usize, usize, usize) -> (usize, usize) = |i, j, h, w| (h - 1 - i, w - 1 - j);
        let flip: fn(usize, usize, usize, usize) -> (usize, usize) = |i, j, _, w| (i, w - 1 - j);
        for (flags, dual) in [
            (AblationFlags::default(), true),
            (AblationFlags::default(), false),
            (AblationFlags { single_network: true, ..AblationFlags::default() }, true),
            (AblationFlags { use_multiscale: false, ..AblationFlags::default() }, true),
        ] {
            let mut cfg = ModelConfig::tiny();
            cfg.flags = flags;
            cfg.temporal.dual_flow = dual;
            let model = Model::new(&cfg, 7).unwrap();
            let (grid, a, b) = scene(&model, 4, 4);
            let (h, w) = (8, 8);
            let targets = if dual { vec![mirror, flip] } else { vec![mirror] };
            let flow = lattice_flow(h, w, &targets);
            let whole = model.synthesize_window(&grid, &a, &b, LatticeWindow::full(h, w), 0.5, Some(&flow)).unwrap();
            let per = model
                .decode_rgb_with_flows(&grid, &a, &b, &lattice_centers(h, w), &flow.to_rows(), pixel_cell(h, w))
                .unwrap();
            let per = FeatureGrid::from_rows(3, h, w, &per).unwrap();
            let worst = whole.data.iter().zip(&per.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-12, "{flags:?} dual={dual}: {worst}");
        }
    }

    #[test]
    fn flowless_variant_paths_are_identical() {
        let mut cfg = ModelConfig::tiny();
        cfg.flags.use_flow = false;
        let model = Model::new(&cfg, 8).unwrap();
        let (grid, a, b) = scene(&model, 5, 5);
        let whole = model.synthesize_frame(&grid, &a, &b, 10, 10, 0.3).unwrap();
        let per = model.synthesize_frame_per_coordinate(&grid, &a, &b, 10, 10, 0.3).unwrap();
        assert_eq!(whole, per);
    }

    #[test]
    fn render_video_contract_and_region_locality() {
        let model = Model::new(&ModelConfig::tiny(), 9).unwrap();
        let (a, b) = (frame(6, 6, 3), frame(6, 6, 4));
        let frames = model.render_video(&a, &b, &RenderRequest::new(4.0, vec![0.0, 0.5, 1.0])).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.shape() == [3, 24, 24]));

        let full = model.render_video(&a, &b, &RenderRequest::new(2.0, vec![0.1, 0.15, 0.9])).unwrap();
        for (region, (top, left, h, w)) in [
            (Region { x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 }, (0, 0, 12, 6)),
            (Region { x0: 0.0, y0: 0.0, x1: 0.5, y1: 0.5 }, (0, 0, 6, 6)),
            (Region { x0: 0.3, y0: 0.6, x1: 0.9, y1: 1.0 }, (7, 4, 5, 7)),
        ] {
            let mut req = RenderRequest::new(2.0, vec![0.1, 0.15, 0.9]);
            req.region = Some(region);
            let part = model.render_video(&a, &b, &req).unwrap();
            for (p, f) in part.iter().zip(&full) {
                assert_eq!(p.shape(), [3, h, w]);
                let crop = f.crop(top, left, h, w).unwrap();
                let worst = p.data.iter().zip(&crop.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(worst < 1e-6, "{region:?}: {worst}");
            }
        }
    }

    #[test]
    fn invalid_requests() {
        let model = Model::new(&ModelConfig::tiny(), 9).unwrap();
        let (a, b) = (frame(4, 4, 3), frame(4, 4, 4));
        let err = model.render_video(&a, &b, &RenderRequest::new(2.0, vec![])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(model.render_video(&a, &b, &RenderRequest::new(2.0, vec![0.5, 0.2])).is_err());
        assert!(model.render_video(&a, &b, &RenderRequest::new(2.0, vec![1.5])).is_err());
        let mut req = RenderRequest::new(2.0, vec![1.5]);
        req.allow_extrapolation = true;
        assert!(model.render_video(&a, &b, &req).is_ok());
    }

    fn fd_decode(flags: AblationFlags, dual: bool) {
        let model = Model::new(&micro(flags, dual), 21).unwrap();
        let (a, b) = (frame(4, 4, 11), frame(4, 4, 12));
        let coords: Vec<f64> = vec![0.13, -0.41, -0.66, 0.72, 0.38, 0.27];
        let target: Vec<f64> = frame(1, 3, 13).data;
        let stacked = crate::encoder::stack_frames(&a, &b).unwrap();
        let leaves = [Leaf::new("frames", vec![6, 4, 4], stacked.data.clone())];
        let opts = FdOptions { max_entries: 6, ..FdOptions::default() };
        let res = check("decode_rgb", &model.params, &leaves, &opts, |g, v| {
            let grid = model.encoder.forward(g, v[0])?;
            let i0 = g.constant(vec![3, 4, 4], a.data.clone());
            let i1 = g.constant(vec![3, 4, 4], b.data.clone());
            let sc = SceneVars { grid, i0, i1 };
            let c = g.constant(vec![3, 2], coords.clone());
            let y = model.decode_times(g, sc, c, &[0.35], [0.5, 0.5])?[0];
            let t = g.constant(vec![3, 3], target.clone());
            charbonnier_loss(g, y, t, CHARBONNIER_EPS)
        })
        .unwrap();
        for r in res {
            assert!(r.rel_error < 1e-4, "{flags:?}: {r:?}");
        }
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        for tag in ["full", "f", "m", "s", "f+s"] {
            fd_decode(AblationFlags::from_variant(tag).unwrap(), true);
        }
        fd_decode(AblationFlags::default(), false);
    }
}
