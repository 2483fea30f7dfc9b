//! Clips, degradation, and training-batch sampling.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::geometry::{bicubic_resize, FeatureGrid};
use crate::image_io::{read_image, ImageFormat};

/// Side of the low-resolution training patch.
pub const LR_PATCH: usize = 32;
/// Frames per training window; the first and last are the inputs.
pub const WINDOW: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<FeatureGrid>,
    pub frame_rate_tag: Option<String>,
}

impl VideoClip {
    pub fn new(frames: Vec<FeatureGrid>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Data(format!("a clip needs at least 2 frames, got {}", frames.len())));
        }
        let shape = frames[0].shape();
        if shape[0] != 3 || frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::Data("clip frames must be RGB with identical dims".into()));
        }
        Ok(Self {
            frames,
            frame_rate_tag: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    pub fn window(&self, w: &FrameWindow) -> &[FeatureGrid] {
        &self.frames[w.start..w.start + w.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    MovingSquare,
    TwoSquares,
    SinusoidTexture,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_square" => Ok(Self::MovingSquare),
            "two_squares" => Ok(Self::TwoSquares),
            "sinusoid_texture" => Ok(Self::SinusoidTexture),
            _ => Err(Error::Usage(format!("unknown synthetic clip `{s}`"))),
        }
    }
}

/// Axis-aligned square in frame fractions, translating at constant speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Square {
    /// Center `[y, x]` at frame 0.
    pub p0: [f64; 2],
    /// Displacement per frame.
    pub velocity: [f64; 2],
    pub side: f64,
    pub color: [f64; 3],
}

impl Square {
    pub fn center(&self, t: f64) -> [f64; 2] {
        [self.p0[0] + t * self.velocity[0], self.p0[1] + t * self.velocity[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scene {
    /// Squares drawn in order over a flat background.
    Squares { background: [f64; 3], squares: Vec<Square> },
    /// `0.5 + amp·sin(2π(f·(p − v t)) + phase_c)` per channel.
    Sinusoid {
        freq: [f64; 2],
        velocity: [f64; 2],
        amplitude: f64,
        phase: [f64; 3],
    },
}

/// Length of `[a0, a1] ∩ [b0, b1]`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

impl Scene {
    /// Deterministic scene of the given kind.
    pub fn synthetic(kind: SyntheticKind, length: usize, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let span = (length.max(2) - 1) as f64;
        let color = |rng: &mut rand_chacha::ChaCha8Rng| [rng.gen_range(0.55..0.95), rng.gen_range(0.55..0.95), rng.gen_range(0.55..0.95)];
        match kind {
            SyntheticKind::MovingSquare => {
                // one high-res pixel (of 64) per frame, random direction
                let speed = 1.0 / 64.0;
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let velocity = [speed * angle.sin(), speed * angle.cos()];
                let side = 0.25;
                let p0 = start_point(side, velocity, span, &mut rng);
                let c = color(&mut rng);
                Scene::Squares {
                    background: [0.1, 0.12, 0.15],
                    squares: vec![Square { p0, velocity, side, color: c }],
                }
            }
            SyntheticKind::TwoSquares => {
                let speed = 3.0 / 64.0;
                let mut squares = Vec::new();
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for k in 0..2 {
                    let a = angle + k as f64 * std::f64::consts::PI * rng.gen_range(0.6..1.4);
                    let velocity = [speed * a.sin(), speed * a.cos()];
                    let side = [0.22, 0.16][k];
                    let p0 = start_point(side, velocity, span, &mut rng);
                    squares.push(Square { p0, velocity, side, color: color(&mut rng) });
                }
                squares[1].color = [squares[0].color[2], 0.3, squares[0].color[0]];
                Scene::Squares {
                    background: [0.08, 0.1, 0.12],
                    squares,
                }
            }
            SyntheticKind::SinusoidTexture => Scene::Sinusoid {
                freq: [rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0)],
                velocity: [rng.gen_range(-1.0..1.0) / 64.0, rng.gen_range(-1.0..1.0) / 64.0],
                amplitude: 0.3,
                phase: [0.0, 2.0, 4.0],
            },
        }
    }

    /// Exact area-averaged rendering at time `t` (in frames) on an `h × w`
    /// pixel lattice covering the unit square.
    pub fn render(&self, t: f64, h: usize, w: usize) -> FeatureGrid {
        let mut img = FeatureGrid::filled(3, h, w, 0.0);
        let (ph, pw) = (1.0 / h as f64, 1.0 / w as f64);
        match self {
            Scene::Squares { background, squares } => {
                for c in 0..3 {
                    img.data[c * h * w..(c + 1) * h * w].fill(background[c]);
                }
                for sq in squares {
                    let ctr = sq.center(t);
                    let half = sq.side / 2.0;
                    for i in 0..h {
                        let cy = overlap(i as f64 * ph, (i + 1) as f64 * ph, ctr[0] - half, ctr[0] + half) / ph;
                        if cy == 0.0 {
                            continue;
                        }
                        for j in 0..w {
                            let cx = overlap(j as f64 * pw, (j + 1) as f64 * pw, ctr[1] - half, ctr[1] + half) / pw;
                            let cov = cy * cx;
                            if cov == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                let v = img.get(c, i, j);
                                img.set(c, i, j, v + cov * (sq.color[c] - v));
                            }
                        }
                    }
                }
            }
            Scene::Sinusoid { freq, velocity, amplitude, phase } => {
                let (ay, ax) = (std::f64::consts::TAU * freq[0], std::f64::consts::TAU * freq[1]);
                let damp = sinc(ay * ph / 2.0) * sinc(ax * pw / 2.0);
                for i in 0..h {
                    let y = (i as f64 + 0.5) * ph - velocity[0] * t;
                    for j in 0..w {
                        let x = (j as f64 + 0.5) * pw - velocity[1] * t;
                        for c in 0..3 {
                            img.set(c, i, j, 0.5 + amplitude * damp * (ay * y + ax * x + phase[c]).sin());
                        }
                    }
                }
            }
        }
        img
    }
}

/// Start center keeping a square of `side` fully inside over `span` frames.
fn start_point<R: Rng>(side: f64, v: [f64; 2], span: f64, rng: &mut R) -> [f64; 2] {
    let mut p = [0.0; 2];
    for a in 0..2 {
        let travel = v[a] * span;
        let lo = side / 2.0 + 0.02 - travel.min(0.0);
        let hi = 1.0 - side / 2.0 - 0.02 - travel.max(0.0);
        p[a] = if hi > lo { rng.gen_range(lo..hi) } else { 0.5 - travel / 2.0 };
    }
    p
}

/// Deterministic synthetic clip of `length` frames at `h × w`.
pub fn make_synthetic_clip(kind: SyntheticKind, length: usize, h: usize, w: usize, seed: u64) -> Result<VideoClip> {
    if length < 2 || h == 0 || w == 0 {
        return Err(Error::Data(format!("invalid synthetic clip {length} frames of {h}x{w}")));
    }
    let scene = Scene::synthetic(kind, length, seed);
    let mut clip = VideoClip::new((0..length).map(|k| scene.render(k as f64, h, w)).collect())?;
    clip.frame_rate_tag = Some(format!("synthetic:{kind:?}:seed{seed}"));
    Ok(clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameWindow {
    pub start: usize,
    pub len: usize,
}

/// Windows `[i, i + window)` for `i = 0, stride, 2·stride, …`.
pub fn sliding_windows(clip: &VideoClip, window: usize, stride: usize) -> Result<Vec<FrameWindow>> {
    if window < 2 || stride == 0 {
        return Err(Error::Data(format!("invalid window {window} / stride {stride}")));
    }
    if clip.len() < window {
        return Err(Error::Data(format!(
            "clip of {} frames is shorter than the {window}-frame window",
            clip.len()
        )));
    }
    Ok((0..=clip.len() - window)
        .step_by(stride)
        .map(|start| FrameWindow { start, len: window })
        .collect())
}

/// Bicubic downsampling by `1/scale`.
pub fn degrade(frame: &FeatureGrid, scale: f64) -> Result<FeatureGrid> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::Data(format!("degradation scale must be >= 1, got {scale}")));
    }
    bicubic_resize(frame, 1.0 / scale).map_err(|e| Error::Data(e.to_string()))
}

/// Window positions that may serve as supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPool {
    /// Interior frames 1..=7.
    Interior,
    /// Frames 1..=6.
    FirstSix,
    /// Frames 0, 4 and 8 only (mid-time-only training).
    Fixed,
    /// Every frame, inputs included.
    All,
}

impl TargetPool {
    pub fn positions(self, window: usize) -> Vec<usize> {
        match self {
            TargetPool::Interior => (1..window - 1).collect(),
            TargetPool::FirstSix => (1..window.min(8) - 1).collect(),
            TargetPool::Fixed => vec![0, (window - 1) / 2, window - 1],
            TargetPool::All => (0..window).collect(),
        }
    }
}

impl std::str::FromStr for TargetPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interior" => Ok(Self::Interior),
            "first_six" => Ok(Self::FirstSix),
            "fixed" => Ok(Self::Fixed),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown target pool `{s}`"))),
        }
    }
}

impl std::fmt::Display for TargetPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetPool::Interior => "interior",
            TargetPool::FirstSix => "first_six",
            TargetPool::Fixed => "fixed",
            TargetPool::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingOptions {
    pub stage1_scale: f64,
    pub stage2_scale: (f64, f64),
    pub pool: TargetPool,
    pub targets: usize,
    pub augment: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            stage1_scale: 4.0,
            stage2_scale: (1.0, 4.0),
            pool: TargetPool::Interior,
            targets: 3,
            augment: true,
        }
    }
}

/// Quarter-turn rotation count and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl Augment {
    /// Flip (if any) then rotate counter-clockwise.
    pub fn apply(&self, img: &FeatureGrid) -> FeatureGrid {
        let mut out = if self.hflip { hflip(img) } else { img.clone() };
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out);
        }
        out
    }

    pub fn invert(&self, img: &FeatureGrid) -> FeatureGrid {
        let mut out = img.clone();
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            out = rot90(&out);
        }
        if self.hflip {
            hflip(&out)
        } else {
            out
        }
    }
}

fn hflip(img: &FeatureGrid) -> FeatureGrid {
    let mut out = img.clone();
    for c in 0..img.channels {
        for i in 0..img.height {
            for j in 0..img.width {
                out.set(c, i, j, img.get(c, i, img.width - 1 - j));
            }
        }
    }
    out
}

/// Counter-clockwise quarter turn; `h × w` becomes `w × h`.
fn rot90(img: &FeatureGrid) -> FeatureGrid {
    let (h, w) = (img.height, img.width);
    let mut out = FeatureGrid::filled(img.channels, w, h, 0.0);
    for c in 0..img.channels {
        for i in 0..h {
            for j in 0..w {
                out.set(c, w - 1 - j, i, img.get(c, i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub lr0: FeatureGrid,
    pub lr1: FeatureGrid,
    /// `(xt, high-res patch)` pairs.
    pub targets: Vec<(f64, FeatureGrid)>,
    pub scale: f64,
    /// Low-res crop origin `(row, col)`.
    pub crop_origin: (usize, usize),
    /// High-res crop origin `(row, col)`.
    pub hr_origin: (usize, usize),
    pub window_start: usize,
    pub augment: Augment,
}

/// Degradation scale for a batch.
pub fn draw_scale<R: Rng + ?Sized>(stage: u8, opts: &SamplingOptions, rng: &mut R) -> f64 {
    if stage == 1 {
        opts.stage1_scale
    } else {
        let (lo, hi) = opts.stage2_scale;
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    }
}

/// Assembles `batch` samples sharing one scale.
pub fn sample_training_batch<R: Rng + ?Sized>(
    clip: &VideoClip,
    windows: &[FrameWindow],
    stage: u8,
    batch: usize,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let scale = draw_scale(stage, opts, rng);
    (0..batch).map(|_| sample_one(clip, windows, scale, opts, rng)).collect()
}

fn sample_one<R: Rng + ?Sized>(
    clip: &VideoClip,
    windows: &[FrameWindow],
    scale: f64,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<TrainingSample> {
    let win = windows[rng.gen_range(0..windows.len())];
    let frames = clip.window(&win);
    let (h, w) = clip.dims();
    let hr = (LR_PATCH as f64 * scale).round() as usize;
    if hr > h || hr > w {
        return Err(Error::Data(format!(
            "{h}x{w} frames are too small for a {LR_PATCH}px patch at scale {scale:.3}"
        )));
    }
    // origin on the low-res lattice, mapped to the nearest high-res pixel
    let lr_rows = ((h as f64 / scale).floor() as usize).max(LR_PATCH);
    let lr_cols = ((w as f64 / scale).floor() as usize).max(LR_PATCH);
    let oy = rng.gen_range(0..=lr_rows - LR_PATCH);
    let ox = rng.gen_range(0..=lr_cols - LR_PATCH);
    let hy = ((oy as f64 * scale).round() as usize).min(h - hr);
    let hx = ((ox as f64 * scale).round() as usize).min(w - hr);
    let down = LR_PATCH as f64 / hr as f64;

    let pool = opts.pool.positions(win.len);
    let k = opts.targets.min(pool.len());
    let mut picks: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picks.sort_unstable();

    let aug = if opts.augment {
        Augment {
            quarter_turns: rng.gen_range(0..4),
            hflip: rng.gen_bool(0.5),
        }
    } else {
        Augment::default()
    };
    let lr = |f: &FeatureGrid| -> Result<FeatureGrid> {
        let crop = f.crop(hy, hx, hr, hr)?;
        Ok(aug.apply(&bicubic_resize(&crop, down)?))
    };
    let targets = picks
        .iter()
        .map(|&p| {
            let xt = p as f64 / (win.len - 1) as f64;
            Ok((xt, aug.apply(&frames[p].crop(hy, hx, hr, hr)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSample {
        lr0: lr(&frames[0])?,
        lr1: lr(&frames[win.len - 1])?,
        targets,
        scale,
        crop_origin: (oy, ox),
        hr_origin: (hy, hx),
        window_start: win.start,
        augment: aug,
    })
}

/// Loads every `.png`/`.ppm` in `dir`, in lexicographic order.
pub fn load_frame_dir(dir: &Path) -> Result<VideoClip> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut paths: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            reason: "no .png or .ppm frames".into(),
        });
    }
    let mut frames: Vec<FeatureGrid> = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_image(p)?;
        if let Some(first) = frames.first() {
            if first.shape() != f.shape() {
                return Err(Error::Ingestion {
                    path: p.clone(),
                    reason: format!("dims {:?} differ from first frame {:?}", f.shape(), first.shape()),
                });
            }
        }
        frames.push(f);
    }
    if frames.len() < 2 {
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            reason: "a clip needs at least 2 frames".into(),
        });
    }
    let mut clip = VideoClip::new(frames)?;
    clip.frame_rate_tag = Some(dir.display().to_string());
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{write_image, ImageFormat};
    use proptest::prelude::*;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn moving_square_follows_linear_motion() {
        let scene = Scene::synthetic(SyntheticKind::MovingSquare, 9, 3);
        let Scene::Squares { squares, .. } = &scene else { panic!() };
        let sq = squares[0];
        for k in 0..9 {
            let c = sq.center(k as f64);
            assert_eq!(c, [sq.p0[0] + k as f64 * sq.velocity[0], sq.p0[1] + k as f64 * sq.velocity[1]]);
            assert!(c[0] - sq.side / 2.0 > 0.0 && c[0] + sq.side / 2.0 < 1.0);
        }
        let clip = make_synthetic_clip(SyntheticKind::MovingSquare, 9, 64, 64, 3).unwrap();
        assert_eq!(clip.frames[4], scene.render(4.0, 64, 64));
        // the analytic mid-time of the window is frame 4
        assert_eq!(scene.render(0.5 * 8.0, 64, 64), clip.frames[4]);
    }

    #[test]
    fn synthetic_clips_are_deterministic() {
        for kind in [SyntheticKind::MovingSquare, SyntheticKind::TwoSquares, SyntheticKind::SinusoidTexture] {
            let a = make_synthetic_clip(kind, 9, 16, 20, 5).unwrap();
            let b = make_synthetic_clip(kind, 9, 16, 20, 5).unwrap();
            assert_eq!(a, b);
            assert!(a.frames.iter().flat_map(|f| &f.data).all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(
            make_synthetic_clip(SyntheticKind::MovingSquare, 9, 16, 16, 1).unwrap(),
            make_synthetic_clip(SyntheticKind::MovingSquare, 9, 16, 16, 2).unwrap()
        );
    }

    #[test]
    fn box_rendering_preserves_area() {
        // a square's coverage sums to its area at any resolution
        let sq = Square { p0: [0.4, 0.55], velocity: [0.0, 0.0], side: 0.3, color: [1.0; 3] };
        let scene = Scene::Squares { background: [0.0; 3], squares: vec![sq] };
        for n in [7, 16, 33] {
            let img = scene.render(0.0, n, n);
            let mass: f64 = img.data[..n * n].iter().sum::<f64>() / (n * n) as f64;
            assert!((mass - 0.09).abs() < 1e-12);
        }
        // sinusoid box average vs fine supersampling
        let tex = Scene::synthetic(SyntheticKind::SinusoidTexture, 9, 1);
        let coarse = tex.render(2.0, 8, 8);
        let fine = tex.render(2.0, 256, 256);
        let down = crate::geometry::FeatureGrid::new(
            3,
            8,
            8,
            (0..3 * 64)
                .map(|p| {
                    let (c, i, j) = (p / 64, p / 8 % 8, p % 8);
                    let mut s = 0.0;
                    for a in 0..32 {
                        for b in 0..32 {
                            s += fine.get(c, i * 32 + a, j * 32 + b);
                        }
                    }
                    s / 1024.0
                })
                .collect(),
        )
        .unwrap();
        for (x, y) in coarse.data.iter().zip(&down.data) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn window_counts() {
        let clip = |n| VideoClip::new(vec![FeatureGrid::filled(3, 1, 1, 0.0); n]).unwrap();
        assert_eq!(sliding_windows(&clip(9), 9, 1).unwrap().len(), 1);
        assert_eq!(sliding_windows(&clip(10), 9, 1).unwrap().len(), 2);
        assert_eq!(sliding_windows(&clip(3000), 9, 9).unwrap().len(), (3000 - 9) / 9 + 1);
        assert_eq!(sliding_windows(&clip(3000), 9, 9).unwrap().len(), 333);
        assert!(matches!(sliding_windows(&clip(8), 9, 1), Err(Error::Data(_))));
    }

    #[test]
    fn degrade_contract() {
        let f = make_synthetic_clip(SyntheticKind::SinusoidTexture, 2, 12, 12, 0).unwrap().frames[0].clone();
        assert_eq!(degrade(&f, 1.0).unwrap(), f);
        let c = FeatureGrid::filled(3, 20, 20, 0.3);
        assert!(degrade(&c, 2.5).unwrap().data.iter().all(|v| (v - 0.3).abs() < 1e-14));
        let ramp = FeatureGrid::new(3, 32, 32, (0..3 * 1024).map(|p| (p % 32) as f64 / 31.0).collect()).unwrap();
        assert_eq!(degrade(&ramp, 4.0).unwrap().shape(), [3, 8, 8]);
        assert!(degrade(&f, 0.5).is_err());
        assert!(matches!(degrade(&f, 100.0), Err(Error::Data(_))));
    }

    fn clip128() -> VideoClip {
        make_synthetic_clip(SyntheticKind::TwoSquares, 11, 128, 128, 4).unwrap()
    }

    #[test]
    fn stage_one_uses_the_fixed_scale() {
        let clip = clip128();
        let windows = sliding_windows(&clip, WINDOW, 1).unwrap();
        let batch = sample_training_batch(&clip, &windows, 1, 3, &SamplingOptions::default(), &mut rng(1)).unwrap();
        for s in &batch {
            assert_eq!(s.scale, 4.0);
            assert_eq!(s.lr0.shape(), [3, 32, 32]);
            assert_eq!(s.targets.len(), 3);
            for (xt, patch) in &s.targets {
                assert_eq!(patch.shape(), [3, 128, 128]);
                assert!(*xt > 0.0 && *xt < 1.0);
                assert_eq!((xt * 8.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn stage_two_scales_are_uniform_and_shared() {
        let opts = SamplingOptions::default();
        let mut r = rng(2);
        let n = 10_000;
        let mean = (0..n).map(|_| draw_scale(2, &opts, &mut r)).sum::<f64>() / n as f64;
        assert!((2.35..=2.65).contains(&mean), "{mean}");
        let clip = clip128();
        let windows = sliding_windows(&clip, WINDOW, 1).unwrap();
        for seed in 0..5 {
            let batch = sample_training_batch(&clip, &windows, 2, 4, &opts, &mut rng(seed)).unwrap();
            assert!(batch.iter().all(|s| s.scale == batch[0].scale));
            let hr = (32.0 * batch[0].scale).round() as usize;
            assert!(batch.iter().all(|s| s.targets[0].1.height == hr && s.lr1.height == 32));
        }
    }

    #[test]
    fn sampling_is_deterministic_under_a_seed() {
        let clip = clip128();
        let windows = sliding_windows(&clip, WINDOW, 1).unwrap();
        let a = sample_training_batch(&clip, &windows, 2, 2, &SamplingOptions::default(), &mut rng(9)).unwrap();
        let b = sample_training_batch(&clip, &windows, 2, 2, &SamplingOptions::default(), &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hr_crop_aligns_with_lr_crop() {
        let clip = clip128();
        let windows = sliding_windows(&clip, WINDOW, 1).unwrap();
        let opts = SamplingOptions { augment: false, ..SamplingOptions::default() };
        for seed in 0..10 {
            let s = &sample_training_batch(&clip, &windows, 1, 1, &opts, &mut rng(seed)).unwrap()[0];
            assert_eq!(s.hr_origin, (s.crop_origin.0 * 4, s.crop_origin.1 * 4));
            let frames = clip.window(&windows[s.window_start]);
            let expect = bicubic_resize(&frames[0].crop(s.hr_origin.0, s.hr_origin.1, 128, 128).unwrap(), 0.25).unwrap();
            assert_eq!(s.lr0, expect);
        }
    }

    #[test]
    fn target_pools() {
        assert_eq!(TargetPool::Interior.positions(9), vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(TargetPool::FirstSix.positions(9), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(TargetPool::Fixed.positions(9), vec![0, 4, 8]);
        assert_eq!(TargetPool::All.positions(9).len(), 9);
    }

    #[test]
    fn frame_directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frame_dir(dir.path()), Err(Error::Ingestion { .. })));
        let f = make_synthetic_clip(SyntheticKind::MovingSquare, 2, 10, 12, 0).unwrap().frames[0].clone();
        for i in 0..9 {
            write_image(&dir.path().join(format!("f{i:02}.png")), &f, ImageFormat::Png).unwrap();
        }
        let clip = load_frame_dir(dir.path()).unwrap();
        assert_eq!(clip.len(), 9);
        for (a, b) in clip.frames[3].data.iter().zip(&f.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        write_image(&dir.path().join("f99.ppm"), &FeatureGrid::filled(3, 4, 4, 0.5), ImageFormat::Ppm).unwrap();
        match load_frame_dir(dir.path()) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("f99.ppm")),
            other => panic!("{other:?}"),
        }
    }

    fn arb_grid() -> impl Strategy<Value = FeatureGrid> {
        (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-1.0f64..1.0, c * h * w)
                .prop_map(move |d| FeatureGrid::new(c, h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn augmentation_inverts_exactly(img in arb_grid(), turns in 0u8..4, flip: bool) {
            let aug = Augment { quarter_turns: turns, hflip: flip };
            prop_assert_eq!(aug.invert(&aug.apply(&img)), img);
        }
    }
}
