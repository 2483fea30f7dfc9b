//! PSNR, SSIM, and the center/average evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{degrade, VideoClip, WINDOW};
use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;
use crate::model::Model;

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &FeatureGrid, b: &FeatureGrid, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Rec.601 luma plane.
pub fn luma(img: &FeatureGrid) -> Result<Vec<f64>> {
    if img.channels != 3 {
        return Err(Error::Input(format!("luma needs 3 channels, got {}", img.channels)));
    }
    let p = img.plane();
    Ok((0..p)
        .map(|i| 0.299 * img.data[i] + 0.587 * img.data[p + i] + 0.114 * img.data[2 * p + i])
        .collect())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes over every full 11×11 Gaussian window.
pub fn ssim(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("ssim needs at least 11x11 pixels, got {h}x{w}")));
    }
    let (x, y) = (luma(a)?, luma(b)?);
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Inputs of one evaluation group.
#[derive(Debug, Clone)]
pub struct EvalGroup {
    /// Index of the group's first frame in the clip.
    pub start: usize,
    pub lr0: FeatureGrid,
    pub lr1: FeatureGrid,
    pub out_h: usize,
    pub out_w: usize,
}

/// Anything that can produce the frame at `xt` between a group's inputs.
pub trait FrameSynthesizer {
    fn synthesize(&self, group: &EvalGroup, xt: f64) -> Result<FeatureGrid>;
}

/// Which frames of a 9-frame group are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// First, middle (xt = 0.5) and last frame.
    Center,
    /// First, fourth (xt = 3/8) and last frame.
    CenterFourth,
    /// All nine frames.
    Average,
}

impl EvalMode {
    pub fn times(self) -> Vec<f64> {
        match self {
            EvalMode::Center => vec![0.0, 0.5, 1.0],
            EvalMode::CenterFourth => vec![0.0, 0.375, 1.0],
            EvalMode::Average => (0..WINDOW).map(|k| k as f64 / (WINDOW - 1) as f64).collect(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EvalMode::Center => "center",
            EvalMode::CenterFourth => "center4",
            EvalMode::Average => "average",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Self::Center),
            "center4" => Ok(Self::CenterFourth),
            "average" => Ok(Self::Average),
            _ => Err(Error::Usage(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub group: usize,
    pub xt: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub psnr: f64,
    pub ssim: f64,
    pub frames: Vec<FrameScore>,
}

/// Disjoint 9-frame groups; inputs are each group's first and last frame
/// degraded by `scale`, and outputs are scored against the clip frames.
pub fn evaluate_protocol(
    synth: &dyn FrameSynthesizer,
    clip: &VideoClip,
    mode: EvalMode,
    scale: f64,
) -> Result<EvalResult> {
    if clip.len() < WINDOW {
        return Err(Error::Data(format!(
            "evaluation needs at least {WINDOW} frames, clip has {}",
            clip.len()
        )));
    }
    let (h, w) = clip.dims();
    let mut frames = Vec::new();
    for (gi, start) in (0..=clip.len() - WINDOW).step_by(WINDOW).enumerate() {
        let group = EvalGroup {
            start,
            lr0: degrade(&clip.frames[start], scale)?,
            lr1: degrade(&clip.frames[start + WINDOW - 1], scale)?,
            out_h: h,
            out_w: w,
        };
        for xt in mode.times() {
            let gt = &clip.frames[start + (xt * (WINDOW - 1) as f64).round() as usize];
            let mut out = synth.synthesize(&group, xt)?;
            out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            frames.push(FrameScore {
                group: gi,
                xt,
                psnr: psnr(&out, gt)?,
                ssim: ssim(&out, gt)?,
            });
        }
    }
    let n = frames.len() as f64;
    Ok(EvalResult {
        psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    })
}

/// Synthesis path used when a model is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SynthesisPath {
    #[default]
    PerCoordinate,
    WholeFrame,
}

/// A model bound to a synthesis path.
pub struct ModelSynthesizer<'a> {
    pub model: &'a Model,
    pub path: SynthesisPath,
}

impl FrameSynthesizer for ModelSynthesizer<'_> {
    fn synthesize(&self, g: &EvalGroup, xt: f64) -> Result<FeatureGrid> {
        let grid = self.model.encode(&g.lr0, &g.lr1)?;
        match self.path {
            SynthesisPath::PerCoordinate => {
                self.model.synthesize_frame_per_coordinate(&grid, &g.lr0, &g.lr1, g.out_h, g.out_w, xt)
            }
            SynthesisPath::WholeFrame => self.model.synthesize_frame(&grid, &g.lr0, &g.lr1, g.out_h, g.out_w, xt),
        }
    }
}

/// Emits the clip's own frames: the reference upper bound of the protocol.
pub struct ClipOracle<'a>(pub &'a VideoClip);

impl FrameSynthesizer for ClipOracle<'_> {
    fn synthesize(&self, g: &EvalGroup, xt: f64) -> Result<FeatureGrid> {
        let k = g.start + (xt * (WINDOW - 1) as f64).round() as usize;
        self.0
            .frames
            .get(k)
            .cloned()
            .ok_or(Error::Index { index: k, len: self.0.len() })
    }
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub mode: String,
    pub scale: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// `mode,scale,psnr,ssim` CSV.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("mode,scale,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.6}", r.mode, r.scale, r.psnr, r.ssim);
    }
    s
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Aligned text table with a method column.
pub fn report_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:<8}  {:>6}  {:>8}  {:>7}\n", "method", "mode", "scale", "psnr", "ssim");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:<8}  {:>6}  {:>8.3}  {:>7.4}",
            r.method, r.mode, r.scale, r.psnr, r.ssim
        );
    }
    s
}
