use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stinr_core::data::{load_frame_dir, make_synthetic_clip, SyntheticKind, VideoClip};
use stinr_core::gradcheck::run_suite;
use stinr_core::image_io::{read_image, save_frames, ImageFormat};
use stinr_core::metrics::{
    evaluate_protocol, report_csv, report_table, ClipOracle, EvalMode, FrameSynthesizer, ModelSynthesizer, ReportRow,
    SynthesisPath,
};
use stinr_core::model::{Model, ModelConfig};
use stinr_core::numerics::checkpoint::Checkpoint;
use stinr_core::numerics::set_corrupt_sine_backward;
use stinr_core::renderer::{Region, RenderRequest};
use stinr_core::trainer::{load_config_file, run_ablation, run_training, RunOptions, TrainConfig, TrainData, Trainer};
use stinr_core::Error;

#[derive(Parser)]
#[command(name = "stinr", version, about = "Continuous space-time video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (two-stage schedule).
    Train(TrainArgs),
    /// Render frames at arbitrary times and scale from two input frames.
    Decode(DecodeArgs),
    /// Score a checkpoint with the center/average protocol.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Train and compare architecture variants.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Synthetic clip: moving_square, two_squares, sinusoid_texture.
    #[arg(long, conflicts_with = "frames")]
    synthetic: Option<String>,
    /// Directory of PNG/PPM frames.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Synthetic clip length in frames.
    #[arg(long, default_value_t = 9)]
    clip_len: usize,
    /// Synthetic frame height.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Synthetic frame width.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Seed of the synthetic scene.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self, default_kind: Option<&str>) -> Result<VideoClip, Error> {
        if let Some(dir) = &self.frames {
            return load_frame_dir(dir);
        }
        let kind = self
            .synthetic
            .as_deref()
            .or(default_kind)
            .ok_or_else(|| Error::Usage("need --synthetic KIND or --frames DIR".into()))?;
        make_synthetic_clip(kind.parse::<SyntheticKind>()?, self.clip_len, self.height, self.width, self.data_seed)
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from the desk-scale model instead of full-width defaults.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Architecture variant: full, or f/m/s joined by '+'.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    /// Defaults, then the file, then flags.
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::default();
        if self.tiny {
            cfg.model = ModelConfig::tiny();
        }
        if let Some(p) = &self.config {
            load_config_file(&mut cfg, p)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("stage1_iters", self.stage1_iters.map(|v| v.to_string())),
            ("stage2_iters", self.stage2_iters.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("variant", self.variant.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

impl From<Format> for ImageFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Png => ImageFormat::Png,
            Format::Ppm => ImageFormat::Ppm,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    space_scale: f64,
    /// Comma-separated times in [0, 1].
    #[arg(long, value_delimiter = ',', conflicts_with = "num_frames")]
    times: Vec<f64>,
    /// K uniform times from 0 to 1.
    #[arg(long)]
    num_frames: Option<usize>,
    /// x0,y0,x1,y1 as fractions of the frame.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    region: Vec<f64>,
    #[arg(long)]
    allow_extrapolation: bool,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Coord,
    Whole,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// center, center4 (first, fourth, last frame) or average.
    #[arg(long, default_value = "center")]
    mode: String,
    #[arg(long, default_value_t = 4.0)]
    space_scale: f64,
    #[arg(long, value_enum, default_value = "coord")]
    path: PathArg,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Score the ground-truth frames themselves.
    #[arg(long, hide = true)]
    oracle: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Accepted for symmetry; the suite always uses small configurations.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, hide = true)]
    corrupt_sine_backward: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Variants besides the full model, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "f,m,s")]
    variants: Vec<String>,
    /// Training iterations per variant.
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Training and evaluation scale.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value = "average")]
    mode: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn train(a: TrainArgs) -> Result<u8, Error> {
    let trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            // flags may extend the schedule of a resumed run
            if let Some(v) = a.config.stage1_iters {
                t.config.stage1_iters = v;
            }
            if let Some(v) = a.config.stage2_iters {
                t.config.stage2_iters = v;
            }
            t
        }
        None => Trainer::new(a.config.build()?)?,
    };
    let clip = a.data.load(None)?;
    let data = TrainData::new(clip, trainer.config.window_stride, trainer.config.val_windows)?;
    let start = Instant::now();
    let out = run_training(trainer, &data, &RunOptions { out_dir: Some(a.out_dir.clone()), verbose: !a.quiet })?;
    let last = out.log.last();
    println!(
        "trained {} iterations in {:.1}s; final loss {:.6}, val psnr {:.3}",
        out.losses.len(),
        start.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |l| l.loss),
        last.map_or(f64::NAN, |l| l.val_psnr)
    );
    println!("checkpoint {}", a.out_dir.join("final.ckpt").display());
    println!("metrics {}", a.out_dir.join("metrics.csv").display());
    Ok(0)
}

fn decode(a: DecodeArgs) -> Result<u8, Error> {
    let model = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let (i0, i1) = (read_image(&a.frame0)?, read_image(&a.frame1)?);
    let times = match a.num_frames {
        Some(0) => return Err(Error::Usage("--num-frames must be positive".into())),
        Some(1) => vec![0.5],
        Some(k) => (0..k).map(|i| i as f64 / (k - 1) as f64).collect(),
        None if a.times.is_empty() => return Err(Error::Usage("need --times or --num-frames".into())),
        None => a.times.clone(),
    };
    let mut req = RenderRequest::new(a.space_scale, times.clone());
    req.allow_extrapolation = a.allow_extrapolation;
    if !a.region.is_empty() {
        let [x0, y0, x1, y1] = a.region[..] else {
            return Err(Error::Usage("--region expects x0,y0,x1,y1".into()));
        };
        req.region = Some(Region { x0, y0, x1, y1 });
    }
    let frames = model.render_video(&i0, &i1, &req)?;
    create_dir(&a.out_dir)?;
    for p in save_frames(&a.out_dir, &frames, &times, a.format.into())? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<u8, Error> {
    let mode: EvalMode = a.mode.parse()?;
    let clip = a.data.load(None)?;
    let model;
    let (synth, method): (Box<dyn FrameSynthesizer + '_>, String) = if a.oracle {
        (Box::new(ClipOracle(&clip)), "ground-truth".into())
    } else {
        let path = a.checkpoint.as_ref().expect("required by clap");
        model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
        let p = match a.path {
            PathArg::Coord => SynthesisPath::PerCoordinate,
            PathArg::Whole => SynthesisPath::WholeFrame,
        };
        (Box::new(ModelSynthesizer { model: &model, path: p }), model.config.flags.label())
    };
    let r = evaluate_protocol(synth.as_ref(), &clip, mode, a.space_scale)?;
    let rows = vec![ReportRow {
        method,
        mode: mode.label().into(),
        scale: a.space_scale,
        psnr: r.psnr,
        ssim: r.ssim,
    }];
    print!("{}", report_table(&rows));
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join("eval.csv");
    write_file(&path, &report_csv(&rows))?;
    println!("report {}", path.display());
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8, Error> {
    let start = Instant::now();
    set_corrupt_sine_backward(a.corrupt_sine_backward);
    let report = run_suite(a.tolerance);
    set_corrupt_sine_backward(false);
    let report = report?;
    println!("{:<22} {:<30} {:>12}", "op", "worst tensor", "rel error");
    for c in report.per_op() {
        println!("{:<22} {:<30} {:>12.3e}", c.op, c.tensor, c.rel_error);
    }
    let n = report.checks.len();
    println!("{n} tensors checked in {:.2}s", start.elapsed().as_secs_f64());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all relative errors < {:e}", a.tolerance);
        return Ok(0);
    }
    for f in &failures {
        println!("FAIL op={} tensor={} rel_error={:.3e}", f.op, f.tensor, f.rel_error);
    }
    let w = failures[0];
    println!("worst offender: op={} tensor={} rel_error={:.3e}", w.op, w.tensor, w.rel_error);
    Ok(1)
}

fn ablate(a: AblateArgs) -> Result<u8, Error> {
    let mode: EvalMode = a.mode.parse()?;
    let mut cfg = a.config.build()?;
    cfg.stage1_iters = a.iters;
    cfg.stage2_iters = 0;
    cfg.eval_every = 0;
    cfg.sampling.stage1_scale = a.scale;
    cfg.val_scale = a.scale;
    cfg.validate()?;
    let clip = a.data.load(Some("two_squares"))?;
    let data = TrainData::new(clip.clone(), cfg.window_stride, cfg.val_windows)?;
    let rows = run_ablation(&cfg, &data, &a.variants, &clip, mode, a.scale, !a.quiet)?;
    let report: Vec<ReportRow> = rows
        .iter()
        .map(|r| ReportRow {
            method: r.variant.clone(),
            mode: mode.label().into(),
            scale: a.scale,
            psnr: r.psnr,
            ssim: r.ssim,
        })
        .collect();
    print!("{}", report_table(&report));
    create_dir(&a.out_dir)?;
    let mut csv = String::from("variant,psnr,ssim\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.4},{:.6}\n", r.variant, r.psnr, r.ssim));
    }
    let path = a.out_dir.join("ablation.csv");
    write_file(&path, &csv)?;
    println!("report {}", path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
