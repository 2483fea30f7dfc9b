//! Two-stage optimization loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_training_batch, sliding_windows, FrameWindow, SamplingOptions, TargetPool, TrainingSample, VideoClip, WINDOW};
use crate::error::{Error, Result};
use crate::geometry::{FeatureGrid, LatticeWindow};
use crate::metrics::{evaluate_protocol, psnr, ssim, EvalGroup, EvalMode, FrameSynthesizer, ModelSynthesizer, SynthesisPath};
use crate::model::{fmt_f64, parse, AblationFlags, Model, ModelConfig};
use crate::numerics::checkpoint::{Checkpoint, Entry};
use crate::numerics::{adam_step, charbonnier_loss, cosine_lr, AdamState, Graph, Var, CHARBONNIER_EPS};
use crate::renderer::SceneVars;
use crate::spatial_inr::pixel_cell;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cosine_period: usize,
    pub seed: u64,
    /// Validation and checkpoint interval; 0 disables both until the end.
    pub eval_every: usize,
    pub charbonnier_eps: f64,
    pub sampling: SamplingOptions,
    /// Degradation scale used for validation.
    pub val_scale: f64,
    pub window_stride: usize,
    /// Windows held out for validation when the clip has enough of them.
    pub val_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1_iters: 3000,
            stage2_iters: 1000,
            batch: 4,
            lr_max: 1e-4,
            lr_min: 1e-7,
            cosine_period: 1000,
            seed: 0,
            eval_every: 500,
            charbonnier_eps: CHARBONNIER_EPS,
            sampling: SamplingOptions::default(),
            val_scale: 4.0,
            window_stride: 1,
            val_windows: 1,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    pub fn stage(&self, iter: usize) -> u8 {
        if iter < self.stage1_iters {
            1
        } else {
            2
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        cosine_lr(iter, self.cosine_period, self.lr_max, self.lr_min)
    }

    /// Non-model `key=value` pairs.
    pub fn train_pairs(&self) -> Vec<(String, String)> {
        let s = &self.sampling;
        vec![
            ("stage1_iters".into(), self.stage1_iters.to_string()),
            ("stage2_iters".into(), self.stage2_iters.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr_max".into(), fmt_f64(self.lr_max)),
            ("lr_min".into(), fmt_f64(self.lr_min)),
            ("cosine_period".into(), self.cosine_period.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("charbonnier_eps".into(), fmt_f64(self.charbonnier_eps)),
            ("stage1_scale".into(), fmt_f64(s.stage1_scale)),
            ("stage2_scale_min".into(), fmt_f64(s.stage2_scale.0)),
            ("stage2_scale_max".into(), fmt_f64(s.stage2_scale.1)),
            ("target_pool".into(), s.pool.to_string()),
            ("num_targets".into(), s.targets.to_string()),
            ("augment".into(), s.augment.to_string()),
            ("val_scale".into(), fmt_f64(self.val_scale)),
            ("window_stride".into(), self.window_stride.to_string()),
            ("val_windows".into(), self.val_windows.to_string()),
        ]
    }

    /// Every addressable field, model keys included.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p = self.model.to_pairs();
        p.extend(self.train_pairs());
        p
    }

    /// Sets one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let s = &mut self.sampling;
        match key {
            "stage1_iters" => self.stage1_iters = parse(key, value)?,
            "stage2_iters" => self.stage2_iters = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr_max" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "cosine_period" => self.cosine_period = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "charbonnier_eps" => self.charbonnier_eps = parse(key, value)?,
            "stage1_scale" => s.stage1_scale = parse(key, value)?,
            "stage2_scale_min" => s.stage2_scale.0 = parse(key, value)?,
            "stage2_scale_max" => s.stage2_scale.1 = parse(key, value)?,
            "target_pool" => s.pool = value.trim().parse()?,
            "num_targets" => s.targets = parse(key, value)?,
            "augment" => s.augment = parse(key, value)?,
            "fixed_time" => {
                if parse::<bool>(key, value)? {
                    s.pool = TargetPool::Fixed;
                }
            }
            "variant" => self.model.flags = AblationFlags::from_variant(value.trim())?,
            "val_scale" => self.val_scale = parse(key, value)?,
            "window_stride" => self.window_stride = parse(key, value)?,
            "val_windows" => self.val_windows = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.total_iters() == 0 || self.batch == 0 || self.cosine_period == 0 || self.window_stride == 0 {
            return Err(Error::Config("iteration counts, batch, cosine_period and window_stride must be positive".into()));
        }
        if self.sampling.targets == 0 {
            return Err(Error::Config("num_targets must be positive".into()));
        }
        let (lo, hi) = self.sampling.stage2_scale;
        if !(self.sampling.stage1_scale >= 1.0 && lo >= 1.0 && hi >= lo && self.val_scale >= 1.0) {
            return Err(Error::Config("scales must be >= 1 with stage2_scale_min <= stage2_scale_max".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.charbonnier_eps > 0.0) {
            return Err(Error::Config("learning rates and charbonnier_eps must be positive".into()));
        }
        Ok(())
    }
}

/// A clip split into training and validation windows.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub clip: VideoClip,
    pub train: Vec<FrameWindow>,
    pub val: Vec<FrameWindow>,
}

impl TrainData {
    /// Holds out the last `holdout` windows and drops training windows that
    /// share frames with them; a clip too short to split validates on its
    /// training windows.
    pub fn new(clip: VideoClip, stride: usize, holdout: usize) -> Result<Self> {
        let windows = sliding_windows(&clip, WINDOW, stride)?;
        if holdout > 0 && windows.len() > holdout {
            let val = windows[windows.len() - holdout..].to_vec();
            let first = val[0].start;
            let train: Vec<_> = windows.iter().copied().filter(|w| w.start + w.len <= first).collect();
            if !train.is_empty() {
                return Ok(Self { clip, train, val });
            }
        }
        Ok(Self {
            clip,
            val: windows.clone(),
            train: windows,
        })
    }
}

/// Summed Charbonnier loss of one sample and its number of terms.
pub fn sample_loss(g: &mut Graph<'_>, model: &Model, sample: &TrainingSample, eps: f64) -> Result<(Var, usize)> {
    let grid = model.encoder.encode(g, &sample.lr0, &sample.lr1)?;
    let scene = SceneVars {
        grid,
        i0: g.constant(sample.lr0.shape().to_vec(), sample.lr0.data.clone()),
        i1: g.constant(sample.lr1.shape().to_vec(), sample.lr1.data.clone()),
    };
    let (h, w) = (sample.targets[0].1.height, sample.targets[0].1.width);
    let centers = LatticeWindow::full(h, w).centers();
    let coords = g.constant(vec![h * w, 2], centers.iter().flatten().copied().collect());
    let xts: Vec<f64> = sample.targets.iter().map(|t| t.0).collect();
    let preds = model.decode_times(g, scene, coords, &xts, pixel_cell(h, w))?;
    let mut total: Option<Var> = None;
    for (pred, (_, patch)) in preds.into_iter().zip(&sample.targets) {
        let target = g.constant(vec![h * w, 3], patch.to_rows());
        let l = charbonnier_loss(g, pred, target, eps)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok((total.expect("at least one target"), sample.targets.len()))
}

/// Forward, backward and one Adam step; returns the summed loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    samples: &[TrainingSample],
    iter: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    model.params.zero_grad();
    let mut loss = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let grads = {
            let mut g = Graph::new(&model.params);
            let (l, _) = sample_loss(&mut g, model, s, cfg.charbonnier_eps)?;
            let v = g.value(l)[0];
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { iter, scale: s.scale, sample: i });
            }
            loss += v;
            g.backward(l)?
        };
        model.params.accumulate(&grads);
    }
    adam_step(&mut model.params, adam, cfg.lr(iter))?;
    Ok(loss)
}

/// Batch of iteration `iter`; depends only on the seed and `iter`.
pub fn batch_for(cfg: &TrainConfig, data: &TrainData, iter: usize) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter as u64);
    sample_training_batch(&data.clip, &data.train, cfg.stage(iter), cfg.batch, &cfg.sampling, &mut rng)
}

/// Mid-time PSNR/SSIM over the validation windows (at most four).
pub fn validate(model: &Model, data: &TrainData, scale: f64) -> Result<(f64, f64)> {
    let step = data.val.len().div_ceil(4);
    let synth = ModelSynthesizer { model, path: SynthesisPath::PerCoordinate };
    let (h, w) = data.clip.dims();
    let (mut p, mut s, mut n) = (0.0, 0.0, 0.0);
    for win in data.val.iter().step_by(step) {
        let frames = data.clip.window(win);
        let group = EvalGroup {
            start: win.start,
            lr0: crate::data::degrade(&frames[0], scale)?,
            lr1: crate::data::degrade(&frames[win.len - 1], scale)?,
            out_h: h,
            out_w: w,
        };
        let mut out = synth.synthesize(&group, 0.5)?;
        clamp01(&mut out);
        let gt = &frames[(win.len - 1) / 2];
        p += psnr(&out, gt)?;
        s += if h >= 11 && w >= 11 { ssim(&out, gt)? } else { f64::NAN };
        n += 1.0;
    }
    Ok((p / n, s / n))
}

fn clamp01(img: &mut FeatureGrid) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// One metrics-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    /// Mean per-term loss since the previous row.
    pub loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const METRICS_HEADER: &str = "iter,lr,loss,val_psnr,val_ssim";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{:.8},{:.4},{:.6}", self.iter, self.lr, self.loss, self.val_psnr, self.val_ssim)
    }
}

/// Model, optimizer state and the next iteration to run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self { config, model, adam, iter: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.total_iters()
    }

    /// Runs one iteration; returns the batch and its summed loss.
    pub fn step(&mut self, data: &TrainData) -> Result<(Vec<TrainingSample>, f64)> {
        let batch = batch_for(&self.config, data, self.iter)?;
        let loss = train_step(&mut self.model, &mut self.adam, &batch, self.iter, &self.config)?;
        self.iter += 1;
        Ok((batch, loss))
    }

    /// Parameters, optimizer moments and the full config.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut header = self.config.train_pairs();
        header.push(("iter".into(), self.iter.to_string()));
        header.push(("adam_step".into(), self.adam.step.to_string()));
        let mut extra = Vec::new();
        for (id, (name, t)) in self.model.params.ids().zip(self.model.params.iter()) {
            for (kind, buf) in [("m", &self.adam.m[id.index()]), ("v", &self.adam.v[id.index()])] {
                extra.push(Entry {
                    name: format!("adam.{kind}.{name}"),
                    shape: t.shape().to_vec(),
                    values: buf.clone(),
                });
            }
        }
        self.model.to_checkpoint(&header, extra)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (k, v) in &ck.header {
            if k == "iter" || k == "adam_step" {
                continue;
            }
            config.set(k, v)?;
        }
        let model = Model::from_checkpoint(ck)?;
        let mut adam = AdamState::new(&model.params);
        let field = |k: &str| -> Result<u64> {
            ck.header_value(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing header `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad header `{k}`")))
        };
        adam.step = field("adam_step")?;
        for (id, (name, t)) in model.params.ids().zip(model.params.iter()) {
            for (kind, buf) in [("m", &mut adam.m[id.index()]), ("v", &mut adam.v[id.index()])] {
                let key = format!("adam.{kind}.{name}");
                let e = ck.entry(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if e.shape != t.shape() {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", e.shape)));
                }
                buf.copy_from_slice(&e.values);
            }
        }
        let iter = field("iter")? as usize;
        Ok(Self { config, model, adam, iter })
    }
}

/// Where and how [`run_training`] reports.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Print log rows to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Summed loss per iteration run.
    pub losses: Vec<f64>,
    /// Degradation scale per iteration run.
    pub scales: Vec<f64>,
    /// Window positions supervised at each iteration run.
    pub positions: Vec<Vec<usize>>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains until the configured iteration count, validating and
/// checkpointing every `eval_every` iterations and at the end.
pub fn run_training(mut trainer: Trainer, data: &TrainData, opts: &RunOptions) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    let mut csv = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let resuming = trainer.iter > 0 && path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !resuming {
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        csv = Some((f, path));
    }
    let mut out = TrainOutcome {
        trainer: trainer.clone(),
        losses: Vec::new(),
        scales: Vec::new(),
        positions: Vec::new(),
        log: Vec::new(),
        checkpoints: Vec::new(),
    };
    let (mut acc, mut terms) = (0.0, 0usize);
    while !trainer.is_done() {
        let iter = trainer.iter;
        let (batch, loss) = trainer.step(data)?;
        out.losses.push(loss);
        out.scales.push(batch[0].scale);
        out.positions.push(
            batch
                .iter()
                .flat_map(|s| s.targets.iter().map(|t| (t.0 * (WINDOW - 1) as f64).round() as usize))
                .collect(),
        );
        acc += loss;
        terms += batch.iter().map(|s| s.targets.len()).sum::<usize>();
        let at_eval = cfg.eval_every > 0 && (iter + 1).is_multiple_of(cfg.eval_every);
        if at_eval || trainer.is_done() {
            let (vp, vs) = validate(&trainer.model, data, cfg.val_scale)?;
            let row = LogRow {
                iter: iter + 1,
                lr: cfg.lr(iter),
                loss: acc / terms as f64,
                val_psnr: vp,
                val_ssim: vs,
            };
            (acc, terms) = (0.0, 0);
            if opts.verbose {
                eprintln!("{}", row.csv());
            }
            if let Some((f, path)) = &mut csv {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            out.log.push(row);
            if let Some(dir) = &opts.out_dir {
                let ck = trainer.checkpoint();
                let path = dir.join(checkpoint_file_name(iter + 1));
                ck.save(&path)?;
                if trainer.is_done() {
                    ck.save(&dir.join("final.ckpt"))?;
                }
                out.checkpoints.push(path);
            }
        }
    }
    out.trainer = trainer;
    Ok(out)
}

pub fn checkpoint_file_name(iter: usize) -> String {
    format!("checkpoint_{iter:07}.ckpt")
}

/// One row of an architecture comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean per-term training loss over the last logged interval.
    pub final_loss: f64,
}

/// Trains the full model and each variant from the same seed and scores
/// them with the evaluation protocol on `eval_clip`.
pub fn run_ablation(
    base: &TrainConfig,
    data: &TrainData,
    variants: &[String],
    eval_clip: &VideoClip,
    mode: EvalMode,
    scale: f64,
    verbose: bool,
) -> Result<Vec<AblationRow>> {
    let mut tags = vec!["full".to_string()];
    for v in variants {
        AblationFlags::from_variant(v)?;
        if !tags.contains(v) {
            tags.push(v.clone());
        }
    }
    let mut rows = Vec::with_capacity(tags.len());
    for tag in &tags {
        let mut cfg = base.clone();
        cfg.model.flags = AblationFlags::from_variant(tag)?;
        let label = cfg.model.flags.label();
        let out = run_training(Trainer::new(cfg)?, data, &RunOptions { out_dir: None, verbose })?;
        let synth = ModelSynthesizer { model: &out.trainer.model, path: SynthesisPath::PerCoordinate };
        let r = evaluate_protocol(&synth, eval_clip, mode, scale)?;
        rows.push(AblationRow {
            variant: label,
            psnr: r.psnr,
            ssim: r.ssim,
            final_loss: out.log.last().map_or(f64::NAN, |l| l.loss),
        });
    }
    Ok(rows)
}

/// Reads a key=value config file into `cfg`.
pub fn load_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cfg.apply_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_clip, Augment, SyntheticKind};
    use crate::numerics::ParamStore;

    fn values(p: &ParamStore) -> Vec<(String, Vec<u64>)> {
        p.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    /// Micro model for fast loop tests.
    fn micro() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.apply_text(
            "feat_channels=4\nnum_blocks=1\nspatial_hidden=8\nspatial_out=4\ntemporal_hidden=8\ndecoder_hidden=8,8\n\
             stage1_iters=4\nstage2_iters=4\nbatch=1\ncosine_period=8\neval_every=4\n\
             stage1_scale=2\nstage2_scale_max=2\nval_scale=2",
        )
        .unwrap();
        c
    }

    fn micro_data() -> TrainData {
        TrainData::new(make_synthetic_clip(SyntheticKind::MovingSquare, 9, 64, 64, 1).unwrap(), 1, 1).unwrap()
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = micro();
        c.set("lr_max", "0.0005").unwrap();
        c.set("target_pool", "first_six").unwrap();
        let mut d = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(matches!(c.set("no_such_key", "1"), Err(Error::UnknownKey(k)) if k == "no_such_key"));
        assert!(matches!(c.apply_text("batch=2\nbogus = 3\n"), Err(Error::UnknownKey(_))));
        c.set("fixed_time", "true").unwrap();
        assert_eq!(c.sampling.pool, TargetPool::Fixed);
        c.set("variant", "f+m").unwrap();
        assert!(!c.model.flags.use_flow && !c.model.flags.use_multiscale);
    }

    #[test]
    fn cosine_endpoints() {
        let c = TrainConfig { lr_max: 1e-4, lr_min: 1e-7, cosine_period: 1000, ..TrainConfig::default() };
        assert_eq!(c.lr(0), 1e-4);
        let step = c.lr(998) - c.lr(999);
        assert!(c.lr(999) - 1e-7 <= step.max(1e-12));
        assert_eq!(c.lr(1000), 1e-4);
    }

    #[test]
    fn exact_prediction_hits_the_charbonnier_floor() {
        let mut cfg = micro();
        cfg.model.set("use_flow", "false").unwrap();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let out = model.decoder.output_layer().clone();
        model.params.get_mut(out.weight).data_mut().fill(0.0);
        model.params.get_mut(out.bias).data_mut().copy_from_slice(&[0.2, 0.4, 0.6]);
        let mut patch = FeatureGrid::filled(3, 8, 8, 0.0);
        for (c, v) in [0.2, 0.4, 0.6].iter().enumerate() {
            patch.data[c * 64..(c + 1) * 64].fill(*v);
        }
        let sample = TrainingSample {
            lr0: FeatureGrid::filled(3, 4, 4, 0.1),
            lr1: FeatureGrid::filled(3, 4, 4, 0.9),
            targets: vec![(0.25, patch.clone()), (0.5, patch.clone()), (0.75, patch)],
            scale: 2.0,
            crop_origin: (0, 0),
            hr_origin: (0, 0),
            window_start: 0,
            augment: Augment::default(),
        };
        let mut g = Graph::new(&model.params);
        let (l, n) = sample_loss(&mut g, &model, &sample, 1e-3).unwrap();
        assert_eq!(n, 3);
        assert_eq!(g.value(l)[0], 3.0 * 1e-3);
    }

    #[test]
    fn stage_boundary_controls_scale() {
        let mut cfg = micro();
        cfg.set("stage2_scale_min", "1").unwrap();
        let data = TrainData::new(make_synthetic_clip(SyntheticKind::MovingSquare, 9, 64, 64, 1).unwrap(), 1, 1).unwrap();
        for iter in 0..cfg.stage1_iters {
            assert!(batch_for(&cfg, &data, iter).unwrap().iter().all(|s| s.scale == 2.0));
        }
        let later: Vec<f64> = (cfg.stage1_iters..cfg.total_iters()).map(|i| batch_for(&cfg, &data, i).unwrap()[0].scale).collect();
        assert!(later.iter().any(|&s| s != 2.0) && later.iter().all(|&s| (1.0..2.0).contains(&s)));
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let data = micro_data();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), verbose: false };
        let a = run_training(Trainer::new(micro()).unwrap(), &data, &opts).unwrap();
        let b = run_training(Trainer::new(micro()).unwrap(), &data, &RunOptions::default()).unwrap();
        assert_eq!(a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(values(&a.trainer.model.params), values(&b.trainer.model.params));
        assert_eq!(a.log.len(), 2);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("4,"));
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join(checkpoint_file_name(4)).exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = micro_data();
        let full = run_training(Trainer::new(micro()).unwrap(), &data, &RunOptions::default()).unwrap();
        let mut cfg = micro();
        cfg.stage2_iters = 1;
        let part = run_training(Trainer::new(cfg).unwrap(), &data, &RunOptions::default()).unwrap();
        let bytes = part.trainer.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(values(&resumed.model.params), values(&part.trainer.model.params));
        assert_eq!(resumed.adam, part.trainer.adam);
        resumed.config.stage2_iters = 4;
        let (_, loss) = resumed.step(&data).unwrap();
        assert_eq!(loss.to_bits(), full.losses[5].to_bits());
        let rest = run_training(resumed, &data, &RunOptions::default()).unwrap();
        assert_eq!(values(&rest.trainer.model.params), values(&full.trainer.model.params));
    }

    #[test]
    fn non_finite_loss_reports_context() {
        let cfg = micro();
        let data = micro_data();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let id = t.model.decoder.output_layer().bias;
        t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
        match t.step(&data) {
            Err(Error::NonFiniteLoss { iter: 0, scale, sample: 0 }) => assert_eq!(scale, 2.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        let mut cfg = micro();
        cfg.lr_max = 1e-3;
        cfg.cosine_period = 1000;
        let data = micro_data();
        let batch = batch_for(&cfg, &data, 0).unwrap();
        let mut model = Model::new(&cfg.model, 0).unwrap();
        let mut adam = AdamState::new(&model.params);
        let first = train_step(&mut model, &mut adam, &batch, 0, &cfg).unwrap();
        let mut last = first;
        for it in 1..=200 {
            last = train_step(&mut model, &mut adam, &batch, it, &cfg).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
