//! Residual convolutional encoder from two stacked RGB frames to a feature
//! grid at input resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;
use crate::numerics::{gemm, Grads, Graph, Op, ParamId, ParamStore, Tensor, Values, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            feat_channels: 64,
            num_blocks: 4,
            kernel_size: 3,
        }
    }
}

/// Lowers `[cin, h, w]` to `[cin·k·k, h·w]` patches with zero padding.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    if j0 >= j1 {
                        continue;
                    }
                    let src = c * hw + si as usize * w;
                    let dst = row + i * w;
                    for j in j0..j1 {
                        cols[dst + j] = x[src + (j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    let src = c * hw + si as usize * w;
                    let dst = row + i * w;
                    for j in j0..j1 {
                        dx_out[src + (j as isize + dx) as usize] += cols[dst + j];
                    }
                }
            }
        }
    }
}

struct Conv2d {
    x: Var,
    w: Var,
    b: Var,
    k: usize,
    cols: Vec<f64>,
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (cin, h, w) = {
            let s = values.shape(self.x);
            (s[0], s[1], s[2])
        };
        let cout = values.shape(self.w)[0];
        let kk = cin * self.k * self.k;
        let hw = h * w;
        if let Some(dw) = grads.slot(self.w) {
            gemm(cout, hw, kk, 1.0, dy, (hw, 1), &self.cols, (1, hw), 1.0, dw, (kk, 1));
        }
        if let Some(db) = grads.slot(self.b) {
            for (d, row) in db.iter_mut().zip(dy.chunks_exact(hw)) {
                *d += row.iter().sum::<f64>();
            }
        }
        if grads.wants(self.x) {
            let wv = values.get(self.w);
            let mut dcols = vec![0.0; kk * hw];
            gemm(kk, cout, hw, 1.0, wv, (1, kk), dy, (hw, 1), 0.0, &mut dcols, (hw, 1));
            let dx = grads.slot(self.x).expect("wanted");
            col2im(&dcols, cin, h, w, self.k, dx);
        }
    }
}

impl Graph<'_> {
    /// Stride-1 "same" convolution: `x: [cin, h, w]`, `w: [cout, cin·k·k]`,
    /// `b: [cout]` → `[cout, h, w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: s.to_vec(),
                    rhs: vec![0, 0, 0],
                })
            }
        };
        let (cout, kk) = self.dims2(w, "conv2d")?;
        if kk != cin * k * k || self.shape(b) != [cout] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let hw = h * wd;
        let cols = im2col(self.value(x), cin, h, wd, k);
        let mut y = Vec::with_capacity(cout * hw);
        for &bias in self.value(b) {
            y.extend(std::iter::repeat_n(bias, hw));
        }
        gemm(cout, kk, hw, 1.0, self.value(w), (kk, 1), &cols, (hw, 1), 1.0, &mut y, (hw, 1));
        let keep = if self.requires_grad(w) || self.requires_grad(x) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            vec![cout, h, wd],
            y,
            &[x, w, b],
            Conv2d {
                x,
                w,
                b,
                k,
                cols: keep,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl ConvLayer {
    /// Weights and biases uniform in `±1/sqrt(cin·k·k)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let w = Tensor::new(vec![cout, fan_in], draw(cout * fan_in)).expect("shape");
        let b = Tensor::new(vec![cout], draw(cout)).expect("shape");
        Self {
            weight: store.insert(format!("{prefix}.weight"), w),
            bias: store.insert(format!("{prefix}.bias"), b),
            kernel_size: k,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.kernel_size)
    }
}

/// `head → residual blocks → tail`, with a long skip from the head output:
/// `out = head(x) + tail(blocks(head(x)))`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub head: ConvLayer,
    pub blocks: Vec<(ConvLayer, ConvLayer)>,
    pub tail: ConvLayer,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.feat_channels == 0 || config.in_channels == 0 || config.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid encoder config {config:?}")));
        }
        let (c, k) = (config.feat_channels, config.kernel_size);
        let head = ConvLayer::new(store, "encoder.head", config.in_channels, c, k, rng);
        let blocks = (0..config.num_blocks)
            .map(|i| {
                (
                    ConvLayer::new(store, &format!("encoder.block{i}.conv1"), c, c, k, rng),
                    ConvLayer::new(store, &format!("encoder.block{i}.conv2"), c, c, k, rng),
                )
            })
            .collect();
        let tail = ConvLayer::new(store, "encoder.tail", c, c, k, rng);
        Ok(Self {
            config: config.clone(),
            head,
            blocks,
            tail,
        })
    }

    /// Encodes a stacked `[in_channels, h, w]` input.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let head = self.head.forward(g, x)?;
        let mut h = head;
        for (c1, c2) in &self.blocks {
            let a = c1.forward(g, h)?;
            let a = g.relu(a);
            let a = c2.forward(g, a)?;
            h = g.add(h, a)?;
        }
        let t = self.tail.forward(g, h)?;
        g.add(head, t)
    }

    /// Builds the stacked input from two frames and runs the encoder.
    /// The stacked frames are graph inputs, so gradients reach them.
    pub fn encode(&self, g: &mut Graph<'_>, i0: &FeatureGrid, i1: &FeatureGrid) -> Result<Var> {
        let x = stack_frames(i0, i1)?;
        let x = g.input(x.shape().to_vec(), x.data);
        self.forward(g, x)
    }

    /// Inference-only convenience returning a grid.
    pub fn encode_grid(&self, store: &ParamStore, i0: &FeatureGrid, i1: &FeatureGrid) -> Result<FeatureGrid> {
        let mut g = Graph::inference(store);
        let x = stack_frames(i0, i1)?;
        let x = g.constant(x.shape().to_vec(), x.data);
        let y = self.forward(&mut g, x)?;
        let s = g.shape(y).to_vec();
        FeatureGrid::new(s[0], s[1], s[2], g.value(y).to_vec())
    }
}

/// Channel-stacks two equally sized frames.
pub fn stack_frames(i0: &FeatureGrid, i1: &FeatureGrid) -> Result<FeatureGrid> {
    if i0.shape() != i1.shape() {
        return Err(Error::Input(format!(
            "frame dims differ: {:?} vs {:?}",
            i0.shape(),
            i1.shape()
        )));
    }
    FeatureGrid::stack(&[i0, i1])
}
