//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes (on an inference
//! graph with perturbed values), so it is independent of every backward rule.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

/// Differentiable leaf fed to the function under test.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Leaf {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Entries sampled per tensor; tensors this small or smaller are checked
    /// exhaustively.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: 12,
            seed: 0,
        }
    }
}

/// Worst disagreement for one tensor: `max |a - n| / max(|n|, |a|)` over the
/// checked entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub op: String,
    pub tensor: String,
    pub rel_error: f64,
    pub entries: usize,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn eval_scalar<F>(store: &ParamStore, leaves: &[Leaf], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = leaves
        .iter()
        .map(|l| g.constant(l.shape.clone(), l.data.clone()))
        .collect();
    let out = f(&mut g, &vars)?;
    match g.value(out) {
        [v] => Ok(*v),
        v => Err(Error::Usage(format!(
            "gradient check needs a scalar, got {} values",
            v.len()
        ))),
    }
}

fn pick(len: usize, opts: &FdOptions, salt: usize) -> Vec<usize> {
    if len <= opts.max_entries {
        return (0..len).collect();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed ^ (salt as u64).wrapping_mul(0x9E37_79B9));
    let mut idx = sample(&mut rng, len, opts.max_entries).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks the gradient of the scalar `f` w.r.t. every leaf and every
/// parameter in `store`.
pub fn check<F>(
    op: &str,
    store: &ParamStore,
    leaves: &[Leaf],
    opts: &FdOptions,
    f: F,
) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let (leaf_grads, param_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = leaves
            .iter()
            .map(|l| g.input(l.shape.clone(), l.data.clone()))
            .collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let lg: Vec<Vec<f64>> = vars
            .iter()
            .zip(leaves)
            .map(|(&v, l)| grads.wrt(v).map_or_else(|| vec![0.0; l.data.len()], <[f64]>::to_vec))
            .collect();
        let pg: Vec<Vec<f64>> = store
            .ids()
            .map(|id| grads.param(id).map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec))
            .collect();
        (lg, pg)
    };

    let h = opts.step;
    let mut report = Vec::new();
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let idx = pick(leaf.data.len(), opts, li);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = leaf.data[i];
            work[li].data[i] = orig + h;
            let plus = eval_scalar(store, &work, &f)?;
            work[li].data[i] = orig - h;
            let minus = eval_scalar(store, &work, &f)?;
            work[li].data[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| leaf_grads[li][i]).collect();
        report.push(TensorCheck {
            op: op.to_string(),
            tensor: leaf.name.clone(),
            rel_error: rel_error(&analytic, &numeric),
            entries: idx.len(),
        });
    }

    let mut params = store.clone();
    for (pi, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        let idx = pick(n, opts, 1000 + pi);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval_scalar(&params, leaves, &f)?;
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval_scalar(&params, leaves, &f)?;
            params.get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| param_grads[pi][i]).collect();
        report.push(TensorCheck {
            op: op.to_string(),
            tensor: store.name(id).to_string(),
            rel_error: rel_error(&analytic, &numeric),
            entries: idx.len(),
        });
    }
    Ok(report)
}

/// Reduces a graph output to a scalar by a fixed pseudo-random projection,
/// so every output entry gets a distinct weight.
pub fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let n = g.value(y).len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = g.shape(y).to_vec();
    let w = g.constant(shape, w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst-first summary of a set of checks.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&TensorCheck> {
        let mut f: Vec<_> = self.checks.iter().filter(|c| !(c.rel_error < self.tolerance)).collect();
        f.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        f
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Worst result per op, in first-seen order.
    pub fn per_op(&self) -> Vec<&TensorCheck> {
        let mut out: Vec<&TensorCheck> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|o| o.op == c.op) {
                Some(o) if c.rel_error > o.rel_error => *o = c,
                Some(_) => {}
                None => out.push(c),
            }
        }
        out
    }
}

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Coordinates whose bilinear taps and nearest cells stay fixed under
/// perturbations of `margin` (in cell units) on an `h × w` lattice.
fn smooth_coords(n: usize, h: usize, w: usize, margin: f64, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    let mut s = seed;
    while out.len() < 2 * n {
        let cand = uniform(2, -0.95, 0.95, s);
        s += 1;
        let ok = cand.iter().zip([h, w]).all(|(&c, m)| {
            let u = (c + 1.0) * m as f64 / 2.0;
            let frac_center = (u - 0.5).rem_euclid(1.0);
            let frac_edge = u.rem_euclid(1.0);
            frac_center.min(1.0 - frac_center) > margin && frac_edge.min(1.0 - frac_edge) > margin
        });
        if ok {
            out.extend(cand);
        }
    }
    out
}

/// Model configuration small enough for exhaustive decode checks.
pub fn micro_model_config(flags: crate::model::AblationFlags, dual_flow: bool) -> crate::model::ModelConfig {
    let mut cfg = crate::model::ModelConfig::tiny();
    cfg.encoder.feat_channels = 3;
    cfg.encoder.num_blocks = 1;
    cfg.spatial.hidden = vec![6];
    cfg.spatial.out_dim = 3;
    cfg.temporal.hidden = vec![6];
    cfg.temporal.dual_flow = dual_flow;
    cfg.decoder.hidden = vec![6];
    cfg.flags = flags;
    cfg
}

fn elementary(opts: &FdOptions, out: &mut Vec<TensorCheck>) -> Result<()> {
    use crate::geometry::{bilinear, nearest_lookup};
    use crate::numerics::{charbonnier_loss, Tensor};
    let empty = ParamStore::new();
    let x = Leaf::new("x", vec![4, 3], uniform(12, -1.0, 1.0, 1));
    let y = Leaf::new("y", vec![4, 3], uniform(12, -1.0, 1.0, 2));

    let mut lin = ParamStore::new();
    let w = lin.insert("w", Tensor::new(vec![5, 3], uniform(15, -1.0, 1.0, 3))?);
    let b = lin.insert("b", Tensor::new(vec![5], uniform(5, -1.0, 1.0, 4))?);
    out.extend(check("linear", &lin, std::slice::from_ref(&x), opts, |g, v| {
        let (w, b) = (g.param(w), g.param(b));
        let z = g.linear(v[0], w, b)?;
        project(g, z, 10)
    })?);
    for omega in [1.0, 30.0] {
        out.extend(check("sine", &empty, std::slice::from_ref(&x), opts, |g, v| {
            let z = g.sin(v[0], omega);
            project(g, z, 11)
        })?);
    }
    // keep inputs away from the kink at 0
    let away: Vec<f64> = x.data.iter().map(|v| v + 0.1f64.copysign(*v)).collect();
    out.extend(check("relu", &empty, &[Leaf::new("x", vec![4, 3], away)], opts, |g, v| {
        let z = g.relu(v[0]);
        project(g, z, 12)
    })?);
    let pair = [x.clone(), y.clone()];
    out.extend(check("add", &empty, &pair, opts, |g, v| {
        let z = g.add(v[0], v[1])?;
        project(g, z, 13)
    })?);
    out.extend(check("sub", &empty, &pair, opts, |g, v| {
        let z = g.sub(v[0], v[1])?;
        project(g, z, 14)
    })?);
    out.extend(check("mul", &empty, &pair, opts, |g, v| {
        let z = g.mul(v[0], v[1])?;
        project(g, z, 15)
    })?);
    out.extend(check("scale", &empty, std::slice::from_ref(&x), opts, |g, v| {
        let z = g.scale(v[0], -2.5);
        project(g, z, 16)
    })?);
    out.extend(check("row_scale", &empty, std::slice::from_ref(&x), opts, |g, v| {
        let z = g.row_scale(v[0], vec![0.5, -1.0, 2.0, 0.25])?;
        project(g, z, 17)
    })?);
    out.extend(check("concat_cols", &empty, &pair, opts, |g, v| {
        let z = g.concat_cols(&[v[0], v[1], v[0]])?;
        project(g, z, 18)
    })?);
    out.extend(check("slice_cols", &empty, std::slice::from_ref(&x), opts, |g, v| {
        let z = g.slice_cols(v[0], 1, 2)?;
        project(g, z, 19)
    })?);
    out.extend(check("sum", &empty, std::slice::from_ref(&x), opts, |g, v| {
        let s = g.sum(v[0]);
        let s2 = g.mul(s, s)?;
        Ok(s2)
    })?);
    out.extend(check("mean", &empty, std::slice::from_ref(&x), opts, |g, v| {
        let s = g.mean(v[0]);
        let s2 = g.mul(s, s)?;
        Ok(s2)
    })?);
    out.extend(check("charbonnier", &empty, &pair, opts, |g, v| charbonnier_loss(g, v[0], v[1], 0.1))?);

    let mut conv = ParamStore::new();
    let cw = conv.insert("w", Tensor::new(vec![4, 2 * 9], uniform(72, -0.5, 0.5, 5))?);
    let cb = conv.insert("b", Tensor::new(vec![4], uniform(4, -0.5, 0.5, 6))?);
    let img = Leaf::new("x", vec![2, 5, 4], uniform(40, -1.0, 1.0, 7));
    out.extend(check("conv2d", &conv, &[img], opts, |g, v| {
        let (w, b) = (g.param(cw), g.param(cb));
        let z = g.conv2d(v[0], w, b, 3)?;
        project(g, z, 20)
    })?);

    let grid = Leaf::new("grid", vec![3, 4, 5], uniform(60, -1.0, 1.0, 8));
    let coords = Leaf::new("coords", vec![6, 2], smooth_coords(6, 4, 5, 0.01, 9));
    let gc = [grid, coords];
    out.extend(check("bilinear", &empty, &gc, opts, |g, v| {
        let z = bilinear(g, v[0], v[1])?;
        project(g, z, 21)
    })?);
    for scaled in [true, false] {
        out.extend(check("nearest_lookup", &empty, &gc, opts, |g, v| {
            let z = nearest_lookup(g, v[0], v[1], scaled, [0.0, 0.0])?;
            project(g, z, 22)
        })?);
    }
    Ok(())
}

fn composite(opts: &FdOptions, out: &mut Vec<TensorCheck>) -> Result<()> {
    use rand::SeedableRng;
    use crate::encoder::{stack_frames, Encoder, EncoderConfig};
    use crate::geometry::FeatureGrid;
    use crate::model::{AblationFlags, Model, ModelConfig};
    use crate::numerics::{charbonnier_loss, Siren, SirenSpec, CHARBONNIER_EPS};
    use crate::renderer::SceneVars;
    use crate::spatial_inr::{SpatialInr, SpatialInrConfig};
    use crate::temporal_inr::TemporalInr;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let spec = SirenSpec { in_dim: 3, hidden: vec![8, 8], out_dim: 2, first_omega: 30.0, hidden_omega: 1.0 };
    let net = Siren::new(&mut store, "siren", &spec, &mut rng);
    let x = Leaf::new("x", vec![5, 3], uniform(15, -1.0, 1.0, 32));
    out.extend(check("siren", &store, &[x], opts, |g, v| {
        let z = net.forward(g, v[0])?;
        project(g, z, 33)
    })?);

    let mut store = ParamStore::new();
    let ecfg = EncoderConfig { feat_channels: 6, num_blocks: 2, ..EncoderConfig::default() };
    let enc = Encoder::new(&mut store, &ecfg, &mut rng)?;
    let frames = Leaf::new("frames", vec![6, 4, 5], uniform(120, 0.0, 1.0, 34));
    out.extend(check("encoder", &store, &[frames], opts, |g, v| {
        let z = enc.forward(g, v[0])?;
        project(g, z, 35)
    })?);

    for (label, cfg) in [
        ("spatial_inr", SpatialInrConfig { hidden: vec![8], out_dim: 4, ..SpatialInrConfig::default() }),
        (
            "spatial_inr_ensemble",
            SpatialInrConfig { hidden: vec![8], out_dim: 4, local_ensemble: true, cell_decode: true, ..SpatialInrConfig::default() },
        ),
    ] {
        let mut store = ParamStore::new();
        let net = SpatialInr::new(&mut store, &cfg, 3, (30.0, 1.0), &mut rng);
        let grid = Leaf::new("grid", vec![3, 4, 4], uniform(48, -1.0, 1.0, 36));
        let coords = Leaf::new("coords", vec![4, 2], smooth_coords(4, 4, 4, 0.01, 37));
        out.extend(check(label, &store, &[grid, coords], opts, |g, v| {
            let z = net.query(g, v[0], v[1], [0.5, 0.5])?;
            project(g, z, 38)
        })?);
    }

    let mut store = ParamStore::new();
    let tnet = TemporalInr::new(&mut store, "temporal_inr", 4, 4, &[8, 8], (30.0, 1.0), 0.1, &mut rng);
    let feat = Leaf::new("feature", vec![5, 4], uniform(20, -1.0, 1.0, 39));
    let xt = Leaf::new("xt", vec![5, 1], uniform(5, 0.0, 1.0, 40));
    out.extend(check("temporal_inr", &store, &[feat, xt], opts, |g, v| {
        let z = tnet.forward_with_time(g, v[0], v[1])?;
        project(g, z, 41)
    })?);

    let frame = |seed| FeatureGrid::new(3, 4, 4, uniform(48, 0.0, 1.0, seed)).expect("dims");
    let (a, b) = (frame(42), frame(43));
    let stacked = stack_frames(&a, &b)?;
    let target = uniform(9, 0.0, 1.0, 44);
    let coords: Vec<f64> = vec![0.13, -0.41, -0.66, 0.72, 0.38, 0.27];
    let mut cases: Vec<(String, ModelConfig)> = ["full", "f", "m", "s", "f+s"]
        .iter()
        .map(|t| (format!("decode[{t}]"), micro_model_config(AblationFlags::from_variant(t).expect("tag"), true)))
        .collect();
    cases.push(("decode[single_flow]".into(), micro_model_config(AblationFlags::default(), false)));
    let mut tiny = ModelConfig::tiny();
    tiny.temporal.output_init_scale = 0.1;
    cases.push(("decode[tiny]".into(), tiny));
    for (label, cfg) in cases {
        let model = Model::new(&cfg, 45)?;
        let leaves = [Leaf::new("frames", vec![6, 4, 4], stacked.data.clone())];
        out.extend(check(&label, &model.params, &leaves, opts, |g, v| {
            let grid = model.encoder.forward(g, v[0])?;
            let i0 = g.constant(vec![3, 4, 4], a.data.clone());
            let i1 = g.constant(vec![3, 4, 4], b.data.clone());
            let scene = SceneVars { grid, i0, i1 };
            let c = g.constant(vec![3, 2], coords.clone());
            let y = model.decode_times(g, scene, c, &[0.35], [0.5, 0.5])?[0];
            let t = g.constant(vec![3, 3], target.clone());
            charbonnier_loss(g, y, t, CHARBONNIER_EPS)
        })?);
    }
    Ok(())
}

/// Finite-difference checks of every differentiable operation and of the
/// composed networks.
pub fn run_suite(tolerance: f64) -> Result<SuiteReport> {
    run_suite_with(&FdOptions::default(), tolerance)
}

pub fn run_suite_with(opts: &FdOptions, tolerance: f64) -> Result<SuiteReport> {
    let opts = *opts;
    let mut checks = Vec::new();
    elementary(&opts, &mut checks)?;
    composite(&FdOptions { max_entries: 6, ..opts }, &mut checks)?;
    Ok(SuiteReport { checks, tolerance })
}
