//! Motion-flow field: an MLP mapping a spatial feature and a time to two
//! displacement vectors (or one in single-flow mode).

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;
use crate::numerics::{Graph, ParamStore, Siren, SirenSpec, Var};
use crate::spatial_inr::QUERY_CHUNK;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalInrConfig {
    pub hidden: Vec<usize>,
    /// Two independent flows (four outputs) or one (two outputs).
    pub dual_flow: bool,
    /// Multiplier on the output layer's initial weight range; small values
    /// start training from near-zero motion.
    pub output_init_scale: f64,
}

impl Default for TemporalInrConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 256],
            dual_flow: true,
            output_init_scale: 0.01,
        }
    }
}

impl TemporalInrConfig {
    pub fn num_flows(&self) -> usize {
        if self.dual_flow {
            2
        } else {
            1
        }
    }
}

/// Per-query displacements in normalized units; `flow1` equals `flow0` in
/// single-flow mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionFlowPair {
    pub flow0: [f64; 2],
    pub flow1: [f64; 2],
}

/// An MLP over `[feature, xt]`. Its prefix names the checkpoint entries.
#[derive(Debug, Clone)]
pub struct TemporalInr {
    pub in_features: usize,
    pub out_dim: usize,
    pub net: Siren,
}

impl TemporalInr {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_dim: usize,
        hidden: &[usize],
        omegas: (f64, f64),
        output_init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let spec = SirenSpec {
            in_dim: in_features + 1,
            hidden: hidden.to_vec(),
            out_dim,
            first_omega: omegas.0,
            hidden_omega: omegas.1,
        };
        let net = Siren::new(store, prefix, &spec, rng);
        let w = net.output_layer().weight;
        store
            .get_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= output_init_scale);
        Self {
            in_features,
            out_dim,
            net,
        }
    }

    /// `feat: [n, in_features]`, `xt: [n, 1]` → `[n, out_dim]`.
    pub fn forward_with_time(&self, g: &mut Graph<'_>, feat: Var, xt: Var) -> Result<Var> {
        let x = g.concat_cols(&[feat, xt])?;
        self.net.forward(g, x)
    }

    /// Same time for every row.
    pub fn forward(&self, g: &mut Graph<'_>, feat: Var, xt: f64) -> Result<Var> {
        let (n, _) = g.dims2(feat, "temporal_inr")?;
        let t = g.constant(vec![n, 1], vec![xt; n]);
        self.forward_with_time(g, feat, t)
    }

    /// Inference over row-major features; `[n × out_dim]`.
    pub fn forward_values(&self, store: &ParamStore, feat: &[f64], xt: f64) -> Result<Vec<f64>> {
        let k = self.in_features;
        if !feat.len().is_multiple_of(k) {
            return Err(Error::Dimension {
                op: "temporal_inr",
                lhs: vec![feat.len()],
                rhs: vec![0, k],
            });
        }
        let mut out = Vec::with_capacity(feat.len() / k * self.out_dim);
        for chunk in feat.chunks(QUERY_CHUNK * k) {
            let mut g = Graph::inference(store);
            let f = g.constant(vec![chunk.len() / k, k], chunk.to_vec());
            let y = self.forward(&mut g, f, xt)?;
            out.extend_from_slice(g.value(y));
        }
        Ok(out)
    }

    /// Flow pairs for row-major spatial features.
    pub fn query_flow(&self, store: &ParamStore, feat: &[f64], xt: f64) -> Result<Vec<MotionFlowPair>> {
        let raw = self.forward_values(store, feat, xt)?;
        Ok(raw.chunks_exact(self.out_dim).map(to_pair).collect())
    }

    /// Flow field over a materialized spatial grid: `[out_dim × h × w]`.
    pub fn materialize_flow(&self, store: &ParamStore, spatial: &FeatureGrid, xt: f64) -> Result<FeatureGrid> {
        let raw = self.forward_values(store, &spatial.to_rows(), xt)?;
        FeatureGrid::from_rows(self.out_dim, spatial.height, spatial.width, &raw)
    }
}

pub(crate) fn to_pair(r: &[f64]) -> MotionFlowPair {
    let flow0 = [r[0], r[1]];
    let flow1 = if r.len() >= 4 { [r[2], r[3]] } else { flow0 };
    MotionFlowPair { flow0, flow1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, project, FdOptions, Leaf};
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn net(store: &mut ParamStore, dual: bool) -> TemporalInr {
        TemporalInr::new(store, "temporal_inr", 6, if dual { 4 } else { 2 }, &[16, 16], (30.0, 1.0), 1.0, &mut rng(1))
    }

    fn feats(n: usize, k: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n * k).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_network_gives_zero_flow() {
        let mut store = ParamStore::new();
        let t = net(&mut store, true);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let flows = t.query_flow(&store, &feats(5, 6, 2), 0.3).unwrap();
        assert!(flows.iter().all(|f| f.flow0 == [0.0, 0.0] && f.flow1 == [0.0, 0.0]));
        let field = t.materialize_flow(&store, &FeatureGrid::filled(6, 8, 8, 0.7), 0.5).unwrap();
        assert_eq!(field.shape(), [4, 8, 8]);
        assert!(field.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_flow_has_two_outputs() {
        let mut store = ParamStore::new();
        let t = net(&mut store, false);
        let f = t.query_flow(&store, &feats(3, 6, 3), 0.5).unwrap();
        assert!(f.iter().all(|p| p.flow0 == p.flow1));
        assert_eq!(t.forward_values(&store, &feats(3, 6, 3), 0.5).unwrap().len(), 6);
    }

    #[test]
    fn deterministic_and_continuous_in_time() {
        let mut store = ParamStore::new();
        let t = net(&mut store, true);
        let f = feats(4, 6, 4);
        let a = t.query_flow(&store, &f, 0.4).unwrap();
        assert_eq!(a, t.query_flow(&store, &f, 0.4).unwrap());
        let b = t.query_flow(&store, &f, 0.4 + 1e-6).unwrap();
        for (p, q) in a.iter().zip(&b) {
            for k in 0..2 {
                assert!((p.flow0[k] - q.flow0[k]).abs() < 1e-3);
                assert!((p.flow1[k] - q.flow1[k]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn materialize_matches_per_pixel_loop() {
        let mut store = ParamStore::new();
        let t = net(&mut store, true);
        let s = FeatureGrid::new(6, 3, 4, feats(12, 6, 5)).unwrap();
        let field = t.materialize_flow(&store, &s, 0.25).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let p = t.query_flow(&store, &s.vector(i, j), 0.25).unwrap()[0];
                assert_eq!(p.flow0, [field.get(0, i, j), field.get(1, i, j)]);
                assert_eq!(p.flow1, [field.get(2, i, j), field.get(3, i, j)]);
            }
        }
    }

    #[test]
    fn time_derivative_matches_finite_differences() {
        let mut store = ParamStore::new();
        let t = net(&mut store, true);
        let leaves = [
            Leaf::new("feature", vec![3, 6], feats(3, 6, 6)),
            Leaf::new("xt", vec![3, 1], vec![0.1, 0.5, 0.85]),
        ];
        let res = check("temporal_inr", &store, &leaves, &FdOptions::default(), |g, v| {
            let y = t.forward_with_time(g, v[0], v[1])?;
            project(g, y, 2)
        })
        .unwrap();
        for r in res {
            assert!(r.rel_error < 1e-4, "{r:?}");
        }
    }
}
