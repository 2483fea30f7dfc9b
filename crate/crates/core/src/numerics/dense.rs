use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sine,
    None,
}

/// Affine layer followed by `sin(frequency · ·)` or nothing.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub frequency: f64,
}

impl DenseLayer {
    /// Registers `{prefix}.weight` and `{prefix}.bias`, weights uniform in
    /// `[-bound, bound]`, biases uniform in `[-1/sqrt(in), 1/sqrt(in)]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        frequency: f64,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let bb = 1.0 / (in_dim as f64).sqrt();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-bb..=bb)).collect();
        let weight = store.insert(
            format!("{prefix}.weight"),
            Tensor::new(vec![out_dim, in_dim], w).expect("layer dims"),
        );
        let bias = store.insert(
            format!("{prefix}.bias"),
            Tensor::new(vec![out_dim], b).expect("layer dims"),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
            frequency,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, cols) = g.dims2(x, "dense")?;
        if cols != self.in_dim {
            return Err(Error::Dimension {
                op: "dense",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.linear(x, w, b)?;
        Ok(match self.activation {
            Activation::Sine => g.sin(z, self.frequency),
            Activation::None => z,
        })
    }
}

/// Layer sizes and frequencies of a sine-activated MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct SirenSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub first_omega: f64,
    pub hidden_omega: f64,
}

/// Sine-activated hidden layers and a linear output layer.
///
/// First layer weights are uniform in `±1/in`; later layers in
/// `±sqrt(6/in)/ω` where ω is the hidden frequency.
#[derive(Debug, Clone)]
pub struct Siren {
    pub layers: Vec<DenseLayer>,
}

impl Siren {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &SirenSpec,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut in_dim = spec.in_dim;
        for (i, &h) in spec.hidden.iter().enumerate() {
            let (omega, bound) = if i == 0 {
                (spec.first_omega, 1.0 / in_dim as f64)
            } else {
                (spec.hidden_omega, hidden_bound(in_dim, spec.hidden_omega))
            };
            layers.push(DenseLayer::new(
                store,
                &format!("{prefix}.{i}"),
                in_dim,
                h,
                Activation::Sine,
                omega,
                bound,
                rng,
            ));
            in_dim = h;
        }
        let bound = if spec.hidden.is_empty() {
            1.0 / in_dim as f64
        } else {
            hidden_bound(in_dim, spec.hidden_omega)
        };
        layers.push(DenseLayer::new(
            store,
            &format!("{prefix}.{}", spec.hidden.len()),
            in_dim,
            spec.out_dim,
            Activation::None,
            1.0,
            bound,
            rng,
        ));
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty")
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

fn hidden_bound(in_dim: usize, omega: f64) -> f64 {
    (6.0 / in_dim as f64).sqrt() / omega
}
