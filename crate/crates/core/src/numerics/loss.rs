use super::graph::{Grads, Graph, Op, Values, Var};
use crate::error::{Error, Result};

/// Charbonnier epsilon used throughout training.
pub const CHARBONNIER_EPS: f64 = 1e-3;

struct Charbonnier {
    pred: Var,
    target: Var,
    eps: f64,
}

impl Op for Charbonnier {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (p, t) = (values.get(self.pred), values.get(self.target));
        let scale = dy[0] / p.len() as f64;
        let eps2 = self.eps * self.eps;
        let local: Vec<f64> = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                let d = a - b;
                scale * d / (d * d + eps2).sqrt()
            })
            .collect();
        grads.add(self.pred, &local);
        if let Some(dt) = grads.slot(self.target) {
            dt.iter_mut().zip(&local).for_each(|(d, g)| *d -= g);
        }
    }
}

/// Mean of `sqrt((pred - target)² + eps²)`.
///
/// Evaluated as `eps + mean(d² / (sqrt(d² + eps²) + eps))`, so identical
/// inputs give exactly `eps`.
pub fn charbonnier_loss(g: &mut Graph<'_>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Dimension {
            op: "charbonnier",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("charbonnier eps must be positive, got {eps}")));
    }
    let value = charbonnier_value(g.value(pred), g.value(target), eps);
    Ok(g.push(
        vec![1],
        vec![value],
        &[pred, target],
        Charbonnier { pred, target, eps },
    ))
}

pub fn charbonnier_value(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let eps2 = eps * eps;
    let excess: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d2 = (a - b) * (a - b);
            d2 / ((d2 + eps2).sqrt() + eps)
        })
        .sum();
    eps + excess / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    #[test]
    fn identical_inputs_give_eps() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(vec![2, 3], vec![0.1, -4.0, 2.5, 1e6, 0.0, -0.3]);
        let t = g.constant(vec![2, 3], g.value(x).to_vec());
        let l = charbonnier_loss(&mut g, x, t, 1e-3).unwrap();
        assert_eq!(g.value(l)[0], 1e-3);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1], vec![3.0]);
        let t = g.constant(vec![1], vec![0.0]);
        let l = charbonnier_loss(&mut g, x, t, 1e-3).unwrap();
        assert!((g.value(l)[0] - (9.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((g.value(l)[0] - 3.000_000_17).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(vec![3], vec![0.0; 3]);
        let t = g.constant(vec![1, 3], vec![0.0; 3]);
        assert!(matches!(
            charbonnier_loss(&mut g, x, t, 1e-3),
            Err(Error::Dimension { .. })
        ));
    }
}
