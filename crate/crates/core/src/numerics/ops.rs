//! Elementary differentiable operations on 2-D activations.

use std::sync::atomic::{AtomicBool, Ordering};

use super::fastmath;
use super::graph::{Grads, Graph, Op, Values, Var};
use crate::error::{Error, Result};

static CORRUPT_SINE_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Fault injection for the gradient checker: perturbs the sine backward rule
/// so a finite-difference suite can be shown to catch it.
pub fn set_corrupt_sine_backward(on: bool) {
    CORRUPT_SINE_BACKWARD.store(on, Ordering::SeqCst);
}

/// `C = alpha * A * B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs + 1
    };
    assert!(k == 0 || a.len() >= span(m, k, a_strides), "gemm: A too short");
    assert!(k == 0 || b.len() >= span(k, n, b_strides), "gemm: B too short");
    assert!(c.len() >= span(m, n, c_strides), "gemm: C too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

struct Linear {
    x: Var,
    w: Var,
    b: Var,
}

impl Op for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (n, din) = (values.shape(self.x)[0], values.shape(self.x)[1]);
        let dout = values.shape(self.w)[0];
        if let Some(dx) = grads.slot(self.x) {
            let w = values.get(self.w);
            gemm(n, dout, din, 1.0, dy, (dout, 1), w, (din, 1), 1.0, dx, (din, 1));
        }
        if let Some(dw) = grads.slot(self.w) {
            let x = values.get(self.x);
            gemm(dout, n, din, 1.0, dy, (1, dout), x, (din, 1), 1.0, dw, (din, 1));
        }
        if let Some(db) = grads.slot(self.b) {
            for row in dy.chunks_exact(dout) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
    }
}

struct Sine {
    x: Var,
    omega: f64,
    cos: Vec<f64>,
}

impl Op for Sine {
    fn name(&self) -> &'static str {
        "sine"
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let mut scale = self.omega;
        if CORRUPT_SINE_BACKWARD.load(Ordering::Relaxed) {
            scale *= 1.01;
        }
        if let Some(dx) = grads.slot(self.x) {
            for ((d, &g), &c) in dx.iter_mut().zip(dy).zip(&self.cos) {
                *d += scale * c * g;
            }
        }
    }
}

struct Relu {
    x: Var,
}

impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let x = values.get(self.x);
        if let Some(dx) = grads.slot(self.x) {
            for ((d, &g), &xi) in dx.iter_mut().zip(dy).zip(x) {
                if xi > 0.0 {
                    *d += g;
                }
            }
        }
    }
}

struct Add {
    a: Var,
    b: Var,
    sign: f64,
}

impl Op for Add {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 {
            "add"
        } else {
            "sub"
        }
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        grads.add(self.a, dy);
        if let Some(db) = grads.slot(self.b) {
            db.iter_mut().zip(dy).for_each(|(d, g)| *d += self.sign * g);
        }
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let (av, bv) = (values.get(self.a), values.get(self.b));
        if let Some(da) = grads.slot(self.a) {
            for ((d, &g), &b) in da.iter_mut().zip(dy).zip(bv) {
                *d += g * b;
            }
        }
        if let Some(db) = grads.slot(self.b) {
            for ((d, &g), &a) in db.iter_mut().zip(dy).zip(av) {
                *d += g * a;
            }
        }
    }
}

struct Scale {
    x: Var,
    c: f64,
}

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        if let Some(dx) = grads.slot(self.x) {
            dx.iter_mut().zip(dy).for_each(|(d, g)| *d += self.c * g);
        }
    }
}

struct RowScale {
    x: Var,
    weights: Vec<f64>,
}

impl Op for RowScale {
    fn name(&self) -> &'static str {
        "row_scale"
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let cols = dy.len() / self.weights.len();
        if let Some(dx) = grads.slot(self.x) {
            for ((drow, grow), &w) in dx
                .chunks_exact_mut(cols)
                .zip(dy.chunks_exact(cols))
                .zip(&self.weights)
            {
                drow.iter_mut().zip(grow).for_each(|(d, g)| *d += w * g);
            }
        }
    }
}

struct ConcatCols {
    parts: Vec<(Var, usize)>,
}

impl Op for ConcatCols {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let total: usize = self.parts.iter().map(|p| p.1).sum();
        let mut offset = 0;
        for &(v, cols) in &self.parts {
            if let Some(dv) = grads.slot(v) {
                for (drow, grow) in dv.chunks_exact_mut(cols).zip(dy.chunks_exact(total)) {
                    drow.iter_mut()
                        .zip(&grow[offset..offset + cols])
                        .for_each(|(d, g)| *d += g);
                }
            }
            offset += cols;
        }
    }
}

struct SliceCols {
    x: Var,
    start: usize,
    cols: usize,
}

impl Op for SliceCols {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let total = values.shape(self.x)[1];
        if let Some(dx) = grads.slot(self.x) {
            for (drow, grow) in dx.chunks_exact_mut(total).zip(dy.chunks_exact(self.cols)) {
                drow[self.start..self.start + self.cols]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(d, g)| *d += g);
            }
        }
    }
}

struct Sum {
    x: Var,
    scale: f64,
}

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _values: &Values<'_>, _out: Var, dy: &[f64], grads: &mut Grads<'_>) {
        let g = dy[0] * self.scale;
        if let Some(dx) = grads.slot(self.x) {
            dx.iter_mut().for_each(|d| *d += g);
        }
    }
}

impl Graph<'_> {
    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `x · wᵀ + b` for `x: [n × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.dims2(x, "linear")?;
        let (dout, win) = self.dims2(w, "linear")?;
        if win != din {
            return Err(Error::Dimension {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [dout] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: self.shape(b).to_vec(),
                rhs: vec![dout],
            });
        }
        let bias = self.value(b);
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            self.value(x),
            (din, 1),
            self.value(w),
            (1, din),
            1.0,
            &mut y,
            (dout, 1),
        );
        Ok(self.push(vec![n, dout], y, &[x, w, b], Linear { x, w, b }))
    }

    /// `sin(omega * x)` elementwise.
    pub fn sin(&mut self, x: Var, omega: f64) -> Var {
        let xv = self.value(x);
        let mut y = vec![0.0; xv.len()];
        let op = if self.requires_grad(x) {
            let mut cos = vec![0.0; xv.len()];
            fastmath::sin_cos_scaled(xv, omega, &mut y, &mut cos);
            Sine { x, omega, cos }
        } else {
            fastmath::sin_scaled(xv, omega, &mut y);
            Sine {
                x,
                omega,
                cos: Vec::new(),
            }
        };
        let shape = self.shape(x).to_vec();
        self.push(shape, y, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, &[x], Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, &[a, b], Add { a, b, sign: 1.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, &[a, b], Add { a, b, sign: -1.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, y, &[a, b], Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, y, &[x], Scale { x, c })
    }

    /// Multiplies row `i` of a 2-D `x` by the constant `weights[i]`.
    pub fn row_scale(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let (n, cols) = self.dims2(x, "row_scale")?;
        if weights.len() != n {
            return Err(Error::Dimension {
                op: "row_scale",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let mut y = self.value(x).to_vec();
        for (row, &w) in y.chunks_exact_mut(cols).zip(&weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(vec![n, cols], y, &[x], RowScale { x, weights }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let (n, _) = self.dims2(first, "concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != n {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            dims.push((p, c));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut y = Vec::with_capacity(n * total);
        for i in 0..n {
            for &(p, c) in &dims {
                y.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![n, total], y, parts, ConcatCols { parts: dims }))
    }

    /// Columns `start..start + cols` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, cols: usize) -> Result<Var> {
        let (n, total) = self.dims2(x, "slice")?;
        if cols == 0 || start + cols > total {
            return Err(Error::Index {
                index: start + cols,
                len: total,
            });
        }
        let y = self
            .value(x)
            .chunks_exact(total)
            .flat_map(|row| row[start..start + cols].iter().copied())
            .collect();
        Ok(self.push(vec![n, cols], y, &[x], SliceCols { x, start, cols }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], &[x], Sum { x, scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().sum();
        self.push(vec![1], vec![s / n], &[x], Sum { x, scale: 1.0 / n })
    }
}
