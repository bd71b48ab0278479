//! Zero-order-hold discretization of a diagonal continuous SSM.
//!
//! Per diagonal element: `Abar = exp(Δ·a)` and
//! `Bbar = (exp(Δ·a) - 1) / (Δ·a) · Δ·B`, with the gain evaluated by a
//! Taylor polynomial when `|Δ·a|` is tiny.

use crate::autograd::{phi1, Graph, Var};
use crate::error::{invalid, mismatch, Error, Result};
use crate::tensor::Tensor;

fn check_shapes(delta: &[usize], a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let [n, l, d] = *delta else {
        return Err(mismatch("discretize_zoh delta", delta, &[0, 0, 0]));
    };
    let [ad, s] = *a else {
        return Err(invalid(
            "discretize_zoh",
            format!("A must be given as per-channel diagonals [D, S], got {a:?}"),
        ));
    };
    if ad != d {
        return Err(mismatch("discretize_zoh A", a, delta));
    }
    if b != [n, l, s] {
        return Err(mismatch("discretize_zoh B", b, &[n, l, s]));
    }
    Ok((n, l, d, s))
}

fn check_positive(delta: &Tensor) -> Result<()> {
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(invalid("discretize_zoh", format!("step Δ must be > 0, got {bad}")));
    }
    Ok(())
}

/// Extracts the diagonal of a square state matrix, rejecting any nonzero
/// off-diagonal entry.
pub fn diagonal_of(matrix: &Tensor) -> Result<Tensor> {
    let [rows, cols] = *matrix.shape() else {
        return Err(invalid("diagonal_of", "expected a square matrix"));
    };
    if rows != cols {
        return Err(invalid("diagonal_of", "expected a square matrix"));
    }
    for i in 0..rows {
        for j in 0..cols {
            if i != j && matrix.at(&[i, j]) != 0.0 {
                return Err(invalid("diagonal_of", format!("A[{i},{j}] is off-diagonal")));
            }
        }
    }
    Tensor::from_vec(&[rows], (0..rows).map(|i| matrix.at(&[i, i])).collect())
}

/// `delta[N, L, D]`, diagonal `a[D, S]`, `b[N, L, S]` → `(Abar, Bbar)`, each `[N, L, D, S]`.
pub fn discretize_zoh(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, l, d, s) = check_shapes(delta.shape(), a.shape(), b.shape())?;
    check_positive(delta)?;
    let mut abar = Vec::with_capacity(n * l * d * s);
    let mut bbar = Vec::with_capacity(n * l * d * s);
    for row in 0..n * l {
        for ch in 0..d {
            let dt = delta.data()[row * d + ch];
            for st in 0..s {
                let z = dt * a.data()[ch * s + st];
                abar.push(z.exp());
                bbar.push(phi1(z) * dt * b.data()[row * s + st]);
            }
        }
    }
    let shape = [n, l, d, s];
    let abar = Tensor::from_vec(&shape, abar)?;
    let bbar = Tensor::from_vec(&shape, bbar)?;
    if !abar.is_finite() || !bbar.is_finite() {
        return Err(Error::NonFinite("discretize_zoh"));
    }
    Ok((abar, bbar))
}

impl Graph {
    /// Differentiable [`discretize_zoh`], composed from broadcast primitives.
    pub fn discretize_zoh(&mut self, delta: Var, a: Var, b: Var) -> Result<(Var, Var)> {
        let (n, l, d, s) = check_shapes(self.shape(delta), self.shape(a), self.shape(b))?;
        check_positive(self.value(delta))?;
        let step = self.reshape(delta, &[n, l, d, 1])?;
        let z = self.mul(step, a)?;
        let abar = self.exp(z)?;
        let gain = self.phi1(z)?;
        let b4 = self.reshape(b, &[n, l, 1, s])?;
        let step_b = self.mul(step, b4)?;
        let bbar = self.mul(gain, step_b)?;
        Ok((abar, bbar))
    }
}
