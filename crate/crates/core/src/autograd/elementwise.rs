use super::{Graph, InputGrads, Op, OpKind, Var};
use crate::error::Result;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum UnaryKind {
    Exp,
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    /// `(e^z - 1) / z`, the zero-order-hold input gain.
    Phi1,
    Scale(f64),
    /// Caller-supplied function and derivative (used for negative controls).
    Custom {
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl UnaryKind {
    pub(super) fn op_kind(self) -> Option<OpKind> {
        Some(match self {
            UnaryKind::Exp => OpKind::Exp,
            UnaryKind::Sigmoid => OpKind::Sigmoid,
            UnaryKind::Relu => OpKind::Relu,
            UnaryKind::Silu => OpKind::Silu,
            UnaryKind::Softplus => OpKind::Softplus,
            UnaryKind::Phi1 => OpKind::Phi1,
            UnaryKind::Scale(_) => OpKind::Scale,
            UnaryKind::Custom { .. } => return None,
        })
    }

    fn name(self) -> &'static str {
        self.op_kind().map_or("custom", OpKind::name)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Phi1 => phi1(x),
            UnaryKind::Scale(c) => c * x,
            UnaryKind::Custom { f, .. } => f(x),
        }
    }

    /// Derivative at input `x`, given the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Phi1 => phi1_derivative(x),
            UnaryKind::Scale(c) => c,
            UnaryKind::Custom { df, .. } => df(x),
        }
    }
}

impl BinaryKind {
    pub(super) fn op_kind(self) -> OpKind {
        match self {
            BinaryKind::Add => OpKind::Add,
            BinaryKind::Sub => OpKind::Sub,
            BinaryKind::Mul => OpKind::Mul,
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Below this magnitude `phi1` switches to its Taylor polynomial.
pub const PHI1_TAYLOR_THRESHOLD: f64 = 1e-6;

/// `(e^z - 1) / z`, continuous at 0 where it equals 1.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < PHI1_TAYLOR_THRESHOLD {
        phi1_taylor(z)
    } else {
        z.exp_m1() / z
    }
}

pub fn phi1_taylor(z: f64) -> f64 {
    1.0 + z / 2.0 + z * z / 6.0
}

pub fn phi1_derivative(z: f64) -> f64 {
    // The closed form cancels badly near 0; the series converges fast there.
    if z.abs() < 1e-2 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

impl Graph {
    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Unary { x, kind }, kind.name())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn phi1(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Phi1)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn custom_unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary(x, UnaryKind::Custom { f, df })
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::from_vec(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![0.0; shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = kind.apply(da[i], db[j]));
            Tensor::from_vec(&shape, data)?
        };
        self.push(value, Op::Binary { a, b, kind }, kind.op_kind().name())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub(super) fn unary_backward(&self, x: Var, kind: UnaryKind, out: &Tensor, grad: &[f64]) -> InputGrads {
        let xs = self.value(x).data();
        let gx = xs
            .iter()
            .zip(out.data())
            .zip(grad)
            .map(|((&xv, &yv), &g)| g * kind.derivative(xv, yv))
            .collect();
        vec![(x, gx)]
    }

    pub(super) fn binary_backward(&self, a: Var, b: Var, kind: BinaryKind, out: &Tensor, grad: &[f64]) -> InputGrads {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = out.shape();
        let (ga_full, gb_full): (Vec<f64>, Vec<f64>) = match kind {
            BinaryKind::Add => (grad.to_vec(), grad.to_vec()),
            BinaryKind::Sub => (grad.to_vec(), grad.iter().map(|g| -g).collect()),
            BinaryKind::Mul => {
                let sa = broadcast_strides(ta.shape(), shape);
                let sb = broadcast_strides(tb.shape(), shape);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; grad.len()];
                let mut gb = vec![0.0; grad.len()];
                for_each_broadcast(shape, &sa, &sb, |o, i, j| {
                    ga[o] = grad[o] * db[j];
                    gb[o] = grad[o] * da[i];
                });
                (ga, gb)
            }
        };
        vec![
            (a, reduce_to_shape(&ga_full, shape, ta.shape())),
            (b, reduce_to_shape(&gb_full, shape, tb.shape())),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(kind: UnaryKind, x: f64) -> f64 {
        kind.apply(x)
    }

    #[test]
    fn activation_values() {
        assert_eq!(eval(UnaryKind::Sigmoid, 0.0), 0.5);
        assert_eq!(eval(UnaryKind::Silu, 0.0), 0.0);
        assert_eq!(eval(UnaryKind::Relu, -3.0), 0.0);
        // ln(1 + e^0)
        let ln2 = (1.0f64 + 0.0f64.exp()).ln();
        assert!((eval(UnaryKind::Softplus, 0.0) - ln2).abs() < 1e-15);
        assert!((ln2 - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable_in_the_tails() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn phi1_branches_agree_at_threshold() {
        for z in [PHI1_TAYLOR_THRESHOLD, -PHI1_TAYLOR_THRESHOLD] {
            let exact = z.exp_m1() / z;
            assert!((exact - phi1_taylor(z)).abs() < 1e-12);
        }
        assert_eq!(phi1(0.0), 1.0);
    }

    #[test]
    fn phi1_derivative_is_continuous_across_series_switch() {
        for z in [1e-2f64, -1e-2] {
            let closed = (z * z.exp() - z.exp_m1()) / (z * z);
            let below = phi1_derivative(z * (1.0 - 1e-12));
            assert!((closed - below).abs() < 1e-10, "{closed} vs {below}");
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_tiling() {
        let mut g = Graph::new();
        let a = Tensor::from_vec(&[2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(&[4, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let sum = g.add(va, vb).unwrap();
        let prod = g.mul(va, vb).unwrap();
        assert_eq!(g.shape(sum), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let (x, y) = (a.at(&[i, 0, k]), b.at(&[j, 0]));
                    assert_eq!(g.value(sum).at(&[i, j, k]), x + y);
                    assert_eq!(g.value(prod).at(&[i, j, k]), x * y);
                }
            }
        }
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        assert!(g.add(a, b).is_err());
    }
}
