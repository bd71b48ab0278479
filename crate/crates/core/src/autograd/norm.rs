use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, mismatch, Result};
use crate::tensor::{split_at_axis, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

impl Graph {
    /// Normalizes every lane along `axis` to zero mean and unit (biased)
    /// variance, then applies the per-position affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid("layernorm", format!("eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid("layernorm", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_at_axis(tx.shape(), axis);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(mismatch("layernorm affine", tg.shape(), &[n]));
        }
        let xd = tx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let mean = (0..n).map(|c| xd[at(c)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|c| (xd[at(c)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for c in 0..n {
                    let xh = (xd[at(c)] - mean) * r;
                    xhat[at(c)] = xh;
                    out[at(c)] = tg.data()[c] * xh + tb.data()[c];
                }
            }
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
            "layernorm",
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn layernorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: &[f64],
        rstd: &[f64],
        grad: &[f64],
    ) -> InputGrads {
        let (outer, n, inner) = split_at_axis(self.value(x).shape(), axis);
        let gd = self.value(gamma).data();
        let mut gx = vec![0.0; grad.len()];
        let mut gg = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let (mut m1, mut m2) = (0.0, 0.0);
                for c in 0..n {
                    let dxh = grad[at(c)] * gd[c];
                    m1 += dxh;
                    m2 += dxh * xhat[at(c)];
                    gg[c] += grad[at(c)] * xhat[at(c)];
                    gb[c] += grad[at(c)];
                }
                m1 /= n as f64;
                m2 /= n as f64;
                let r = rstd[o * inner + i];
                for c in 0..n {
                    let dxh = grad[at(c)] * gd[c];
                    gx[at(c)] = r * (dxh - m1 - xhat[at(c)] * m2);
                }
            }
        }
        vec![(x, gx), (gamma, gg), (beta, gb)]
    }
}
