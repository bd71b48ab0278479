use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Affine map over the last axis: `x[..., din] · w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 {
            return Err(invalid("linear", "weight must be rank 2 and input rank >= 1"));
        }
        let din = *tx.shape().last().unwrap();
        let (wi, dout) = (tw.shape()[0], tw.shape()[1]);
        if din != wi {
            return Err(mismatch("linear", tx.shape(), tw.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(mismatch("linear bias", self.value(b).shape(), &[dout]));
            }
        }
        let rows = tx.numel() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        let (xd, wd) = (tx.data(), tw.data());
        for r in 0..rows {
            let orow = &mut out[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                orow.copy_from_slice(self.value(b).data());
            }
            for (k, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
                let wrow = &wd[k * dout..(k + 1) * dout];
                orow.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xv * wv);
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::from_vec(&shape, out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    pub(super) fn linear_backward(&self, x: Var, w: Var, b: Option<Var>, grad: &[f64]) -> InputGrads {
        let (tx, tw) = (self.value(x), self.value(w));
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / din.max(1);
        let (xd, wd) = (tx.data(), tw.data());
        let mut gx = vec![0.0; tx.numel()];
        let mut gw = vec![0.0; tw.numel()];
        for r in 0..rows {
            let grow = &grad[r * dout..(r + 1) * dout];
            for k in 0..din {
                let wrow = &wd[k * dout..(k + 1) * dout];
                gx[r * din + k] = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
                let xv = xd[r * din + k];
                gw[k * dout..(k + 1) * dout]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(acc, g)| *acc += xv * g);
            }
        }
        let mut grads = vec![(x, gx), (w, gw)];
        if let Some(b) = b {
            let mut gb = vec![0.0; dout];
            for r in 0..rows {
                gb.iter_mut()
                    .zip(&grad[r * dout..(r + 1) * dout])
                    .for_each(|(acc, g)| *acc += g);
            }
            grads.push((b, gb));
        }
        grads
    }
}
