use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, Result};
use crate::tensor::{strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

impl Graph {
    /// Average or max over `axes`; reduced extents become 1. Max pooling
    /// routes its gradient to the first maximal element in row-major order.
    pub fn pool(&mut self, x: Var, axes: &[usize], kind: PoolKind) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        if axes.is_empty() {
            return Err(invalid("pool", "axis set is empty"));
        }
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(invalid("pool", format!("bad axis {a} for rank {rank}")));
            }
            if tx.shape()[a] == 0 {
                return Err(invalid("pool", format!("axis {a} has zero extent")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = tx
            .shape()
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let out_strides: Vec<usize> = strides(&out_shape)
            .into_iter()
            .zip(&reduced)
            .map(|(s, &r)| if r { 0 } else { s })
            .collect();
        let count = tx.numel() / out_shape.iter().product::<usize>().max(1);

        let mut target = Vec::with_capacity(tx.numel());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..tx.numel() {
            target.push(offset);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += out_strides[axis];
                if index[axis] < tx.shape()[axis] {
                    break;
                }
                offset -= out_strides[axis] * tx.shape()[axis];
                index[axis] = 0;
            }
        }

        let out_numel: usize = out_shape.iter().product();
        let xd = tx.data();
        let mut out = vec![0.0; out_numel];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Avg => {
                for (i, &t) in target.iter().enumerate() {
                    out[t] += xd[i];
                }
                out.iter_mut().for_each(|v| *v /= count as f64);
            }
            PoolKind::Max => {
                argmax = vec![usize::MAX; out_numel];
                for (i, &t) in target.iter().enumerate() {
                    if argmax[t] == usize::MAX || xd[i] > out[t] {
                        out[t] = xd[i];
                        argmax[t] = i;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let name = match kind {
            PoolKind::Avg => "avg_pool",
            PoolKind::Max => "max_pool",
        };
        self.push(
            value,
            Op::Pool {
                x,
                kind,
                target,
                argmax,
                count,
            },
            name,
        )
    }

    pub fn avg_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.pool(x, axes, PoolKind::Avg)
    }

    pub fn max_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.pool(x, axes, PoolKind::Max)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, "mean")
    }

    pub(super) fn pool_backward(
        &self,
        x: Var,
        kind: PoolKind,
        target: &[usize],
        argmax: &[usize],
        count: usize,
        grad: &[f64],
    ) -> InputGrads {
        let mut gx = vec![0.0; target.len()];
        match kind {
            PoolKind::Avg => {
                for (g, &t) in gx.iter_mut().zip(target) {
                    *g = grad[t] / count as f64;
                }
            }
            PoolKind::Max => {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += grad[o];
                }
            }
        }
        vec![(x, gx)]
    }
}
