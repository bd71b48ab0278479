use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, mismatch, Result};
use crate::tensor::{for_each_broadcast, split_at_axis, strides, Tensor};

/// Source offset of every output element of a permutation, in output order.
fn permute_sources(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let own = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let zeros = vec![0; perm.len()];
    let mut sources = vec![0; shape.iter().product()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| sources[o] = i);
    (out_shape, sources)
}

/// Copies `len` rows of `inner` elements per outer block from `src` rows
/// selected by `row(k)` into consecutive rows of the result.
fn take_rows(data: &[f64], outer: usize, n: usize, inner: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * rows.len() * inner);
    for o in 0..outer {
        for &r in rows {
            let start = (o * n + r) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    out
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape { x }, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.rank()];
        if perm.len() != tx.rank() {
            return Err(invalid("permute", format!("{perm:?} for rank {}", tx.rank())));
        }
        for &p in perm {
            if p >= tx.rank() || seen[p] {
                return Err(invalid("permute", format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let (out_shape, sources) = permute_sources(tx.shape(), perm);
        let data = sources.iter().map(|&i| tx.data()[i]).collect();
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, "permute")
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let agrees =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || start + len > tx.shape()[axis] {
            return Err(invalid(
                "slice",
                format!("{start}+{len} along axis {axis} of {:?}", tx.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(tx.shape(), axis);
        let rows: Vec<usize> = (start..start + len).collect();
        let data = take_rows(tx.data(), outer, n, inner, &rows);
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_vec(&shape, data)?;
        self.push(value, Op::Slice { x, axis, start }, "slice")
    }

    /// Cuts `x` along `axis` into consecutive pieces of the given lengths.
    pub fn split(&mut self, x: Var, axis: usize, lengths: &[usize]) -> Result<Vec<Var>> {
        let shape = self.value(x).shape();
        if axis >= shape.len() || lengths.iter().sum::<usize>() != shape[axis] {
            return Err(invalid(
                "split",
                format!("lengths {lengths:?} along axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(lengths.len());
        for &len in lengths {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid("reverse", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_at_axis(tx.shape(), axis);
        let rows: Vec<usize> = (0..n).rev().collect();
        let data = take_rows(tx.data(), outer, n, inner, &rows);
        let value = Tensor::from_vec(tx.shape(), data)?;
        self.push(value, Op::Reverse { x, axis }, "reverse")
    }

    /// Selects positions `index` along `axis` (a permutation when `index`
    /// is one); gradients scatter-add back.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid("gather", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_at_axis(tx.shape(), axis);
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(invalid("gather", format!("index {bad} >= extent {n}")));
        }
        let data = take_rows(tx.data(), outer, n, inner, index);
        let mut shape = tx.shape().to_vec();
        shape[axis] = index.len();
        let value = Tensor::from_vec(&shape, data)?;
        self.push(
            value,
            Op::Gather {
                x,
                axis,
                index: index.to_vec(),
            },
            "gather",
        )
    }

    pub(super) fn permute_backward(&self, x: Var, perm: &[usize], grad: &[f64]) -> InputGrads {
        let (_, sources) = permute_sources(self.value(x).shape(), perm);
        let mut gx = vec![0.0; grad.len()];
        for (o, &i) in sources.iter().enumerate() {
            gx[i] = grad[o];
        }
        vec![(x, gx)]
    }

    pub(super) fn concat_backward(&self, inputs: &[Var], axis: usize, out: &Tensor, grad: &[f64]) -> InputGrads {
        let (outer, total, inner) = split_at_axis(out.shape(), axis);
        let mut offset = 0;
        inputs
            .iter()
            .map(|&v| {
                let n = self.value(v).shape()[axis];
                let rows: Vec<usize> = (offset..offset + n).collect();
                offset += n;
                (v, take_rows(grad, outer, total, inner, &rows))
            })
            .collect()
    }

    pub(super) fn slice_backward(&self, x: Var, axis: usize, start: usize, out: &Tensor, grad: &[f64]) -> InputGrads {
        let (outer, n, inner) = split_at_axis(self.value(x).shape(), axis);
        let len = out.shape()[axis];
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let dst = (o * n + start) * inner;
            let src = o * len * inner;
            gx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
        }
        vec![(x, gx)]
    }

    pub(super) fn reverse_backward(&self, x: Var, axis: usize, grad: &[f64]) -> InputGrads {
        let (outer, n, inner) = split_at_axis(self.value(x).shape(), axis);
        let rows: Vec<usize> = (0..n).rev().collect();
        vec![(x, take_rows(grad, outer, n, inner, &rows))]
    }

    pub(super) fn gather_backward(&self, x: Var, axis: usize, index: &[usize], grad: &[f64]) -> InputGrads {
        let (outer, n, inner) = split_at_axis(self.value(x).shape(), axis);
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for (k, &r) in index.iter().enumerate() {
                let dst = (o * n + r) * inner;
                let src = (o * index.len() + k) * inner;
                gx[dst..dst + inner]
                    .iter_mut()
                    .zip(&grad[src..src + inner])
                    .for_each(|(a, g)| *a += g);
            }
        }
        vec![(x, gx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{rngs::StdRng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut StdRng::seed_from_u64(seed))
    }

    #[test]
    fn permute_moves_elements() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        let t = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn split_rejects_bad_lengths() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 5]));
        assert!(g.split(x, 1, &[2, 2]).is_err());
        assert!(g.reshape(x, &[3, 3]).is_err());
        let y = g.constant(Tensor::ones(&[3, 4]));
        assert!(g.concat(&[x, y], 1).is_err());
    }

    #[test]
    fn gather_backward_scatter_adds_repeats() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.gather(x, 0, &[2, 2, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 1.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    proptest! {
        #[test]
        fn restructure_inverses_are_bitwise_identity(
            n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4,
            axis in 0usize..4, cut in 0usize..4, seed in 0u64..1000,
        ) {
            let shape = [n, c, h, w];
            let x = random(&shape, seed);
            let mut g = Graph::new();
            let vx = g.constant(x.clone());

            let r = g.reverse(vx, axis).unwrap();
            let rr = g.reverse(r, axis).unwrap();
            prop_assert_eq!(g.value(rr), &x);

            let nhwc = g.permute(vx, &[0, 2, 3, 1]).unwrap();
            let back = g.permute(nhwc, &[0, 3, 1, 2]).unwrap();
            prop_assert_eq!(g.value(back), &x);

            let flat = g.reshape(vx, &[n * c, h * w]).unwrap();
            let unflat = g.reshape(flat, &shape).unwrap();
            prop_assert_eq!(g.value(unflat), &x);

            let y = random(&shape, seed + 1);
            let vy = g.constant(y.clone());
            let joined = g.concat(&[vx, vy], axis).unwrap();
            let parts = g.split(joined, axis, &[shape[axis], shape[axis]]).unwrap();
            prop_assert_eq!(g.value(parts[0]), &x);
            prop_assert_eq!(g.value(parts[1]), &y);

            let cut = cut.min(shape[axis]);
            let pieces = g.split(vx, axis, &[cut, shape[axis] - cut]).unwrap();
            let rejoined = g.concat(&pieces, axis).unwrap();
            prop_assert_eq!(g.value(rejoined), &x);

            let perm: Vec<usize> = (0..shape[axis]).rev().collect();
            let gathered = g.gather(vx, axis, &perm).unwrap();
            prop_assert_eq!(g.value(gathered), g.value(r));
        }
    }
}
