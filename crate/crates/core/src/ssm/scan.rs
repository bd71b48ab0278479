//! The discrete selective-SSM recurrence
//!
//! ```text
//! h_t = Abar_t ⊙ h_{t-1} + Bbar_t · x_t,   h_0 = 0
//! y_t = <C_t, h_t> + D ⊙ x_t
//! ```
//!
//! evaluated either step by step or as an associative scan over
//! `(a, b)` pairs with `(a1, b1) ⊗ (a2, b2) = (a2·a1, a2·b1 + b2)`.
//!
//! Layouts: `x[N, L, D]`, `Abar`/`Bbar[N, L, D, S]`, `C[N, L, S]`, `D_skip[D]`.

use num_traits::Float;
use rayon::prelude::*;

use crate::autograd::{Graph, Op, Var};
use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub nstate: usize,
}

impl ScanDims {
    pub fn from_shapes(
        x: &[usize],
        abar: &[usize],
        bbar: &[usize],
        c: &[usize],
        d_skip: Option<&[usize]>,
    ) -> Result<Self> {
        let [batch, len, channels] = *x else {
            return Err(mismatch("scan x", x, &[0, 0, 0]));
        };
        let [.., nstate] = *abar else {
            return Err(mismatch("scan Abar", abar, x));
        };
        let dims = Self {
            batch,
            len,
            channels,
            nstate,
        };
        if abar != [batch, len, channels, nstate] {
            return Err(mismatch("scan Abar", abar, x));
        }
        if bbar != abar {
            return Err(mismatch("scan Bbar", bbar, abar));
        }
        if c != [batch, len, nstate] {
            return Err(mismatch("scan C", c, abar));
        }
        if let Some(d) = d_skip {
            if d != [channels] {
                return Err(mismatch("scan D_skip", d, &[channels]));
            }
        }
        Ok(dims)
    }

    /// Multiply-adds of the recurrence: three per state element for the
    /// update, two for the readout and two for the skip term.
    pub fn flops(&self) -> u64 {
        (self.batch * self.len * self.channels) as u64 * (5 * self.nstate as u64 + 2)
    }
}

/// Borrowed operands of one scan.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub x: &'a [T],
    pub abar: &'a [T],
    pub bbar: &'a [T],
    pub c: &'a [T],
    pub d_skip: Option<&'a [T]>,
}

/// Output `y[N, L, D]` and every hidden state `h[N, L, D, S]`.
#[derive(Debug, Clone)]
pub struct ScanOutput<T> {
    pub y: Vec<T>,
    pub states: Vec<T>,
}

/// The brute-force step-by-step recurrence.
pub fn scan_sequential_raw<T: Float>(inp: ScanInputs<'_, T>) -> ScanOutput<T> {
    let ScanDims {
        batch,
        len,
        channels,
        nstate,
    } = inp.dims;
    let mut y = vec![T::zero(); batch * len * channels];
    let mut states = vec![T::zero(); batch * len * channels * nstate];
    let mut h = vec![T::zero(); channels * nstate];
    for n in 0..batch {
        h.fill(T::zero());
        for t in 0..len {
            let row = n * len + t;
            for d in 0..channels {
                let xv = inp.x[row * channels + d];
                let mut acc = T::zero();
                for s in 0..nstate {
                    let k = d * nstate + s;
                    let idx = row * channels * nstate + k;
                    h[k] = inp.abar[idx] * h[k] + inp.bbar[idx] * xv;
                    states[idx] = h[k];
                    acc = acc + inp.c[row * nstate + s] * h[k];
                }
                let skip = inp.d_skip.map_or(T::zero(), |ds| ds[d] * xv);
                y[row * channels + d] = acc + skip;
            }
        }
    }
    ScanOutput { y, states }
}

/// In-place inclusive Brent–Kung scan of `(a, b)` pairs under
/// `(a1, b1) ⊗ (a2, b2) = (a2·a1, a2·b1 + b2)`. Work O(L), depth O(log L);
/// the combine order is fixed, so results are reproducible.
pub fn associative_scan<T: Float>(a: &mut [T], b: &mut [T]) {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    if n < 2 {
        return;
    }
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            let j = i - stride;
            b[i] = a[i] * b[j] + b[i];
            a[i] = a[i] * a[j];
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            let j = i - stride;
            b[i] = a[i] * b[j] + b[i];
            a[i] = a[i] * a[j];
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Associative-scan evaluation. Inputs are transposed in one streaming pass
/// per batch element to `[D·S][L]` so that every `(channel, state)` lane is
/// contiguous, scanned, and streamed back. Lanes may be spread over the rayon
/// pool with `multithreaded`; each lane's combine order is fixed, so the
/// result does not depend on the thread count.
pub fn scan_parallel_raw<T: Float + Send + Sync>(inp: ScanInputs<'_, T>, multithreaded: bool) -> ScanOutput<T> {
    let ScanDims {
        batch,
        len,
        channels,
        nstate,
    } = inp.dims;
    let lanes = channels * nstate;
    let mut y = vec![T::zero(); batch * len * channels];
    let mut states = vec![T::zero(); batch * len * lanes];
    let mut a = vec![T::zero(); lanes * len];
    let mut b = vec![T::zero(); lanes * len];
    for n in 0..batch {
        for t in 0..len {
            let row = n * len + t;
            for d in 0..channels {
                let xv = inp.x[row * channels + d];
                for s in 0..nstate {
                    let lane = d * nstate + s;
                    let idx = row * lanes + lane;
                    a[lane * len + t] = inp.abar[idx];
                    b[lane * len + t] = inp.bbar[idx] * xv;
                }
            }
        }
        if multithreaded {
            a.par_chunks_mut(len)
                .zip(b.par_chunks_mut(len))
                .for_each(|(a, b)| associative_scan(a, b));
        } else {
            a.chunks_mut(len)
                .zip(b.chunks_mut(len))
                .for_each(|(a, b)| associative_scan(a, b));
        }
        for t in 0..len {
            let row = n * len + t;
            for d in 0..channels {
                let mut acc = T::zero();
                for s in 0..nstate {
                    let h = b[(d * nstate + s) * len + t];
                    states[row * lanes + d * nstate + s] = h;
                    acc = acc + inp.c[row * nstate + s] * h;
                }
                let xv = inp.x[row * channels + d];
                y[row * channels + d] = acc + inp.d_skip.map_or(T::zero(), |ds| ds[d] * xv);
            }
        }
    }
    ScanOutput { y, states }
}

/// Which evaluation strategy a scan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanKind {
    Sequential,
    #[default]
    Parallel,
}

fn inputs_of<'a>(
    x: &'a Tensor,
    abar: &'a Tensor,
    bbar: &'a Tensor,
    c: &'a Tensor,
    d_skip: Option<&'a Tensor>,
) -> Result<ScanInputs<'a, f64>> {
    let dims = ScanDims::from_shapes(
        x.shape(),
        abar.shape(),
        bbar.shape(),
        c.shape(),
        d_skip.map(Tensor::shape),
    )?;
    Ok(ScanInputs {
        dims,
        x: x.data(),
        abar: abar.data(),
        bbar: bbar.data(),
        c: c.data(),
        d_skip: d_skip.map(Tensor::data),
    })
}

fn run(kind: ScanKind, inp: ScanInputs<'_, f64>) -> ScanOutput<f64> {
    match kind {
        ScanKind::Sequential => scan_sequential_raw(inp),
        ScanKind::Parallel => scan_parallel_raw(inp, false),
    }
}

/// Step-by-step recurrence on tensors; the reference for every other path.
pub fn scan_sequential(
    x: &Tensor,
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: Option<&Tensor>,
) -> Result<Tensor> {
    let inp = inputs_of(x, abar, bbar, c, d_skip)?;
    Tensor::from_vec(x.shape(), scan_sequential_raw(inp).y)
}

/// Associative-scan evaluation on tensors.
pub fn scan_parallel(x: &Tensor, abar: &Tensor, bbar: &Tensor, c: &Tensor, d_skip: Option<&Tensor>) -> Result<Tensor> {
    let inp = inputs_of(x, abar, bbar, c, d_skip)?;
    Tensor::from_vec(x.shape(), scan_parallel_raw(inp, false).y)
}

impl Graph {
    /// Records the recurrence as one differentiable op.
    pub fn selective_scan(
        &mut self,
        x: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        d_skip: Option<Var>,
        kind: ScanKind,
    ) -> Result<Var> {
        let inp = inputs_of(
            self.value(x),
            self.value(abar),
            self.value(bbar),
            self.value(c),
            d_skip.map(|d| self.value(d)),
        )?;
        let out = run(kind, inp);
        let value = Tensor::from_vec(self.value(x).shape(), out.y)?;
        self.push(
            value,
            Op::SelectiveScan {
                x,
                abar,
                bbar,
                c,
                d_skip,
                states: out.states,
            },
            "selective_scan",
        )
    }
}

/// Reverse-time adjoint of the recurrence:
/// `g_t = dy_t · C_t + Abar_{t+1} ⊙ g_{t+1}`.
pub(crate) fn scan_backward(
    g: &Graph,
    [x, abar, bbar, c]: [Var; 4],
    d_skip: Option<Var>,
    states: &[f64],
    grad: &[f64],
) -> Vec<(Var, Vec<f64>)> {
    let (tx, ta, tb, tc) = (g.value(x), g.value(abar), g.value(bbar), g.value(c));
    let [batch, len, channels] = *tx.shape() else {
        unreachable!("validated in forward")
    };
    let nstate = tc.shape()[2];
    let (xd, ad, bd, cd) = (tx.data(), ta.data(), tb.data(), tc.data());
    let dsd = d_skip.map(|v| g.value(v).data());

    let mut gx = vec![0.0; xd.len()];
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let mut gc = vec![0.0; cd.len()];
    let mut gd = vec![0.0; channels];
    let mut adj = vec![0.0; channels * nstate];
    for n in 0..batch {
        adj.fill(0.0);
        for t in (0..len).rev() {
            let row = n * len + t;
            for d in 0..channels {
                let dy = grad[row * channels + d];
                let xv = xd[row * channels + d];
                let mut dx = dsd.map_or(0.0, |ds| ds[d] * dy);
                gd[d] += dy * xv;
                for s in 0..nstate {
                    let k = d * nstate + s;
                    let idx = row * channels * nstate + k;
                    let carry = if t + 1 < len {
                        ad[idx + channels * nstate] * adj[k]
                    } else {
                        0.0
                    };
                    adj[k] = dy * cd[row * nstate + s] + carry;
                    let prev = if t > 0 { states[idx - channels * nstate] } else { 0.0 };
                    ga[idx] = adj[k] * prev;
                    gb[idx] = adj[k] * xv;
                    dx += adj[k] * bd[idx];
                    gc[row * nstate + s] += dy * states[idx];
                }
                gx[row * channels + d] = dx;
            }
        }
    }
    let mut grads = vec![(x, gx), (abar, ga), (bbar, gb), (c, gc)];
    if let Some(ds) = d_skip {
        grads.push((ds, gd));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn random_problem(rng: &mut StdRng, dims: ScanDims) -> [Tensor; 5] {
        let ScanDims {
            batch: n,
            len: l,
            channels: d,
            nstate: s,
        } = dims;
        [
            Tensor::randn(&[n, l, d], 1.0, rng),
            Tensor::uniform(&[n, l, d, s], 0.0, 1.0, rng),
            Tensor::randn(&[n, l, d, s], 0.5, rng),
            Tensor::randn(&[n, l, s], 1.0, rng),
            Tensor::randn(&[d], 1.0, rng),
        ]
    }

    fn dims(batch: usize, len: usize, channels: usize, nstate: usize) -> ScanDims {
        ScanDims {
            batch,
            len,
            channels,
            nstate,
        }
    }

    #[test]
    fn single_step_is_readout_of_first_input() {
        let mut rng = StdRng::seed_from_u64(0);
        let [x, a, b, c, ds] = random_problem(&mut rng, dims(1, 1, 2, 3));
        let y = scan_sequential(&x, &a, &b, &c, Some(&ds)).unwrap();
        for d in 0..2 {
            let xv = x.at(&[0, 0, d]);
            let h: f64 = (0..3).map(|s| c.at(&[0, 0, s]) * b.at(&[0, 0, d, s]) * xv).sum();
            assert!((y.at(&[0, 0, d]) - (h + ds.data()[d] * xv)).abs() < 1e-14);
        }
        let yp = scan_parallel(&x, &a, &b, &c, Some(&ds)).unwrap();
        assert_eq!(y, yp);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let mut rng = StdRng::seed_from_u64(1);
        let [x, _, b, c, ds] = random_problem(&mut rng, dims(2, 5, 3, 4));
        let a = Tensor::zeros(b.shape());
        let y = scan_sequential(&x, &a, &b, &c, Some(&ds)).unwrap();
        for n in 0..2 {
            for t in 0..5 {
                for d in 0..3 {
                    let xv = x.at(&[n, t, d]);
                    let h: f64 = (0..4).map(|s| c.at(&[n, t, s]) * b.at(&[n, t, d, s]) * xv).sum();
                    let want = h + ds.data()[d] * xv;
                    assert!((y.at(&[n, t, d]) - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn zero_input_without_skip_is_zero() {
        let mut rng = StdRng::seed_from_u64(2);
        let [x, a, b, c, _] = random_problem(&mut rng, dims(1, 6, 2, 2));
        let x = Tensor::zeros(x.shape());
        let y = scan_parallel(&x, &a, &b, &c, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parallel_matches_sequential_over_random_instances() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..100 {
            let dm = dims(
                rng.random_range(1..=2),
                rng.random_range(1..=64),
                rng.random_range(1..=8),
                rng.random_range(1..=16),
            );
            let [x, a, b, c, ds] = random_problem(&mut rng, dm);
            let seq = scan_sequential(&x, &a, &b, &c, Some(&ds)).unwrap();
            let par = scan_parallel(&x, &a, &b, &c, Some(&ds)).unwrap();
            assert!(seq.max_abs_diff(&par).unwrap() < 1e-10);
        }
    }

    #[test]
    fn combine_is_associative() {
        let mut rng = StdRng::seed_from_u64(5);
        let combine = |(a1, b1): (f64, f64), (a2, b2): (f64, f64)| (a2 * a1, a2 * b1 + b2);
        for _ in 0..200 {
            let mut pair = || (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
            let (p, q, r) = (pair(), pair(), pair());
            let left = combine(combine(p, q), r);
            let right = combine(p, combine(q, r));
            assert!((left.0 - right.0).abs() < 1e-12);
            assert!((left.1 - right.1).abs() < 1e-12);
        }
    }

    #[test]
    fn threaded_groups_are_bitwise_identical() {
        let mut rng = StdRng::seed_from_u64(6);
        let [x, a, b, c, ds] = random_problem(&mut rng, dims(2, 33, 3, 4));
        let inp = inputs_of(&x, &a, &b, &c, Some(&ds)).unwrap();
        let single = scan_parallel_raw(inp, false);
        let multi = scan_parallel_raw(inp, true);
        assert_eq!(single.y, multi.y);
        assert_eq!(single.states, multi.states);
    }

    #[test]
    fn f32_kernel_tracks_f64() {
        let mut rng = StdRng::seed_from_u64(8);
        let [x, a, b, c, ds] = random_problem(&mut rng, dims(1, 40, 2, 3));
        let narrow = |t: &Tensor| t.data().iter().map(|&v| v as f32).collect::<Vec<f32>>();
        let (xf, af, bf, cf, df) = (narrow(&x), narrow(&a), narrow(&b), narrow(&c), narrow(&ds));
        let inp = ScanInputs {
            dims: dims(1, 40, 2, 3),
            x: &xf,
            abar: &af,
            bbar: &bf,
            c: &cf,
            d_skip: Some(&df),
        };
        let y32 = scan_parallel_raw(inp, false).y;
        let y64 = scan_sequential(&x, &a, &b, &c, Some(&ds)).unwrap();
        for (lo, hi) in y32.iter().zip(y64.data()) {
            assert!((*lo as f64 - hi).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_validation() {
        let x = Tensor::zeros(&[1, 4, 2]);
        let a = Tensor::zeros(&[1, 4, 2, 3]);
        let c_bad = Tensor::zeros(&[1, 4, 2]);
        assert!(scan_sequential(&x, &a, &a, &c_bad, None).is_err());
        let d_bad = Tensor::zeros(&[3]);
        let c = Tensor::zeros(&[1, 4, 3]);
        assert!(scan_parallel(&x, &a, &a, &c, Some(&d_bad)).is_err());
    }
}
