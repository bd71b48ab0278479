//! Four-direction 2-D scanning: a feature map is flattened along row-major
//! and column-major orders, each read forwards and backwards, scanned by its
//! own selective SSM, mapped back to the grid, summed and normalized.

use rand::Rng;

use super::{ScanKind, SsmConfig, SsmParams, SsmVars, SsmWeights};
use crate::autograd::{Graph, Var, DEFAULT_EPS};
use crate::error::{invalid, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::RowForward => "row-fwd",
            ScanDirection::RowBackward => "row-bwd",
            ScanDirection::ColForward => "col-fwd",
            ScanDirection::ColBackward => "col-bwd",
        }
    }
}

/// `perm[t]` is the row-major grid position visited at sequence step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub direction: ScanDirection,
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
}

impl ScanOrder {
    fn new(direction: ScanDirection, perm: Vec<usize>) -> Self {
        let mut inv_perm = vec![0; perm.len()];
        for (t, &p) in perm.iter().enumerate() {
            inv_perm[p] = t;
        }
        debug_assert!(inv_perm.iter().enumerate().all(|(p, &t)| perm[t] == p));
        Self {
            direction,
            perm,
            inv_perm,
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// The four traversal orders of an `h × w` grid, in [`ScanDirection::ALL`] order.
pub fn ss2d_orders(h: usize, w: usize) -> Result<[ScanOrder; 4]> {
    if h == 0 || w == 0 {
        return Err(invalid("ss2d_orders", format!("zero extent in {h}x{w}")));
    }
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    Ok([
        ScanOrder::new(ScanDirection::RowForward, row.clone()),
        ScanOrder::new(ScanDirection::RowBackward, rev(&row)),
        ScanOrder::new(ScanDirection::ColForward, col.clone()),
        ScanOrder::new(ScanDirection::ColBackward, rev(&col)),
    ])
}

/// Parameter values of one SS2D layer over `channels` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Ss2dParams {
    pub directions: [SsmParams; 4],
    pub gamma: Tensor,
    pub beta: Tensor,
    /// All four directions read `directions[0]`.
    pub shared: bool,
}

impl Ss2dParams {
    pub fn init<R: Rng + ?Sized>(cfg: &SsmConfig, shared: bool, rng: &mut R) -> Self {
        let first = SsmParams::init(cfg, rng);
        let directions = if shared {
            [first.clone(), first.clone(), first.clone(), first]
        } else {
            [
                first,
                SsmParams::init(cfg, rng),
                SsmParams::init(cfg, rng),
                SsmParams::init(cfg, rng),
            ]
        };
        Self {
            directions,
            gamma: Tensor::ones(&[cfg.channels]),
            beta: Tensor::zeros(&[cfg.channels]),
            shared,
        }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Ss2dWeights {
        let first = self.directions[0].register(store, &format!("{prefix}.dir0"));
        let directions = if self.shared {
            [first; 4]
        } else {
            [
                first,
                self.directions[1].register(store, &format!("{prefix}.dir1")),
                self.directions[2].register(store, &format!("{prefix}.dir2")),
                self.directions[3].register(store, &format!("{prefix}.dir3")),
            ]
        };
        Ss2dWeights {
            directions,
            gamma: store.add(format!("{prefix}.ln.gamma"), self.gamma.clone()),
            beta: store.add(format!("{prefix}.ln.beta"), self.beta.clone()),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> Ss2dVars {
        let first = self.directions[0].constants(g);
        let directions = if self.shared {
            [first; 4]
        } else {
            [
                first,
                self.directions[1].constants(g),
                self.directions[2].constants(g),
                self.directions[3].constants(g),
            ]
        };
        Ss2dVars {
            directions,
            gamma: g.constant(self.gamma.clone()),
            beta: g.constant(self.beta.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ss2dWeights {
    pub directions: [SsmWeights; 4],
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Ss2dWeights {
    pub fn vars(&self, b: &Binding) -> Ss2dVars {
        Ss2dVars {
            directions: self.directions.map(|d| d.vars(b)),
            gamma: b[self.gamma],
            beta: b[self.beta],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ss2dVars {
    pub directions: [SsmVars; 4],
    pub gamma: Var,
    pub beta: Var,
}

impl Graph {
    /// `x[N, C, H, W]` → `[N, H·W, C]` tokens in row-major order.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(invalid("to_tokens", format!("expected NCHW, got {:?}", self.shape(x))));
        };
        let nhwc = self.permute(x, &[0, 2, 3, 1])?;
        self.reshape(nhwc, &[n, h * w, c])
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        let &[n, l, c] = self.shape(t) else {
            return Err(invalid("from_tokens", format!("expected NLC, got {:?}", self.shape(t))));
        };
        if l != h * w {
            return Err(invalid("from_tokens", format!("{l} tokens for a {h}x{w} grid")));
        }
        let nhwc = self.reshape(t, &[n, h, w, c])?;
        self.permute(nhwc, &[0, 3, 1, 2])
    }

    /// The four directional scans of `x[N, C, H, W]`, each mapped back to
    /// row-major token order `[N, H·W, C]`.
    pub fn ss2d_directions(&mut self, x: Var, p: &Ss2dVars, kind: ScanKind) -> Result<[Var; 4]> {
        let &[_, _, h, w] = self.shape(x) else {
            return Err(invalid("ss2d", format!("expected NCHW, got {:?}", self.shape(x))));
        };
        let orders = ss2d_orders(h, w)?;
        let tokens = self.to_tokens(x)?;
        let mut outs = Vec::with_capacity(4);
        for (order, vars) in orders.iter().zip(&p.directions) {
            let seq = self.gather(tokens, 1, &order.perm)?;
            let y = self.selective_ssm(seq, vars, kind)?;
            outs.push(self.gather(y, 1, &order.inv_perm)?);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }

    /// Sum of the four directional scans, layer-normalized over channels.
    pub fn ss2d_forward(&mut self, x: Var, p: &Ss2dVars, kind: ScanKind) -> Result<Var> {
        let &[_, _, h, w] = self.shape(x) else {
            return Err(invalid("ss2d", format!("expected NCHW, got {:?}", self.shape(x))));
        };
        let [a, b, c, d] = self.ss2d_directions(x, p, kind)?;
        let ab = self.add(a, b)?;
        let cd = self.add(c, d)?;
        let sum = self.add(ab, cd)?;
        let normed = self.layernorm(sum, p.gamma, p.beta, 2, DEFAULT_EPS)?;
        self.from_tokens(normed, h, w)
    }
}

/// Non-differentiable [`Graph::ss2d_forward`].
pub fn ss2d_forward(x: &Tensor, p: &Ss2dParams, kind: ScanKind) -> Result<Tensor> {
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let vars = p.constants(&mut g);
    let y = g.ss2d_forward(vx, &vars, kind)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{discretize_zoh, scan_sequential, selective_params};
    use rand::{rngs::StdRng, SeedableRng};

    #[test]
    fn single_patch_orders_are_identity() {
        for o in ss2d_orders(1, 1).unwrap() {
            assert_eq!(o.perm, vec![0]);
            assert_eq!(o.inv_perm, vec![0]);
        }
    }

    #[test]
    fn single_row_collapses_column_orders() {
        let [rf, rb, cf, cb] = ss2d_orders(1, 5).unwrap();
        assert_eq!(rf.perm, cf.perm);
        assert_eq!(rb.perm, cb.perm);
    }

    #[test]
    fn two_by_two_orders() {
        let [rf, rb, cf, cb] = ss2d_orders(2, 2).unwrap();
        assert_eq!(rf.perm, vec![0, 1, 2, 3]);
        assert_eq!(rb.perm, vec![3, 2, 1, 0]);
        assert_eq!(cf.perm, vec![0, 2, 1, 3]);
        assert_eq!(cb.perm, vec![3, 1, 2, 0]);
    }

    #[test]
    fn inverses_compose_to_identity() {
        for (h, w) in [(3, 4), (5, 2), (1, 7)] {
            for o in ss2d_orders(h, w).unwrap() {
                for p in 0..h * w {
                    assert_eq!(o.perm[o.inv_perm[p]], p);
                    assert_eq!(o.inv_perm[o.perm[p]], p);
                }
            }
        }
        assert!(ss2d_orders(0, 3).is_err());
    }

    /// Runs one direction through the tensor-level kernels with the
    /// step-by-step recurrence, returning tokens in row-major order.
    fn sequential_direction(tokens: &Tensor, order: &ScanOrder, p: &SsmParams) -> Tensor {
        let [n, l, c] = *tokens.shape() else { unreachable!() };
        let mut seq = vec![0.0; n * l * c];
        for b in 0..n {
            for t in 0..l {
                for ch in 0..c {
                    seq[(b * l + t) * c + ch] = tokens.at(&[b, order.perm[t], ch]);
                }
            }
        }
        let seq = Tensor::from_vec(&[n, l, c], seq).unwrap();
        let (delta, bm, cm) = selective_params(&seq, p).unwrap();
        let (abar, bbar) = discretize_zoh(&delta, &p.a(), &bm).unwrap();
        let y = scan_sequential(&seq, &abar, &bbar, &cm, p.d_skip.as_ref()).unwrap();
        let mut out = vec![0.0; n * l * c];
        for b in 0..n {
            for t in 0..l {
                for ch in 0..c {
                    out[(b * l + order.perm[t]) * c + ch] = y.at(&[b, t, ch]);
                }
            }
        }
        Tensor::from_vec(&[n, l, c], out).unwrap()
    }

    #[test]
    fn matches_four_sequential_scans_summed() {
        let mut rng = StdRng::seed_from_u64(11);
        let (n, c, h, w) = (2, 3, 3, 3);
        let p = Ss2dParams::init(&SsmConfig::new(c, 4), false, &mut rng);
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);

        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let vars = p.constants(&mut g);
        let dirs = g.ss2d_directions(vx, &vars, ScanKind::Parallel).unwrap();
        let tokens = g.to_tokens(vx).unwrap();
        let tokens = g.value(tokens).clone();

        let orders = ss2d_orders(h, w).unwrap();
        let mut sum = vec![0.0; n * h * w * c];
        for k in 0..4 {
            let oracle = sequential_direction(&tokens, &orders[k], &p.directions[k]);
            assert!(g.value(dirs[k]).max_abs_diff(&oracle).unwrap() < 1e-10);
            sum.iter_mut().zip(oracle.data()).for_each(|(s, v)| *s += v);
        }
        // channel layer norm of the summed tokens, gamma = 1, beta = 0
        for row in sum.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            row.iter_mut()
                .for_each(|v| *v = (*v - mean) / (var + DEFAULT_EPS).sqrt());
        }
        let y = ss2d_forward(&x, &p, ScanKind::Parallel).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let want = sum[(b * h * w + i * w + j) * c + ch];
                        assert!((y.at(&[b, ch, i, j]) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_input_with_shared_parameters_is_mirror_symmetric() {
        let mut rng = StdRng::seed_from_u64(12);
        let p = Ss2dParams::init(&SsmConfig::new(2, 3), true, &mut rng);
        let x = Tensor::full(&[1, 2, 3, 4], 0.7);
        let mut g = Graph::new();
        let vx = g.constant(x);
        let vars = p.constants(&mut g);
        let [fwd, bwd, _, _] = g.ss2d_directions(vx, &vars, ScanKind::Parallel).unwrap();
        let l = 12;
        for t in 0..l {
            for ch in 0..2 {
                let a = g.value(fwd).at(&[0, t, ch]);
                let b = g.value(bwd).at(&[0, l - 1 - t, ch]);
                assert!((a - b).abs() < 1e-14, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_input_without_skip_gives_zero_before_normalization() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut cfg = SsmConfig::new(3, 2);
        cfg.skip = false;
        let p = Ss2dParams::init(&cfg, false, &mut rng);
        let y = ss2d_forward(&Tensor::zeros(&[1, 3, 2, 3]), &p, ScanKind::Parallel).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn directional_scans_are_causal_in_their_own_order() {
        let mut rng = StdRng::seed_from_u64(14);
        let (h, w) = (3, 3);
        let p = Ss2dParams::init(&SsmConfig::new(2, 3), false, &mut rng);
        let x = Tensor::randn(&[1, 2, h, w], 1.0, &mut rng);
        let orders = ss2d_orders(h, w).unwrap();
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let vx = g.constant(x.clone());
            let vars = p.constants(&mut g);
            let d = g.ss2d_directions(vx, &vars, ScanKind::Parallel).unwrap();
            d.map(|v| g.value(v).clone())
        };
        let base = run(&x);
        for (k, order) in orders.iter().enumerate() {
            for t in 0..h * w {
                let pos = order.perm[t];
                let mut xp = x.clone();
                xp.data_mut()[pos] += 0.5; // channel 0 at grid position `pos`
                let moved = &run(&xp)[k];
                for s in 0..h * w {
                    let grid = order.perm[s];
                    let changed = (0..2).any(|ch| moved.at(&[0, grid, ch]) != base[k].at(&[0, grid, ch]));
                    if s < t {
                        assert!(!changed, "{} step {s} saw step {t}", order.direction.name());
                    }
                    if s == t {
                        assert!(changed);
                    }
                }
            }
        }
    }
}
