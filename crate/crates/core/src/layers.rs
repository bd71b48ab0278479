//! Parameterized building blocks shared by the backbone, fusion and
//! attention modules. Each holds [`ParamId`]s into a [`ParamStore`] and is
//! applied through a [`Binding`] on a tape.

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var, DEFAULT_EPS};
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

impl Graph {
    /// Applies `linear` to the channel axis of `x[N, C, H, W]`.
    pub fn channel_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let nhwc = self.permute(x, &[0, 2, 3, 1])?;
        let y = self.linear(nhwc, w, b)?;
        self.permute(y, &[0, 3, 1, 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Square `kernel`, weights uniform in `±1/sqrt(fan_in)`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let cig = cin / spec.groups;
        let w = store.add_uniform(
            format!("{name}.w"),
            &[cout, cig, kernel, kernel],
            cig * kernel * kernel,
            rng,
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Self { w, b, spec }
    }

    pub fn apply(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], p.get(self.b), self.spec)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.fill(self.w, 0.0);
        if let Some(b) = self.b {
            store.fill(b, 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform(format!("{name}.w"), &[din, dout], din, rng),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    /// Over the last axis.
    pub fn apply(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }

    /// Over the channel axis of an NCHW map.
    pub fn apply_channels(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.channel_linear(x, p[self.w], Some(p[self.b]))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.fill(self.w, 0.0);
        store.fill(self.b, 0.0);
    }
}

/// Layer normalization over the channel axis of an NCHW map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.layernorm(x, p[self.gamma], p[self.beta], 1, DEFAULT_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, SeedableRng};

    #[test]
    fn channel_linear_acts_per_pixel() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        store
            .set(lin.b, Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap())
            .unwrap();
        let x = Tensor::randn(&[2, 3, 2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let vx = g.constant(x.clone());
        let y = lin.apply_channels(&mut g, &p, vx).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2, 4]);
        let (w, b) = (store.get(lin.w), store.get(lin.b));
        for n in 0..2 {
            for o in 0..2 {
                for i in 0..2 {
                    for j in 0..4 {
                        let want = b.data()[o] + (0..3).map(|c| x.at(&[n, c, i, j]) * w.at(&[c, o])).sum::<f64>();
                        assert!((g.value(y).at(&[n, o, i, j]) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn norm_standardizes_channels() {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, "n", 2);
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let vx = g.constant(x);
        let y = norm.apply(&mut g, &p, vx).unwrap();
        let r = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((g.value(y).data()[0] + r).abs() < 1e-15);
        assert!((g.value(y).data()[1] - r).abs() < 1e-15);
    }
}
