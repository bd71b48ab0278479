use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and channel groups of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with padding that keeps odd kernels size-preserving.
    pub fn same(kernel: usize, groups: usize) -> Self {
        Self::new(1, kernel / 2, groups)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], spec: &ConvSpec) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(mismatch("conv2d", x, k));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_per_group, kh, kw) = (k[0], k[1], k[2], k[3]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(invalid(
                "conv2d",
                format!("{groups} groups do not divide {cin} input / {cout} output channels"),
            ));
        }
        if cin / groups != cin_per_group {
            return Err(mismatch("conv2d", x, k));
        }
        if spec.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_per_group,
            cout_per_group: cout / groups,
            kh,
            kw,
            oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
            ow: (w + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    /// Calls `f(x_offset, w_offset, y_offset)` for every multiply-accumulate
    /// of the cross-correlation, skipping taps that land in the padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for n in 0..g.n {
            for co in 0..g.cout {
                let group = co / g.cout_per_group;
                for cl in 0..g.cin_per_group {
                    let ci = group * g.cin_per_group + cl;
                    let xbase = (n * g.cin + ci) * g.h * g.w;
                    let ybase = (n * g.cout + co) * g.oh * g.ow;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wi = ((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx;
                            for oy in 0..g.oh {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for ox in 0..g.ow {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = xbase + iy as usize * g.w + ix as usize;
                                    f(xi, wi, ybase + oy * g.ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D cross-correlation of `x[N, C, H, W]` with `w[Cout, C / groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = Geometry::new(tx.shape(), tw.shape(), &spec)?;
        let mut out = vec![0.0; geo.n * geo.cout * geo.oh * geo.ow];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [geo.cout] {
                return Err(mismatch("conv2d bias", tb.shape(), &[geo.cout]));
            }
            let plane = geo.oh * geo.ow;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(tb.data()[i % geo.cout]);
            }
        }
        let (xd, wd) = (tx.data(), tw.data());
        geo.for_each_tap(|xi, wi, yi| out[yi] += xd[xi] * wd[wi]);
        let value = Tensor::from_vec(&[geo.n, geo.cout, geo.oh, geo.ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, spec }, "conv2d")
    }

    pub(super) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        out: &Tensor,
        grad: &[f64],
    ) -> InputGrads {
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = Geometry::new(tx.shape(), tw.shape(), spec).expect("validated in forward");
        let (xd, wd) = (tx.data(), tw.data());
        let mut gx = vec![0.0; tx.numel()];
        let mut gw = vec![0.0; tw.numel()];
        geo.for_each_tap(|xi, wi, yi| {
            gx[xi] += grad[yi] * wd[wi];
            gw[wi] += grad[yi] * xd[xi];
        });
        let mut grads = vec![(x, gx), (w, gw)];
        if let Some(b) = b {
            let plane = out.shape()[2] * out.shape()[3];
            let mut gb = vec![0.0; geo.cout];
            for (i, chunk) in grad.chunks(plane).enumerate() {
                gb[i % geo.cout] += chunk.iter().sum::<f64>();
            }
            grads.push((b, gb));
        }
        grads
    }
}
