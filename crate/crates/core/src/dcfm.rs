//! Disparity-guided cross-modal fusion.
//!
//! Both modalities are normalized, their difference is taken as a disparity
//! map, and all three are projected to twice the channel count and mixed by
//! depthwise convolutions. Each modality is then scanned as one sequence
//! with the disparity tokens appended, forwards and backwards, and only the
//! modality half is kept. The scan outputs gate channel-attended projections
//! and the two modal results are summed and projected back.

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::backbone::FeaturePair;
use crate::error::{invalid, mismatch, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Binding, ParamStore};
use crate::ssm::{ScanKind, SsmConfig, SsmParams, SsmWeights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfmConfig {
    pub nstate: usize,
    pub skip: bool,
    /// Scan the concatenated sequence backwards as well.
    pub reverse_branch: bool,
}

impl Default for DcfmConfig {
    fn default() -> Self {
        Self {
            nstate: 8,
            skip: true,
            reverse_branch: true,
        }
    }
}

/// Channel attention: `w = sigmoid(CR(avg(silu F)) + CR(max(silu F)))`,
/// output `w ⊙ F + F`, where each CR is a 1×1 convolution and a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cab {
    pub avg: Conv,
    pub max: Conv,
}

impl Cab {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let cr = |store: &mut ParamStore, name: &str, rng: &mut R| {
            Conv::new(store, name, channels, channels, 1, ConvSpec::new(1, 0, 1), true, rng)
        };
        Self {
            avg: cr(store, &format!("{prefix}.cr_avg"), rng),
            max: cr(store, &format!("{prefix}.cr_max"), rng),
        }
    }

    pub fn weights(&self, g: &mut Graph, p: &Binding, f: Var) -> Result<Var> {
        let s = g.silu(f)?;
        let a = g.avg_pool(s, &[2, 3])?;
        let m = g.max_pool(s, &[2, 3])?;
        let a = self.avg.apply(g, p, a)?;
        let a = g.relu(a)?;
        let m = self.max.apply(g, p, m)?;
        let m = g.relu(m)?;
        let z = g.add(a, m)?;
        g.sigmoid(z)
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, f: Var) -> Result<Var> {
        let w = self.weights(g, p, f)?;
        let wf = g.mul(w, f)?;
        g.add(wf, f)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.avg.zero(store);
        self.max.zero(store);
    }
}

/// Projected (`F′`) and mixed (`f`) features of one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prepared {
    pub disparity: Var,
    pub proj_rgb: Var,
    pub proj_ir: Var,
    pub f_rgb: Var,
    pub f_ir: Var,
    pub f_d: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dcfm {
    pub channels: usize,
    pub reverse_branch: bool,
    pub norm_rgb: Norm,
    pub norm_ir: Norm,
    pub proj_rgb: Linear,
    pub proj_ir: Linear,
    pub proj_d: Linear,
    pub dw_rgb: Conv,
    pub dw_ir: Conv,
    pub dw_d: Conv,
    pub cab_rgb: Cab,
    pub cab_ir: Cab,
    pub dssm_rgb: SsmWeights,
    pub dssm_ir: SsmWeights,
    pub out: Linear,
}

impl Dcfm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &DcfmConfig,
        rng: &mut R,
    ) -> Self {
        let hidden = 2 * channels;
        let mut ssm = SsmConfig::new(hidden, cfg.nstate);
        ssm.skip = cfg.skip;
        let name = |part: &str| format!("{prefix}.{part}");
        let dw = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Conv::new(
                store,
                &name(part),
                hidden,
                hidden,
                3,
                ConvSpec::same(3, hidden),
                true,
                rng,
            )
        };
        Self {
            channels,
            reverse_branch: cfg.reverse_branch,
            norm_rgb: Norm::new(store, &name("norm_rgb"), channels),
            norm_ir: Norm::new(store, &name("norm_ir"), channels),
            proj_rgb: Linear::new(store, &name("proj_rgb"), channels, hidden, rng),
            proj_ir: Linear::new(store, &name("proj_ir"), channels, hidden, rng),
            proj_d: Linear::new(store, &name("proj_d"), channels, hidden, rng),
            dw_rgb: dw(store, "dw_rgb", rng),
            dw_ir: dw(store, "dw_ir", rng),
            dw_d: dw(store, "dw_d", rng),
            cab_rgb: Cab::new(store, &name("cab_rgb"), hidden, rng),
            cab_ir: Cab::new(store, &name("cab_ir"), hidden, rng),
            dssm_rgb: SsmParams::init(&ssm, rng).register(store, &name("dssm_rgb")),
            dssm_ir: SsmParams::init(&ssm, rng).register(store, &name("dssm_ir")),
            out: Linear::new(store, &name("out"), hidden, channels, rng),
        }
    }

    /// The same block with every modality-specific part exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            norm_rgb: self.norm_ir,
            norm_ir: self.norm_rgb,
            proj_rgb: self.proj_ir,
            proj_ir: self.proj_rgb,
            dw_rgb: self.dw_ir,
            dw_ir: self.dw_rgb,
            cab_rgb: self.cab_ir,
            cab_ir: self.cab_rgb,
            dssm_rgb: self.dssm_ir,
            dssm_ir: self.dssm_rgb,
            ..*self
        }
    }

    fn check(&self, g: &Graph, pair: &FeaturePair<Var>) -> Result<()> {
        let (a, b) = (g.shape(pair.rgb), g.shape(pair.ir));
        if a != b {
            return Err(mismatch("dcfm", a, b));
        }
        if a.len() != 4 || a[1] != self.channels {
            return Err(invalid(
                "dcfm",
                format!("expected [N, {}, H, W], got {a:?}", self.channels),
            ));
        }
        Ok(())
    }

    /// Normalization, disparity, projection and depthwise mixing.
    pub fn prepare(&self, g: &mut Graph, p: &Binding, pair: &FeaturePair<Var>) -> Result<Prepared> {
        self.check(g, pair)?;
        let nr = self.norm_rgb.apply(g, p, pair.rgb)?;
        let ni = self.norm_ir.apply(g, p, pair.ir)?;
        let disparity = g.sub(nr, ni)?;
        let proj_rgb = self.proj_rgb.apply_channels(g, p, nr)?;
        let proj_ir = self.proj_ir.apply_channels(g, p, ni)?;
        let proj_d = self.proj_d.apply_channels(g, p, disparity)?;
        let mut mix = |conv: &Conv, x: Var| -> Result<Var> {
            let y = conv.apply(g, p, x)?;
            g.silu(y)
        };
        Ok(Prepared {
            disparity,
            proj_rgb,
            proj_ir,
            f_rgb: mix(&self.dw_rgb, proj_rgb)?,
            f_ir: mix(&self.dw_ir, proj_ir)?,
            f_d: mix(&self.dw_d, proj_d)?,
        })
    }

    /// Both modality branches of the disparity-guided scan.
    pub fn dssm(&self, g: &mut Graph, p: &Binding, prep: &Prepared) -> Result<(Var, Var)> {
        let y_rgb = dssm_branch(g, prep.f_rgb, prep.f_d, &self.dssm_rgb.vars(p), self.reverse_branch)?;
        let y_ir = dssm_branch(g, prep.f_ir, prep.f_d, &self.dssm_ir.vars(p), self.reverse_branch)?;
        Ok((y_rgb, y_ir))
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, pair: &FeaturePair<Var>) -> Result<Var> {
        let prep = self.prepare(g, p, pair)?;
        let (y_rgb, y_ir) = self.dssm(g, p, &prep)?;
        let c_rgb = self.cab_rgb.forward(g, p, prep.proj_rgb)?;
        let c_ir = self.cab_ir.forward(g, p, prep.proj_ir)?;
        let m_rgb = g.mul(y_rgb, c_rgb)?;
        let m_ir = g.mul(y_ir, c_ir)?;
        let merged = g.add(m_rgb, m_ir)?;
        self.out.apply_channels(g, p, merged)
    }
}

/// Scans `[modality ∥ disparity]` tokens and keeps the modality half.
///
/// `f_m` and `f_d` are `[N, D, H, W]`; both are flattened row-major into
/// `H·W` tokens. With `reverse` the sequence is also scanned backwards with
/// the same parameters and the re-reversed result is added.
pub fn dssm_branch(g: &mut Graph, f_m: Var, f_d: Var, ssm: &crate::ssm::SsmVars, reverse: bool) -> Result<Var> {
    if g.shape(f_m) != g.shape(f_d) {
        return Err(mismatch("dssm", g.shape(f_m), g.shape(f_d)));
    }
    let &[_, _, h, w] = g.shape(f_m) else {
        return Err(invalid("dssm", format!("expected NCHW, got {:?}", g.shape(f_m))));
    };
    let tm = g.to_tokens(f_m)?;
    let td = g.to_tokens(f_d)?;
    let seq = g.concat(&[tm, td], 1)?;
    let mut y = g.selective_ssm(seq, ssm, ScanKind::Parallel)?;
    if reverse {
        let rev = g.reverse(seq, 1)?;
        let yr = g.selective_ssm(rev, ssm, ScanKind::Parallel)?;
        let back = g.reverse(yr, 1)?;
        y = g.add(y, back)?;
    }
    let first = g.slice(y, 1, 0, h * w)?;
    g.from_tokens(first, h, w)
}
