//! Target-aware spatial attention on the RGB stream, the frozen objectness
//! prior that supervises it, a small trainable detection head and the loss
//! composition.

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{invalid, mismatch, Error, Result};
use crate::layers::Conv;
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MtaConfig {
    /// Odd kernel sizes of the parallel attention convolutions.
    pub kernels: Vec<usize>,
}

impl Default for MtaConfig {
    fn default() -> Self {
        Self { kernels: vec![3, 7] }
    }
}

/// `w = sigmoid(mean_k conv_k([avg_c(x'), max_c(x')]))` with `x' = conv3x3(x)`;
/// output `w ⊙ x + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mta {
    pub prefix: String,
    pub initial: Conv,
    pub attention: Vec<Conv>,
}

impl Mta {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &MtaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.kernels.is_empty() || cfg.kernels.iter().any(|k| k % 2 == 0) {
            return Err(invalid(
                "mta",
                format!("kernels must be odd and nonempty, got {:?}", cfg.kernels),
            ));
        }
        let initial = Conv::new(
            store,
            &format!("{prefix}.initial"),
            channels,
            channels,
            3,
            ConvSpec::same(3, 1),
            true,
            rng,
        );
        let attention = cfg
            .kernels
            .iter()
            .map(|&k| {
                Conv::new(
                    store,
                    &format!("{prefix}.attn{k}"),
                    2,
                    1,
                    k,
                    ConvSpec::same(k, 1),
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            initial,
            attention,
        })
    }

    /// Spatial weights `w[N, 1, H, W]`.
    pub fn weights(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.initial.apply(g, p, x)?;
        let avg = g.avg_pool(h, &[1])?;
        let max = g.max_pool(h, &[1])?;
        let pooled = g.concat(&[avg, max], 1)?;
        let mut sum = self.attention[0].apply(g, p, pooled)?;
        for conv in &self.attention[1..] {
            let s = conv.apply(g, p, pooled)?;
            sum = g.add(sum, s)?;
        }
        let mean = g.scale(sum, 1.0 / self.attention.len() as f64)?;
        g.sigmoid(mean)
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let w = self.weights(g, p, x)?;
        let wx = g.mul(w, x)?;
        g.add(wx, x)
    }

    /// Zeroes the attention convolutions so that `w = 1/2` everywhere.
    pub fn zero_attention(&self, store: &mut ParamStore) {
        for conv in &self.attention {
            conv.zero(store);
        }
    }
}

/// Checks that `mask` is a `{0, 1}` map with `feat`'s batch and spatial extents.
fn check_mask(feat: &[usize], mask: &Tensor, op: &'static str) -> Result<()> {
    if feat.len() != 4 {
        return Err(invalid(op, format!("expected NCHW features, got {feat:?}")));
    }
    let want = [feat[0], 1, feat[2], feat[3]];
    if mask.shape() != want {
        return Err(mismatch(op, mask.shape(), &want));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(invalid(op, "mask values must be 0 or 1"));
    }
    Ok(())
}

/// Row indices `n·H·W + i·W + j` of positive mask cells.
pub fn positive_cells(mask: &Tensor) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// `[N, K, H, W]` → `[N·H·W, K]`.
fn per_cell(g: &mut Graph, x: Var) -> Result<Var> {
    let &[n, k, h, w] = g.shape(x) else {
        return Err(invalid("per_cell", format!("expected NCHW, got {:?}", g.shape(x))));
    };
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(nhwc, &[n * h * w, k])
}

/// Smooth-L1 between the 4-channel map `pred` and `target` at positive
/// cells; a constant zero when there are none.
fn regression_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(mismatch("regression target", target.shape(), g.shape(pred)));
    }
    let cells = positive_cells(mask);
    if cells.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows = per_cell(g, pred)?;
    let picked = g.gather(rows, 0, &cells)?;
    let t = g.constant(target.clone());
    let t = per_cell(g, t)?;
    let t = g.gather(t, 0, &cells)?;
    g.smooth_l1(picked, t)
}

/// Objectness and 4-channel centre-offset 1×1 heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TpaHead {
    pub prefix: String,
    pub objectness: Conv,
    pub regression: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxLosses {
    pub cls: Var,
    pub reg: Var,
}

impl TpaHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let one = ConvSpec::new(1, 0, 1);
        Self {
            prefix: prefix.to_string(),
            objectness: Conv::new(store, &format!("{prefix}.objectness"), channels, 1, 1, one, true, rng),
            regression: Conv::new(store, &format!("{prefix}.regression"), channels, 4, 1, one, true, rng),
        }
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.freeze_prefix(&format!("{}.", self.prefix), frozen);
    }

    pub fn logits(&self, g: &mut Graph, p: &Binding, feat: Var) -> Result<Var> {
        self.objectness.apply(g, p, feat)
    }

    /// Binary cross-entropy of the objectness logits against `mask[N, 1, H, W]`
    /// and smooth-L1 of the offsets against `reg_target[N, 4, H, W]` at
    /// positive cells.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        feat: Var,
        mask: &Tensor,
        reg_target: &Tensor,
    ) -> Result<AuxLosses> {
        check_mask(g.shape(feat), mask, "tpa mask")?;
        let logits = self.logits(g, p, feat)?;
        let cls = g.bce_with_logits(logits, mask)?;
        let offsets = self.regression.apply(g, p, feat)?;
        let reg = regression_loss(g, offsets, reg_target, mask)?;
        Ok(AuxLosses { cls, reg })
    }
}

/// Two-class (background, target) per-cell classifier and offset regressor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionHead {
    pub classifier: Conv,
    pub regression: Conv,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let one = ConvSpec::new(1, 0, 1);
        Self {
            classifier: Conv::new(store, &format!("{prefix}.classifier"), channels, 2, 1, one, true, rng),
            regression: Conv::new(store, &format!("{prefix}.regression"), channels, 4, 1, one, true, rng),
        }
    }

    /// `(cls, reg)`: cross-entropy over all cells and smooth-L1 at positives.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        feat: Var,
        mask: &Tensor,
        reg_target: &Tensor,
    ) -> Result<(Var, Var)> {
        check_mask(g.shape(feat), mask, "detection mask")?;
        let logits = self.classifier.apply(g, p, feat)?;
        let rows = per_cell(g, logits)?;
        let labels: Vec<usize> = mask.data().iter().map(|&m| m as usize).collect();
        let cls = g.cross_entropy(rows, &labels)?;
        let offsets = self.regression.apply(g, p, feat)?;
        let reg = regression_loss(g, offsets, reg_target, mask)?;
        Ok((cls, reg))
    }
}

/// The four loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub det_cls: f64,
    pub det_reg: f64,
    pub aux_cls: f64,
    pub aux_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(det_cls: f64, det_reg: f64, aux_cls: f64, aux_reg: f64) -> Result<Self> {
        let parts = [det_cls, det_reg, aux_cls, aux_reg];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("total_loss"));
        }
        Ok(Self {
            det_cls,
            det_reg,
            aux_cls,
            aux_reg,
            total: ((det_cls + det_reg) + aux_cls) + aux_reg,
        })
    }

    pub fn csv_header() -> &'static str {
        "step,det_cls,det_reg,aux_cls,aux_reg,total"
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.det_cls, self.det_reg, self.aux_cls, self.aux_reg, self.total
        )
    }
}

/// Handles of the four scalar terms on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub det_cls: Var,
    pub det_reg: Var,
    pub aux_cls: Var,
    pub aux_reg: Var,
}

impl Graph {
    /// Unweighted sum of the four terms, added in the same order as
    /// [`LossBreakdown::new`] so the recorded total matches it bitwise.
    pub fn total_loss(&mut self, t: LossTerms) -> Result<(Var, LossBreakdown)> {
        for v in [t.det_cls, t.det_reg, t.aux_cls, t.aux_reg] {
            if self.value(v).numel() != 1 {
                return Err(Error::NotScalar(self.shape(v).to_vec()));
            }
        }
        let item = |g: &Graph, v: Var| g.value(v).data()[0];
        let breakdown = LossBreakdown::new(
            item(self, t.det_cls),
            item(self, t.det_reg),
            item(self, t.aux_cls),
            item(self, t.aux_reg),
        )?;
        let a = self.add(t.det_cls, t.det_reg)?;
        let b = self.add(a, t.aux_cls)?;
        let total = self.add(b, t.aux_reg)?;
        debug_assert_eq!(item(self, total), breakdown.total);
        Ok((total, breakdown))
    }
}

/// `mask[N, 1, H, W]` → `[N, 1, H/f, W/f]`, a cell being positive when any
/// of its pixels is.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let &[n, 1, h, w] = mask.shape() else {
        return Err(invalid(
            "downsample_mask",
            format!("expected [N, 1, H, W], got {:?}", mask.shape()),
        ));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid("downsample_mask", format!("{h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * oh * ow];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                if mask.data()[(b * h + i) * w + j] != 0.0 {
                    out[(b * oh + i / factor) * ow + j / factor] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(&[n, 1, oh, ow], out)
}
