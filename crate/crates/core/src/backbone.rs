//! Dual-stream feature extractor: a strided patch embedding followed by
//! stages of visual state-space blocks separated by stride-2 downsampling.

use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{invalid, mismatch, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Binding, ParamStore};
use crate::ssm::{ScanKind, Ss2dParams, Ss2dWeights, SsmConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Channels produced by the patch embedding.
    pub stem: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub nstate: usize,
    /// Learnable skip term in every SSM.
    pub skip: bool,
    /// Both modalities run through one set of weights.
    pub shared_streams: bool,
    /// The four scan directions of each SS2D share one parameter set.
    pub shared_directions: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem: 8,
            depths: vec![1, 1, 1],
            widths: vec![8, 16, 32],
            nstate: 8,
            skip: true,
            shared_streams: false,
            shared_directions: false,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(invalid("backbone config", reason.to_string()));
        if self.widths.is_empty() || self.depths.len() != self.widths.len() {
            return bad("depths and widths must be nonempty and of equal length");
        }
        if self.depths.iter().any(|&d| d == 0) {
            return bad("every stage needs at least one block");
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("widths must increase strictly across stages");
        }
        if self.stem == 0 || self.nstate == 0 || self.widths[0] == 0 {
            return bad("stem, widths and state size must be positive");
        }
        Ok(())
    }
}

/// Aligned per-stage features of the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePair<T> {
    pub rgb: T,
    pub ir: T,
    pub stage: usize,
}

/// `x + out(LN(ss2d(silu(dwconv(expand(LN(x)))))))`, with the expansion
/// doubling the channel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VssBlock {
    pub prefix: String,
    pub norm: Norm,
    pub expand: Linear,
    pub dwconv: Conv,
    pub ss2d: Ss2dWeights,
    pub project: Linear,
}

impl VssBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let inner = 2 * channels;
        let mut ssm = SsmConfig::new(inner, cfg.nstate);
        ssm.skip = cfg.skip;
        Self {
            prefix: prefix.to_string(),
            norm: Norm::new(store, &format!("{prefix}.norm"), channels),
            expand: Linear::new(store, &format!("{prefix}.expand"), channels, inner, rng),
            dwconv: Conv::new(
                store,
                &format!("{prefix}.dwconv"),
                inner,
                inner,
                3,
                ConvSpec::same(3, inner),
                true,
                rng,
            ),
            ss2d: Ss2dParams::init(&ssm, cfg.shared_directions, rng).register(store, &format!("{prefix}.ss2d")),
            project: Linear::new(store, &format!("{prefix}.project"), inner, channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.norm.apply(g, p, x)?;
        let h = self.expand.apply_channels(g, p, h)?;
        let h = self.dwconv.apply(g, p, h)?;
        let h = g.silu(h)?;
        let h = g.ss2d_forward(h, &self.ss2d.vars(p), ScanKind::Parallel)?;
        let h = self.project.apply_channels(g, p, h)?;
        g.add(x, h)
    }

    /// Zeroes every weight of the residual branch.
    pub fn zero_branch(&self, store: &mut ParamStore) {
        store.zero_prefix(&format!("{}.", self.prefix));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    /// Patch embedding (first stage) or stride-2 downsampling.
    pub entry: Conv,
    /// Channel adapter when the stem width differs from the first stage.
    pub adapter: Option<Linear>,
    pub blocks: Vec<VssBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    pub stages: Vec<Stage>,
}

impl Stream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(cfg.stages());
        for (s, (&width, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
            let name = format!("{prefix}.stage{s}");
            let (entry, adapter) = if s == 0 {
                let stem = Conv::new(
                    store,
                    &format!("{name}.patch_embed"),
                    3,
                    cfg.stem,
                    4,
                    ConvSpec::new(4, 0, 1),
                    true,
                    rng,
                );
                let adapter =
                    (cfg.stem != width).then(|| Linear::new(store, &format!("{name}.adapter"), cfg.stem, width, rng));
                (stem, adapter)
            } else {
                let down = Conv::new(
                    store,
                    &format!("{name}.downsample"),
                    cfg.widths[s - 1],
                    width,
                    2,
                    ConvSpec::new(2, 0, 1),
                    true,
                    rng,
                );
                (down, None)
            };
            let blocks = (0..depth)
                .map(|k| VssBlock::new(store, &format!("{name}.block{k}"), width, cfg, rng))
                .collect();
            stages.push(Stage { entry, adapter, blocks });
        }
        Self { stages }
    }

    /// Feature map after every stage.
    pub fn forward(&self, g: &mut Graph, p: &Binding, img: Var) -> Result<Vec<Var>> {
        let mut h = patch_embed(g, p, &self.stages[0].entry, img)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                h = stage.entry.apply(g, p, h)?;
            }
            if let Some(adapter) = &stage.adapter {
                h = adapter.apply_channels(g, p, h)?;
            }
            for block in &stage.blocks {
                h = block.forward(g, p, h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Stride-4 patch embedding of `img[N, 3, H, W]` with `H`, `W` divisible by 4.
pub fn patch_embed(g: &mut Graph, p: &Binding, stem: &Conv, img: Var) -> Result<Var> {
    match *g.shape(img) {
        [_, 3, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => stem.apply(g, p, img),
        _ => Err(invalid(
            "patch_embed",
            format!("expected [N, 3, 4k, 4m] image, got {:?}", g.shape(img)),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backbone {
    pub rgb: Stream,
    /// `None` in shared-stream mode.
    pub ir: Option<Stream>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let rgb = Stream::new(store, &format!("{prefix}.rgb"), cfg, rng);
        let ir = (!cfg.shared_streams).then(|| Stream::new(store, &format!("{prefix}.ir"), cfg, rng));
        Ok(Self { rgb, ir })
    }

    pub fn ir_stream(&self) -> &Stream {
        self.ir.as_ref().unwrap_or(&self.rgb)
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, rgb: Var, ir: Var) -> Result<Vec<FeaturePair<Var>>> {
        if g.shape(rgb) != g.shape(ir) {
            return Err(mismatch("backbone_forward", g.shape(rgb), g.shape(ir)));
        }
        let fr = self.rgb.forward(g, p, rgb)?;
        let fi = self.ir_stream().forward(g, p, ir)?;
        Ok(fr
            .into_iter()
            .zip(fi)
            .enumerate()
            .map(|(stage, (rgb, ir))| FeaturePair { rgb, ir, stage })
            .collect())
    }
}
