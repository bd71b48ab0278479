//! Run configuration, loaded from TOML with every key optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmm_core::backbone::BackboneConfig;
use dmm_core::dcfm::DcfmConfig;
use dmm_core::mta::MtaConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    /// Floating-point width in bits, 32 or 64.
    pub precision: u32,
    /// Worker threads; 1 keeps every command bit-reproducible.
    pub threads: usize,
    pub out: PathBuf,
    pub backbone: BackboneSection,
    pub dcfm: DcfmSection,
    pub mta: MtaSection,
    pub tpa: TpaSection,
    pub bench: BenchSection,
    pub overfit: OverfitSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: 64,
            threads: 1,
            out: PathBuf::from("out"),
            backbone: BackboneSection::default(),
            dcfm: DcfmSection::default(),
            mta: MtaSection::default(),
            tpa: TpaSection::default(),
            bench: BenchSection::default(),
            overfit: OverfitSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub stem: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub nstate: usize,
    pub skip: bool,
    pub shared_streams: bool,
    pub shared_directions: bool,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            stem: 8,
            depths: vec![1, 1],
            widths: vec![8, 16],
            nstate: 4,
            skip: true,
            shared_streams: false,
            shared_directions: false,
        }
    }
}

impl BackboneSection {
    pub fn to_core(&self) -> BackboneConfig {
        BackboneConfig {
            stem: self.stem,
            depths: self.depths.clone(),
            widths: self.widths.clone(),
            nstate: self.nstate,
            skip: self.skip,
            shared_streams: self.shared_streams,
            shared_directions: self.shared_directions,
        }
    }

    /// Pixels per cell of the last stage.
    pub fn stride(&self) -> usize {
        4 << self.widths.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfmSection {
    pub nstate: usize,
    pub skip: bool,
    pub reverse_branch: bool,
}

impl Default for DcfmSection {
    fn default() -> Self {
        Self {
            nstate: 4,
            skip: true,
            reverse_branch: true,
        }
    }
}

impl DcfmSection {
    pub fn to_core(&self) -> DcfmConfig {
        DcfmConfig {
            nstate: self.nstate,
            skip: self.skip,
            reverse_branch: self.reverse_branch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtaSection {
    pub kernels: Vec<usize>,
}

impl Default for MtaSection {
    fn default() -> Self {
        Self { kernels: vec![3, 7] }
    }
}

impl MtaSection {
    pub fn to_core(&self) -> MtaConfig {
        MtaConfig {
            kernels: self.kernels.clone(),
        }
    }
}

/// Pre-fit of the auxiliary objectness head before it is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpaSection {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for TpaSection {
    fn default() -> Self {
        Self {
            pretrain_steps: 200,
            pretrain_lr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Sequence lengths, ascending.
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub channels: usize,
    pub nstate: usize,
    /// Head width of the dense-attention reference.
    pub attention_dim: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            lengths: (10..=16).map(|p| 1 << p).collect(),
            trials: 3,
            warmup: 1,
            channels: 8,
            nstate: 8,
            attention_dim: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverfitSection {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    /// Train with the target-aware attention and its auxiliary loss; off
    /// gives the ablation baseline.
    pub attention: bool,
}

impl Default for OverfitSection {
    fn default() -> Self {
        Self {
            pairs: 8,
            height: 64,
            width: 64,
            steps: 500,
            lr: 5e-2,
            attention: true,
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.precision, 32 | 64) {
            bail!("precision must be 32 or 64, got {}", self.precision);
        }
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        self.backbone.to_core().validate()?;
        if self.bench.lengths.is_empty() || self.bench.lengths.windows(2).any(|w| w[0] >= w[1]) {
            bail!("bench lengths must be nonempty and strictly ascending");
        }
        if self.bench.trials == 0 {
            bail!("bench trials must be at least 1");
        }
        let o = &self.overfit;
        if o.pairs == 0 || o.pairs > 16 {
            bail!("overfit pairs must be in 1..=16, got {}", o.pairs);
        }
        let stride = self.backbone.stride();
        if o.height % stride != 0 || o.width % stride != 0 {
            bail!(
                "overfit extent {}x{} not divisible by stride {stride}",
                o.height,
                o.width
            );
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bail!("overfit lr must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(HarnessConfig::from_toml("").unwrap(), HarnessConfig::default());
    }

    #[test]
    fn sections_override_keys() {
        let cfg = HarnessConfig::from_toml("seed = 7\n[backbone]\nwidths = [4, 8]\nstem = 4\n[overfit]\nsteps = 3\n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.backbone.widths, vec![4, 8]);
        assert_eq!(cfg.backbone.nstate, 4);
        assert_eq!(cfg.overfit.steps, 3);
        assert_eq!(cfg.overfit.pairs, 8);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(HarnessConfig::from_toml("precision = 16").is_err());
        assert!(HarnessConfig::from_toml("[bench]\nlengths = [4, 2]").is_err());
        assert!(HarnessConfig::from_toml("[overfit]\npairs = 17").is_err());
        assert!(HarnessConfig::from_toml("[overfit]\nheight = 60").is_err());
        assert!(HarnessConfig::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn stride_follows_stage_count() {
        assert_eq!(BackboneSection::default().stride(), 8);
        let one = BackboneSection {
            depths: vec![1],
            widths: vec![8],
            ..Default::default()
        };
        assert_eq!(one.stride(), 4);
    }
}
