//! Two-phase overfit of the toy detector on a handful of synthetic pairs.
//!
//! Phase 1 fits the objectness/offset head on the target-aware RGB features
//! of the untrained network and freezes it. Phase 2 trains everything else
//! against the detection loss plus the frozen head's auxiliary loss.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmm_core::backbone::{Backbone, FeaturePair};
use dmm_core::dcfm::Dcfm;
use dmm_core::io::{save_tensor, write_checkpoint, Precision};
use dmm_core::mta::{DetectionHead, LossBreakdown, LossTerms, Mta, TpaHead};
use dmm_core::{Binding, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::HarnessConfig;
use crate::report::write_annotations;
use crate::synth::{gen_synthetic_pairs, Batch, SyntheticPair};

/// A loss more than this multiple of the starting loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const BACKBONE: &str = "backbone";
const TPA: &str = "tpa";

/// Backbone, RGB target-aware attention, disparity-guided fusion and a
/// per-cell detection head on the last stage, plus the auxiliary head.
pub struct ToyDetector {
    pub backbone: Backbone,
    pub mta: Mta,
    pub dcfm: Dcfm,
    pub det: DetectionHead,
    pub tpa: TpaHead,
    pub stride: usize,
    /// When off, RGB features bypass the attention module and the
    /// auxiliary terms are zero.
    pub attention: bool,
}

/// Last-stage RGB features around the attention module and the fused map.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub rgb: Var,
    pub enhanced: Var,
    pub fused: Var,
}

impl ToyDetector {
    pub fn new(store: &mut ParamStore, cfg: &HarnessConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let channels = *cfg.backbone.widths.last().context("backbone has no stages")?;
        Ok(Self {
            backbone: Backbone::new(store, BACKBONE, &cfg.backbone.to_core(), rng)?,
            mta: Mta::new(store, "mta", channels, &cfg.mta.to_core(), rng)?,
            dcfm: Dcfm::new(store, "dcfm", channels, &cfg.dcfm.to_core(), rng),
            det: DetectionHead::new(store, "det", channels, rng),
            tpa: TpaHead::new(store, TPA, channels, rng),
            stride: cfg.backbone.stride(),
            attention: cfg.overfit.attention,
        })
    }

    pub fn features(&self, g: &mut Graph, p: &Binding, rgb: Var, ir: Var) -> Result<Features> {
        let pairs = self.backbone.forward(g, p, rgb, ir)?;
        let last = *pairs.last().context("backbone produced no stages")?;
        let enhanced = if self.attention {
            self.mta.forward(g, p, last.rgb)?
        } else {
            last.rgb
        };
        let fused = self.dcfm.forward(
            g,
            p,
            &FeaturePair {
                rgb: enhanced,
                ir: last.ir,
                stage: last.stage,
            },
        )?;
        Ok(Features {
            rgb: last.rgb,
            enhanced,
            fused,
        })
    }

    /// Scalar training loss and its recorded parts.
    pub fn loss(&self, g: &mut Graph, p: &Binding, batch: &Batch) -> Result<(Var, LossBreakdown, Features)> {
        let rgb = g.constant(batch.rgb.clone());
        let ir = g.constant(batch.ir.clone());
        let f = self.features(g, p, rgb, ir)?;
        let (det_cls, det_reg) = self.det.forward(g, p, f.fused, &batch.cells, &batch.offsets)?;
        let (aux_cls, aux_reg) = if self.attention {
            let aux = self.tpa.forward(g, p, f.enhanced, &batch.cells, &batch.offsets)?;
            (aux.cls, aux.reg)
        } else {
            (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
        };
        let (total, parts) = g.total_loss(LossTerms {
            det_cls,
            det_reg,
            aux_cls,
            aux_reg,
        })?;
        Ok((total, parts, f))
    }
}

/// Spatial weights `[h, w]` of the attention module for every image.
fn attention_weights(model: &ToyDetector, store: &ParamStore, batch: &Batch) -> Result<Vec<Tensor>> {
    if !model.attention {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let rgb = g.constant(batch.rgb.clone());
    let ir = g.constant(batch.ir.clone());
    let pairs = model.backbone.forward(&mut g, &p, rgb, ir)?;
    let last = *pairs.last().context("backbone produced no stages")?;
    let w = model.mta.weights(&mut g, &p, last.rgb)?;
    energy_maps(g.value(w))
}

/// Channel mean of `|x|` for every image of `x[N, C, H, W]`, each `[H, W]`.
pub fn energy_maps(x: &Tensor) -> Result<Vec<Tensor>> {
    let &[n, c, h, w] = x.shape() else {
        bail!("expected [N, C, H, W], got {:?}", x.shape());
    };
    let plane = h * w;
    (0..n)
        .map(|b| {
            let mut m = vec![0.0; plane];
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for (o, v) in m.iter_mut().zip(&x.data()[base..base + plane]) {
                    *o += v.abs() / c as f64;
                }
            }
            Ok(Tensor::from_vec(&[h, w], m)?)
        })
        .collect()
}

/// Per-image `[h, w]` channel-energy maps of the trained network.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// Last-stage RGB features.
    pub rgb: Vec<Tensor>,
    /// RGB features after the attention module.
    pub enhanced: Vec<Tensor>,
    /// Fused features fed to the detection head.
    pub fused: Vec<Tensor>,
    /// Spatial weights of the attention module at the start and at the end
    /// of joint training; empty when the attention is off.
    pub initial_weights: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    /// One row per evaluation, step 0 being the untrained joint model.
    pub rows: Vec<LossBreakdown>,
    /// Auxiliary-head parameters after phase 1 and after phase 2.
    pub tpa_before: Vec<Tensor>,
    pub tpa_after: Vec<Tensor>,
    /// Final auxiliary loss of phase 1; NaN when the attention is off.
    pub pretrain_loss: f64,
    pub maps: FeatureMaps,
    pub pairs: Vec<SyntheticPair>,
    pub store: ParamStore,
}

impl OverfitOutcome {
    pub fn initial(&self) -> f64 {
        self.rows[0].total
    }

    pub fn last(&self) -> f64 {
        self.rows.last().expect("at least one row").total
    }

    /// Whether the auxiliary head is bit-identical before and after phase 2.
    pub fn tpa_unchanged(&self) -> bool {
        self.tpa_before.len() == self.tpa_after.len()
            && self.tpa_before.iter().zip(&self.tpa_after).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn tpa_values(store: &ParamStore) -> Vec<Tensor> {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(&format!("{TPA}.")))
        .map(|id| store.get(id).clone())
        .collect()
}

/// Fits the auxiliary head on fixed features of the untrained network.
fn pretrain_tpa(model: &ToyDetector, store: &mut ParamStore, batch: &Batch, cfg: &HarnessConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let rgb = g.constant(batch.rgb.clone());
    let ir = g.constant(batch.ir.clone());
    let f = model.features(&mut g, &p, rgb, ir)?;
    let feats = g.value(f.enhanced).clone();

    let others: Vec<_> = store
        .ids()
        .filter(|&id| !store.name(id).starts_with(&format!("{TPA}.")))
        .collect();
    others.iter().for_each(|&id| store.set_frozen(id, true));
    let mut last = f64::NAN;
    for step in 0..=cfg.tpa.pretrain_steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(feats.clone());
        let aux = model.tpa.forward(&mut g, &p, x, &batch.cells, &batch.offsets)?;
        let loss = g.add(aux.cls, aux.reg)?;
        last = g.value(loss).item()?;
        if step == cfg.tpa.pretrain_steps {
            break;
        }
        g.backward(loss)?;
        store.sgd_step(&g, &p, cfg.tpa.pretrain_lr);
    }
    others.iter().for_each(|&id| store.set_frozen(id, false));
    Ok(last)
}

/// Runs both phases in memory.
pub fn run_overfit(cfg: &HarnessConfig) -> Result<OverfitOutcome> {
    cfg.validate()?;
    let o = &cfg.overfit;
    let pairs = gen_synthetic_pairs(o.pairs, o.height, o.width, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut store = ParamStore::new();
    let model = ToyDetector::new(&mut store, cfg, &mut rng)?;
    let batch = Batch::new(&pairs, model.stride)?;

    let pretrain_loss = if model.attention {
        pretrain_tpa(&model, &mut store, &batch, cfg)?
    } else {
        f64::NAN
    };
    model.tpa.set_frozen(&mut store, true);
    let tpa_before = tpa_values(&store);
    let initial_weights = attention_weights(&model, &store, &batch)?;

    let mut rows = Vec::with_capacity(o.steps + 1);
    let mut finals = None;
    for step in 0..=o.steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (loss, parts, f) = model
            .loss(&mut g, &p, &batch)
            .with_context(|| format!("diverged at step {step}: forward pass failed; lower the learning rate"))?;
        rows.push(parts);
        if parts.total > DIVERGENCE_FACTOR * rows[0].total {
            bail!(
                "diverged at step {step}: total {} exceeds {DIVERGENCE_FACTOR}x the initial {} \
                 (det_cls {}, det_reg {}, aux_cls {}, aux_reg {}); lower the learning rate",
                parts.total,
                rows[0].total,
                parts.det_cls,
                parts.det_reg,
                parts.aux_cls,
                parts.aux_reg
            );
        }
        if step == o.steps {
            finals = Some(FeatureMaps {
                rgb: energy_maps(g.value(f.rgb))?,
                enhanced: energy_maps(g.value(f.enhanced))?,
                fused: energy_maps(g.value(f.fused))?,
                initial_weights: Vec::new(),
                weights: attention_weights(&model, &store, &batch)?,
            });
            break;
        }
        g.backward(loss)?;
        store.sgd_step(&g, &p, o.lr);
    }
    let mut maps = finals.context("no evaluation recorded")?;
    maps.initial_weights = initial_weights;
    Ok(OverfitOutcome {
        rows,
        tpa_after: tpa_values(&store),
        tpa_before,
        pretrain_loss,
        maps,
        pairs,
        store,
    })
}

/// Image identifiers used for files and annotation rows.
pub fn image_id(index: usize) -> String {
    format!("img{index:03}")
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OverfitFiles {
    pub losses: PathBuf,
    pub checkpoint: PathBuf,
    pub annotations: PathBuf,
    pub rgb_dir: PathBuf,
    pub enhanced_dir: PathBuf,
    pub fused_dir: PathBuf,
    pub initial_weights_dir: PathBuf,
    pub weights_dir: PathBuf,
}

/// Loss curve CSV, checkpoint, annotations and the three sets of maps.
pub fn write_outputs(outcome: &OverfitOutcome, out: &Path) -> Result<OverfitFiles> {
    let files = OverfitFiles {
        losses: out.join("losses.csv"),
        checkpoint: out.join("checkpoint.dmmc"),
        annotations: out.join("annotations.csv"),
        rgb_dir: out.join("maps").join("rgb"),
        enhanced_dir: out.join("maps").join("mta"),
        fused_dir: out.join("maps").join("fused"),
        initial_weights_dir: out.join("maps").join("weights_initial"),
        weights_dir: out.join("maps").join("weights"),
    };

    let mut w = BufWriter::new(fs::File::create(&files.losses)?);
    writeln!(w, "{}", LossBreakdown::csv_header())?;
    for (step, row) in outcome.rows.iter().enumerate() {
        writeln!(w, "{}", row.csv_row(step))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(&files.checkpoint)?);
    write_checkpoint(&mut w, &outcome.store)?;
    w.flush()?;

    let entries: Vec<(String, &[_])> = outcome
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (image_id(i), p.boxes.as_slice()))
        .collect();
    write_annotations(fs::File::create(&files.annotations)?, &entries)?;

    let m = &outcome.maps;
    let sets = [
        (&files.rgb_dir, &m.rgb),
        (&files.enhanced_dir, &m.enhanced),
        (&files.fused_dir, &m.fused),
        (&files.initial_weights_dir, &m.initial_weights),
        (&files.weights_dir, &m.weights),
    ];
    for (dir, maps) in sets {
        if maps.is_empty() {
            continue;
        }
        fs::create_dir_all(dir)?;
        for (i, t) in maps.iter().enumerate() {
            save_tensor(dir.join(format!("{}.dmmt", image_id(i))), t, Precision::F64)?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneSection, OverfitSection, TpaSection};

    fn tiny(steps: usize) -> HarnessConfig {
        HarnessConfig {
            backbone: BackboneSection {
                stem: 4,
                depths: vec![1],
                widths: vec![4],
                nstate: 2,
                ..Default::default()
            },
            overfit: OverfitSection {
                pairs: 2,
                height: 16,
                width: 16,
                steps,
                lr: 1e-2,
                attention: true,
            },
            tpa: TpaSection {
                pretrain_steps: 5,
                pretrain_lr: 0.5,
            },
            ..HarnessConfig::default()
        }
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let a = run_overfit(&tiny(3)).unwrap();
        let b = run_overfit(&tiny(3)).unwrap();
        assert_eq!(a.rows.len(), 4);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        assert_eq!(a.store.values(), b.store.values());
    }

    #[test]
    fn auxiliary_head_is_frozen_during_joint_training() {
        let out = run_overfit(&tiny(3)).unwrap();
        assert!(out.tpa_unchanged());
        assert_eq!(out.tpa_before.len(), 4);
        // The rest of the network did move.
        let fresh = {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            ToyDetector::new(&mut store, &tiny(3), &mut rng).unwrap();
            store
        };
        let moved = fresh
            .ids()
            .filter(|&id| !fresh.name(id).starts_with("tpa."))
            .any(|id| fresh.get(id) != out.store.get(id));
        assert!(moved);
    }

    #[test]
    fn pretraining_lowers_the_auxiliary_loss() {
        let mut cfg = tiny(0);
        cfg.tpa.pretrain_steps = 0;
        let before = run_overfit(&cfg).unwrap();
        cfg.tpa.pretrain_steps = 30;
        let after = run_overfit(&cfg).unwrap();
        assert!(after.pretrain_loss < before.pretrain_loss);
        assert!(after.rows[0].aux_cls + after.rows[0].aux_reg < before.rows[0].aux_cls + before.rows[0].aux_reg);
    }

    #[test]
    fn recorded_total_is_sum_of_parts() {
        for r in run_overfit(&tiny(2)).unwrap().rows {
            assert_eq!(r.total, ((r.det_cls + r.det_reg) + r.aux_cls) + r.aux_reg);
        }
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let mut cfg = tiny(20);
        cfg.overfit.lr = 1e3;
        let err = format!("{:#}", run_overfit(&cfg).unwrap_err());
        assert!(err.contains("diverged"), "{err}");
    }

    #[test]
    fn ablation_bypasses_attention_and_auxiliary_terms() {
        let mut cfg = tiny(2);
        cfg.overfit.attention = false;
        let out = run_overfit(&cfg).unwrap();
        assert!(out.pretrain_loss.is_nan());
        for r in &out.rows {
            assert_eq!((r.aux_cls, r.aux_reg), (0.0, 0.0));
        }
        for (a, b) in out.maps.rgb.iter().zip(&out.maps.enhanced) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn energy_maps_average_absolute_channels() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, -2.0, -3.0, 4.0]).unwrap();
        let m = energy_maps(&x).unwrap();
        assert_eq!(m[0].data(), &[2.0, 3.0]);
    }

    #[test]
    fn outputs_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_overfit(&tiny(1)).unwrap();
        let files = write_outputs(&out, dir.path()).unwrap();
        let csv = fs::read_to_string(&files.losses).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(files.checkpoint.exists());
        assert!(files.rgb_dir.join("img001.dmmt").exists());
        assert!(files.enhanced_dir.join("img000.dmmt").exists());
        assert!(files.fused_dir.join("img001.dmmt").exists());
    }
}
