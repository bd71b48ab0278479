use dmm_core::backbone::{Backbone, BackboneConfig, FeaturePair, VssBlock};
use dmm_core::dcfm::{Dcfm, DcfmConfig};
use dmm_core::gradcheck::{gradcheck_params, GradcheckConfig, GradcheckReport};
use dmm_core::mta::{DetectionHead, LossTerms, Mta, MtaConfig, TpaHead};
use dmm_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::{rngs::StdRng, Rng, SeedableRng};

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let r = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Nonzero biases so that every parameter carries gradient signal.
fn jitter(store: &mut ParamStore, rng: &mut StdRng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") || store.name(id).ends_with(".beta") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.2, rng)).unwrap();
        }
    }
}

fn assert_passes(name: &str, r: &GradcheckReport) {
    assert!(r.passed(), "{name}: {} failures, worst {:?}", r.failures.len(), r.worst);
    assert!(r.max_rel_error < 1e-4, "{name}: {}", r.max_rel_error);
    assert!(
        r.tie_ambiguous.is_empty(),
        "{name}: unexpected kinks {:?}",
        r.tie_ambiguous
    );
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem: 3,
        depths: vec![1, 1],
        widths: vec![4, 6],
        nstate: 2,
        ..BackboneConfig::default()
    }
}

#[test]
fn vss_block_on_1x4x3x3() {
    let mut rng = StdRng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let block = VssBlock::new(&mut store, "blk", 4, &tiny_backbone(), &mut rng);
    jitter(&mut store, &mut rng);
    let x = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
    let r = gradcheck_params(
        |g, v, p| {
            let y = block.forward(g, p, v[0])?;
            probe(g, y, 1)
        },
        &[x],
        &store,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_passes("vss_block", &r);
}

#[test]
fn dcfm_on_1x4x2x2_pair() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cfg = DcfmConfig {
        nstate: 2,
        ..DcfmConfig::default()
    };
    let block = Dcfm::new(&mut store, "dcfm", 4, &cfg, &mut rng);
    jitter(&mut store, &mut rng);
    let rgb = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
    let ir = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
    let r = gradcheck_params(
        |g, v, p| {
            let pair = FeaturePair {
                rgb: v[0],
                ir: v[1],
                stage: 0,
            };
            let y = block.forward(g, p, &pair)?;
            probe(g, y, 2)
        },
        &[rgb, ir],
        &store,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_passes("dcfm_forward", &r);
    assert_eq!(r.checked, 2 * 16 + store.numel());
}

#[test]
fn mta_on_1x4x5x5() {
    let mut rng = StdRng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let mta = Mta::new(&mut store, "mta", 4, &MtaConfig::default(), &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
    let r = gradcheck_params(
        |g, v, p| {
            let y = mta.forward(g, p, v[0])?;
            probe(g, y, 3)
        },
        &[x],
        &store,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_passes("mta_forward", &r);
}

#[test]
fn backbone_end_to_end_on_1x3x16x16() {
    let mut rng = StdRng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", &tiny_backbone(), &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let rgb = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
    let ir = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
    let r = gradcheck_params(
        |g, v, p| {
            let pairs = bb.forward(g, p, v[0], v[1])?;
            let mut acc = probe(g, pairs[0].rgb, 4)?;
            for (k, f) in pairs.iter().enumerate() {
                for (j, t) in [f.rgb, f.ir].into_iter().enumerate() {
                    let s = probe(g, t, 10 + 2 * k as u64 + j as u64)?;
                    acc = g.add(acc, s)?;
                }
            }
            Ok(acc)
        },
        &[rgb, ir],
        &store,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_passes("backbone", &r);
}

#[test]
fn detection_and_auxiliary_losses() {
    let mut rng = StdRng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let det = DetectionHead::new(&mut store, "det", 3, &mut rng);
    let tpa = TpaHead::new(&mut store, "tpa", 3, &mut rng);
    jitter(&mut store, &mut rng);
    let mask = Tensor::from_vec(
        &[1, 1, 3, 3],
        (0..9).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect(),
    )
    .unwrap();
    let targets = Tensor::randn(&[1, 4, 3, 3], 1.5, &mut rng);
    let feat = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
    let r = gradcheck_params(
        |g, v, p| {
            let (det_cls, det_reg) = det.forward(g, p, v[0], &mask, &targets)?;
            let aux = tpa.forward(g, p, v[0], &mask, &targets)?;
            let terms = LossTerms {
                det_cls,
                det_reg,
                aux_cls: aux.cls,
                aux_reg: aux.reg,
            };
            Ok(g.total_loss(terms)?.0)
        },
        &[feat],
        &store,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_passes("losses", &r);
}
