//! Acceptance gate: one pass/fail line per criterion. Built without the
//! libtest harness so the lines always reach stdout; exits nonzero when any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use dmm_core::autograd::{phi1, phi1_taylor, Graph, PHI1_TAYLOR_THRESHOLD};
use dmm_core::backbone::{BackboneConfig, FeaturePair, VssBlock};
use dmm_core::dcfm::{Dcfm, DcfmConfig};
use dmm_core::gradcheck::GradcheckConfig;
use dmm_core::metrics::{AnnotatedImage, OrientedBox, Scaling, SfacReport, SizeBucket, Target};
use dmm_core::mta::{Mta, MtaConfig};
use dmm_core::params::ParamStore;
use dmm_core::ssm::{discretize_zoh, scan_parallel, scan_sequential};
use dmm_core::tensor::Tensor;
use dmm_harness::bench::run_scaling_bench;
use dmm_harness::config::HarnessConfig;
use dmm_harness::fixture::planted_contrast;
use dmm_harness::report::score_maps;
use dmm_harness::suite::{negative_control, Suite};
use dmm_harness::train::{run_overfit, OverfitOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Runs one criterion under a wall-clock budget.
fn gate(id: usize, name: &'static str, budget: Duration, f: impl FnOnce() -> Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (passed, mut detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e:#}")),
    };
    let took = start.elapsed();
    let in_time = took <= budget;
    detail.push_str(&format!("; {:.2} s of {} s", took.as_secs_f64(), budget.as_secs()));
    if !in_time {
        detail.push_str(" OVER BUDGET");
    }
    let line = Line {
        id,
        name,
        passed: passed && in_time,
        detail,
    };
    println!(
        "[{}] {}. {}: {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail
    );
    line
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

fn scan_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.random_range(1..=64);
        let s = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=2);
        let x = uniform(&mut rng, &[n, l, d], -1.0, 1.0);
        let abar = uniform(&mut rng, &[n, l, d, s], 0.0, 1.0);
        let bbar = uniform(&mut rng, &[n, l, d, s], -1.0, 1.0);
        let c = uniform(&mut rng, &[n, l, s], -1.0, 1.0);
        let skip = uniform(&mut rng, &[d], -1.0, 1.0);
        let seq = scan_sequential(&x, &abar, &bbar, &c, Some(&skip))?;
        let par = scan_parallel(&x, &abar, &bbar, &c, Some(&skip))?;
        worst = worst.max(seq.max_abs_diff(&par)?);
    }
    Ok((
        worst < 1e-10,
        format!("100 instances, max |parallel - sequential| = {worst:.3e} (< 1e-10)"),
    ))
}

fn zoh() -> Result<(bool, String)> {
    let delta = Tensor::from_vec(&[1, 1, 1], vec![std::f64::consts::LN_2])?;
    let a = Tensor::from_vec(&[1, 1], vec![-1.0])?;
    let b = Tensor::from_vec(&[1, 1, 1], vec![1.0])?;
    let (abar, bbar) = discretize_zoh(&delta, &a, &b)?;
    let closed = (abar.data()[0] - 0.5).abs().max((bbar.data()[0] - 0.5).abs());
    // both sides of the series switch, for either sign of the exponent
    let below = PHI1_TAYLOR_THRESHOLD * (1.0 - 1e-9);
    let mut branch = 0.0f64;
    for z in [PHI1_TAYLOR_THRESHOLD, -PHI1_TAYLOR_THRESHOLD, below, -below] {
        branch = branch.max((phi1_taylor(z) - z.exp_m1() / z).abs());
    }
    let seam = (phi1(PHI1_TAYLOR_THRESHOLD) - phi1(below)).abs();
    // and through the discretization at |ΔA| = 1e-6
    let dt = 1e-6;
    let delta = Tensor::from_vec(&[1, 1, 1], vec![dt])?;
    let (_, bbar) = discretize_zoh(&delta, &a, &b)?;
    let through = (bbar.data()[0] / dt - (-dt).exp_m1() / -dt).abs();
    let worst = branch.max(through);
    Ok((
        closed < 1e-12 && worst < 1e-12 && seam < 1e-12,
        format!("closed form err {closed:.1e}; series vs exact {worst:.1e}; seam jump {seam:.1e} (< 1e-12)"),
    ))
}

fn gradient_suite() -> Result<(bool, String)> {
    let cfg = GradcheckConfig::default();
    let suite = Suite::registered();
    ensure!(suite.uncovered()?.is_empty(), "op kinds without a check");
    let rows = suite.run(&cfg)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed(&cfg))
        .map(|r| r.name.as_str())
        .collect();
    let worst = rows.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let worst_abs = rows.iter().map(|r| r.report.max_abs_error).fold(0.0, f64::max);
    let control = negative_control().run(&cfg)?;
    let caught = !control.passed();
    let composites = ["vss_block", "dcfm_forward", "mta_forward", "losses"];
    let present = composites.iter().all(|c| rows.iter().any(|r| r.name == *c));
    Ok((
        failed.is_empty() && caught && present,
        format!(
            "{} checks, failing {failed:?}; max rel err {worst:.2e}, max abs err {worst_abs:.2e}; wrong backward caught: {caught}",
            rows.len()
        ),
    ))
}

fn dssm_causality() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let block = Dcfm::new(
        &mut store,
        "dcfm",
        3,
        &DcfmConfig {
            nstate: 4,
            skip: true,
            reverse_branch: true,
        },
        &mut rng,
    );
    let rgb = Tensor::randn(&[1, 3, 4, 5], 1.0, &mut rng);
    let ir = Tensor::randn(&[1, 3, 4, 5], 1.0, &mut rng);
    let bump = Tensor::randn(&[1, 6, 4, 5], 1.0, &mut rng);
    let outputs = |reverse: bool, perturb: bool| -> Result<Vec<f64>> {
        let mut b = block;
        b.reverse_branch = reverse;
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let pair = FeaturePair {
            rgb: g.constant(rgb.clone()),
            ir: g.constant(ir.clone()),
            stage: 0,
        };
        let mut prep = b.prepare(&mut g, &p, &pair)?;
        if perturb {
            let noise = g.constant(bump.clone());
            prep.f_d = g.add(prep.f_d, noise)?;
        }
        let (yr, yi) = b.dssm(&mut g, &p, &prep)?;
        Ok([g.value(yr).data(), g.value(yi).data()].concat())
    };
    let causal = outputs(false, false)? == outputs(false, true)?;
    let sees = outputs(true, false)? != outputs(true, true)?;
    Ok((
        causal && sees,
        format!(
            "forward only: modality outputs bitwise unchanged = {causal}; with reverse branch they change = {sees}"
        ),
    ))
}

fn linear_scaling() -> Result<(bool, String)> {
    let cfg = HarnessConfig::default();
    let rep = run_scaling_bench(&cfg.bench, 64, cfg.seed)?;
    let lens: Vec<usize> = rep.rows.iter().map(|r| r.len).collect();
    let expected: Vec<usize> = (10..=16).map(|p| 1 << p).collect();
    ensure!(lens.starts_with(&expected), "unexpected lengths {lens:?}");
    let ratios: Vec<String> = rep.scan_ratios().iter().map(|r| format!("{r:.2}")).collect();
    Ok((
        (0.85..=1.25).contains(&rep.scan_slope) && rep.attention_slope > 1.7,
        format!(
            "scan slope {:.3} (in [0.85, 1.25]), attention slope {:.3} (> 1.7); scan doubling ratios [{}]",
            rep.scan_slope,
            rep.attention_slope,
            ratios.join(", ")
        ),
    ))
}

fn overfit(slot: &mut Option<OverfitOutcome>) -> Result<(bool, String)> {
    let cfg = HarnessConfig::default();
    ensure!(
        cfg.seed == 0 && cfg.overfit.pairs == 8 && cfg.overfit.steps == 500,
        "defaults drifted"
    );
    ensure!(cfg.overfit.height == 64 && cfg.overfit.width == 64, "defaults drifted");
    let out = run_overfit(&cfg)?;
    let ratio = out.last() / out.initial();
    let frozen = out.tpa_unchanged();
    let detail = format!(
        "total loss {:.4} -> {:.4} ({:.2}% of initial, < 10%); auxiliary head bit-identical: {frozen}",
        out.initial(),
        out.last(),
        100.0 * ratio
    );
    *slot = Some(out);
    Ok((ratio < 0.1 && frozen, detail))
}

fn sfac_analytics(trained: Option<&OverfitOutcome>) -> Result<(bool, String)> {
    let (h, w) = (32, 40);
    let boxes = [
        OrientedBox::axis_aligned(2, 3, 5, 4),
        OrientedBox::axis_aligned(20, 10, 12, 9),
    ];
    let area: usize = boxes.iter().map(|b| b.rasterize(h, w).len()).sum();
    let flat = AnnotatedImage::from_boxes(Tensor::full(&[8, 10], 0.7), h, w, &boxes)?;
    let got = SfacReport::compute(&[flat], Scaling::Raw)?
        .all
        .value
        .unwrap_or(f64::NAN);
    let want = area as f64 / (h * w - area) as f64;
    let uniform_err = (got - want).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rescale_err = 0.0f64;
    for scaling in [Scaling::MinMax, Scaling::Raw] {
        let map = Tensor::uniform(&[8, 10], 0.1, 1.0, &mut rng);
        let k = rng.random_range(0.01..100.0);
        let base = AnnotatedImage::from_boxes(map.clone(), h, w, &boxes)?;
        let scaled = AnnotatedImage::from_boxes(map.map(|v| k * v), h, w, &boxes)?;
        let a = SfacReport::compute(&[base], scaling)?.all.value.unwrap_or(f64::NAN);
        let b = SfacReport::compute(&[scaled], scaling)?.all.value.unwrap_or(f64::NAN);
        rescale_err = rescale_err.max((a - b).abs());
    }

    use SizeBucket::*;
    let cases = [
        (144, ExtremelySmall),
        (145, RelativelySmall),
        (400, RelativelySmall),
        (401, GenerallySmall),
        (1024, GenerallySmall),
        (1025, Normal),
    ];
    let buckets = cases
        .iter()
        .all(|&(a, b)| SizeBucket::of_area(a) == b && Target::new((0..a).collect()).bucket() == b);

    let mut directional = true;
    let mut deltas = Vec::new();
    for scaling in [Scaling::MinMax, Scaling::Raw] {
        let c = planted_contrast(8, 0, scaling)?;
        for ((tag, b), (_, e)) in c.baseline.rows().into_iter().zip(c.enhanced.rows()) {
            let (b, e) = (b.value.unwrap_or(f64::NAN), e.value.unwrap_or(f64::NAN));
            directional &= e > b;
            if scaling == Scaling::MinMax {
                deltas.push(format!("{tag} {:+.0}%", 100.0 * (e / b - 1.0)));
            }
        }
    }
    let ok = uniform_err < 1e-9 && rescale_err < 1e-9 && buckets && directional;
    let mut detail = format!(
        "uniform err {uniform_err:.1e}; rescaling err {rescale_err:.1e}; bucket edges exact: {buckets}; planted targets enhanced > baseline: {directional} [{}]",
        deltas.join(", ")
    );
    if let Some(out) = trained {
        detail.push_str(&format!("; info (not gated) {}", trained_contrast(out)?));
    }
    Ok((ok, detail))
}

/// Contrast of the learned attention weights at the start and the end of
/// joint training on the overfit pairs; reported, not gated.
fn trained_contrast(out: &OverfitOutcome) -> Result<String> {
    let m = &out.maps;
    if m.weights.is_empty() || m.initial_weights.is_empty() {
        return Ok("trained attention maps unavailable".into());
    }
    let boxes: Vec<&[OrientedBox]> = out.pairs.iter().map(|p| &p.boxes[..]).collect();
    let (h, w) = (out.pairs[0].mask.shape()[1], out.pairs[0].mask.shape()[2]);
    let before = score_maps(&m.initial_weights, &boxes, h, w, Scaling::MinMax)?
        .all
        .value
        .unwrap_or(f64::NAN);
    let after = score_maps(&m.weights, &boxes, h, w, Scaling::MinMax)?
        .all
        .value
        .unwrap_or(f64::NAN);
    Ok(format!("trained attention weights {before:.4} -> {after:.4}"))
}

fn structural_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[2, 4, 5, 6], 1.0, &mut rng);

    let mut store = ParamStore::new();
    let block = VssBlock::new(
        &mut store,
        "vss",
        4,
        &BackboneConfig {
            nstate: 4,
            ..Default::default()
        },
        &mut rng,
    );
    block.zero_branch(&mut store);
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let vx = g.constant(x.clone());
    let y = block.forward(&mut g, &p, vx)?;
    let vss = g.value(y).data() == x.data();

    let mut store = ParamStore::new();
    let dcfm = Dcfm::new(&mut store, "dcfm", 2, &DcfmConfig::default(), &mut rng);
    dcfm.cab_rgb.zero(&mut store);
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let vx = g.constant(x.clone());
    let y = dcfm.cab_rgb.forward(&mut g, &p, vx)?;
    let cab = g.value(y).data().iter().zip(x.data()).all(|(a, b)| *a == 1.5 * b);

    let mut store = ParamStore::new();
    let mta = Mta::new(&mut store, "mta", 4, &MtaConfig::default(), &mut rng)?;
    mta.zero_attention(&mut store);
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let vx = g.constant(x.clone());
    let y = mta.forward(&mut g, &p, vx)?;
    let attn = g.value(y).data().iter().zip(x.data()).all(|(a, b)| *a == 1.5 * b);

    let mut store = ParamStore::new();
    let dcfm = Dcfm::new(&mut store, "dcfm", 4, &DcfmConfig::default(), &mut rng);
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let same = g.constant(x.clone());
    let prep = dcfm.prepare(
        &mut g,
        &p,
        &FeaturePair {
            rgb: same,
            ir: same,
            stage: 0,
        },
    )?;
    let disparity = g.value(prep.disparity).data().iter().all(|&v| v == 0.0);

    Ok((
        vss && cab && attn && disparity,
        format!("zero-branch block is identity: {vss}; zero channel attention gives 1.5F: {cab}; zero spatial attention gives 1.5x: {attn}; identical modalities give zero disparity: {disparity}"),
    ))
}

fn main() -> ExitCode {
    let mut trained = None;
    let lines = vec![
        gate(1, "scan oracle equivalence", Duration::from_secs(10), scan_equivalence),
        gate(2, "zero-order-hold discretization", Duration::from_secs(1), zoh),
        gate(3, "gradient suite", Duration::from_secs(120), gradient_suite),
        gate(4, "disparity scan causality", Duration::from_secs(5), dssm_causality),
        gate(5, "linear scan scaling", Duration::from_secs(300), linear_scaling),
        gate(6, "end-to-end overfit", Duration::from_secs(600), || {
            overfit(&mut trained)
        }),
        gate(7, "attention contrast analytics", Duration::from_secs(60), || {
            sfac_analytics(trained.as_ref())
        }),
        gate(
            8,
            "structural identities",
            Duration::from_secs(5),
            structural_identities,
        ),
    ];
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("{} of {} criteria pass", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
