//! Registry of finite-difference gradient checks covering every recorded
//! op kind and the composite blocks.

use std::collections::BTreeSet;
use std::io::Write;

use anyhow::{bail, Result};
use dmm_core::autograd::ConvSpec;
use dmm_core::backbone::{BackboneConfig, FeaturePair, VssBlock};
use dmm_core::dcfm::{Dcfm, DcfmConfig};
use dmm_core::gradcheck::{gradcheck_params, GradcheckConfig, GradcheckReport};
use dmm_core::mta::{DetectionHead, LossTerms, Mta, MtaConfig, TpaHead};
use dmm_core::ssm::{ScanKind, Ss2dParams, SsmConfig, SsmParams};
use dmm_core::{Binding, Graph, OpKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type CheckFn = dyn Fn(&mut Graph, &[Var], &Binding) -> dmm_core::Result<Var> + Sync;

/// One scalar function with its inputs and parameters.
pub struct Check {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub store: ParamStore,
    pub f: Box<CheckFn>,
}

impl Check {
    pub fn new<F>(name: &str, inputs: Vec<Tensor>, store: ParamStore, f: F) -> Self
    where
        F: Fn(&mut Graph, &[Var], &Binding) -> dmm_core::Result<Var> + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            inputs,
            store,
            f: Box::new(f),
        }
    }

    /// Op kinds recorded by one forward pass.
    pub fn kinds(&self) -> Result<BTreeSet<OpKind>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let binding = self.store.bind(&mut g);
        (self.f)(&mut g, &vars, &binding)?;
        Ok(g.kinds_used())
    }

    pub fn run(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        Ok(gradcheck_params(
            |g, v, p| (self.f)(g, v, p),
            &self.inputs,
            &self.store,
            cfg,
        )?)
    }
}

/// Outcome of one registered check.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradcheckReport,
}

impl SuiteRow {
    pub fn passed(&self, cfg: &GradcheckConfig) -> bool {
        self.report.passed() && self.report.max_rel_error < cfg.tolerance
    }
}

pub struct Suite {
    pub checks: Vec<Check>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Contracts `y` with fixed random weights so every output coordinate
/// carries a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> dmm_core::Result<Var> {
    let r = g.constant(randn(g.shape(y), seed));
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Nonzero biases so that every parameter carries gradient signal.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        if name.ends_with(".b") || name.ends_with(".beta") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.2, &mut r)).expect("same shape");
        }
    }
}

fn unary(name: &str, seed: u64, op: fn(&mut Graph, Var) -> dmm_core::Result<Var>) -> Check {
    Check::new(name, vec![randn(&[2, 3], seed)], ParamStore::new(), move |g, v, _| {
        let y = op(g, v[0])?;
        probe(g, y, seed + 100)
    })
}

fn primitives() -> Vec<Check> {
    let mut out = vec![
        Check::new(
            "add",
            vec![randn(&[2, 3], 1), randn(&[3], 2)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.add(v[0], v[1])?;
                probe(g, y, 101)
            },
        ),
        Check::new(
            "sub",
            vec![randn(&[2, 3], 3), randn(&[2, 1], 4)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.sub(v[0], v[1])?;
                probe(g, y, 102)
            },
        ),
        Check::new(
            "mul",
            vec![randn(&[2, 3], 5), randn(&[1, 3], 6)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.mul(v[0], v[1])?;
                probe(g, y, 103)
            },
        ),
        unary("exp", 7, |g, x| g.exp(x)),
        unary("sigmoid", 8, |g, x| g.sigmoid(x)),
        unary("relu", 9, |g, x| g.relu(x)),
        unary("silu", 10, |g, x| g.silu(x)),
        unary("softplus", 11, |g, x| g.softplus(x)),
        Check::new(
            "phi1",
            vec![Tensor::from_vec(&[6], vec![-2.0, -0.3, -1e-3, 2e-3, 0.4, 1.5]).expect("6 values")],
            ParamStore::new(),
            |g, v, _| {
                let y = g.phi1(v[0])?;
                probe(g, y, 104)
            },
        ),
        unary("scale", 12, |g, x| g.scale(x, -2.5)),
        Check::new(
            "linear",
            vec![randn(&[2, 3, 4], 13), randn(&[4, 5], 14), randn(&[5], 15)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                probe(g, y, 105)
            },
        ),
        Check::new(
            "conv2d",
            vec![randn(&[1, 2, 5, 5], 16), randn(&[3, 2, 3, 3], 17), randn(&[3], 18)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 1))?;
                probe(g, y, 106)
            },
        ),
        Check::new(
            "conv2d_depthwise",
            vec![randn(&[2, 3, 4, 4], 19), randn(&[3, 1, 3, 3], 20)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3, 3))?;
                probe(g, y, 107)
            },
        ),
        Check::new(
            "layernorm",
            vec![randn(&[2, 3, 2, 2], 21), randn(&[3], 22), randn(&[3], 23)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.layernorm(v[0], v[1], v[2], 1, 1e-5)?;
                probe(g, y, 108)
            },
        ),
        Check::new(
            "avg_pool",
            vec![randn(&[2, 3, 3, 2], 24)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.avg_pool(v[0], &[2, 3])?;
                probe(g, y, 109)
            },
        ),
        Check::new(
            "max_pool",
            vec![randn(&[2, 3, 3, 2], 25)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.max_pool(v[0], &[1])?;
                probe(g, y, 110)
            },
        ),
        Check::new("sum", vec![randn(&[2, 3], 26)], ParamStore::new(), |g, v, _| {
            let y = g.sum(v[0])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        }),
        Check::new("mean", vec![randn(&[2, 3], 27)], ParamStore::new(), |g, v, _| {
            let y = g.mean(v[0])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        }),
        Check::new("reshape", vec![randn(&[2, 3, 2], 28)], ParamStore::new(), |g, v, _| {
            let y = g.reshape(v[0], &[3, 4])?;
            probe(g, y, 111)
        }),
        Check::new("permute", vec![randn(&[2, 3, 4], 29)], ParamStore::new(), |g, v, _| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            probe(g, y, 112)
        }),
        Check::new(
            "concat",
            vec![randn(&[2, 3], 30), randn(&[2, 2], 31)],
            ParamStore::new(),
            |g, v, _| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                probe(g, y, 113)
            },
        ),
        Check::new("slice", vec![randn(&[2, 5], 32)], ParamStore::new(), |g, v, _| {
            let y = g.slice(v[0], 1, 1, 3)?;
            probe(g, y, 114)
        }),
        Check::new("reverse", vec![randn(&[3, 4], 33)], ParamStore::new(), |g, v, _| {
            let y = g.reverse(v[0], 1)?;
            probe(g, y, 115)
        }),
        Check::new("gather", vec![randn(&[4, 3], 34)], ParamStore::new(), |g, v, _| {
            let y = g.gather(v[0], 0, &[2, 0, 2, 3])?;
            probe(g, y, 116)
        }),
    ];
    let (n, l, d, s) = (2, 5, 3, 2);
    let mut r = rng(35);
    let abar = Tensor::uniform(&[n, l, d, s], 0.2, 0.95, &mut r);
    out.push(Check::new(
        "selective_scan",
        vec![
            randn(&[n, l, d], 36),
            abar,
            randn(&[n, l, d, s], 37),
            randn(&[n, l, s], 38),
            randn(&[d], 39),
        ],
        ParamStore::new(),
        |g, v, _| {
            let y = g.selective_scan(v[0], v[1], v[2], v[3], Some(v[4]), ScanKind::Parallel)?;
            probe(g, y, 117)
        },
    ));
    let labels = [0usize, 2, 1, 1];
    out.push(Check::new(
        "cross_entropy",
        vec![randn(&[4, 3], 40)],
        ParamStore::new(),
        move |g, v, _| g.cross_entropy(v[0], &labels),
    ));
    let targets = Tensor::uniform(&[2, 3], 0.0, 1.0, &mut rng(41));
    out.push(Check::new(
        "bce_with_logits",
        vec![randn(&[2, 3], 42)],
        ParamStore::new(),
        move |g, v, _| g.bce_with_logits(v[0], &targets),
    ));
    out.push(Check::new(
        "smooth_l1",
        vec![Tensor::randn(&[2, 4], 1.5, &mut rng(43)), randn(&[2, 4], 44)],
        ParamStore::new(),
        |g, v, _| g.smooth_l1(v[0], v[1]),
    ));
    out
}

fn ssm_checks() -> Vec<Check> {
    let mut r = rng(50);
    let cfg = SsmConfig::new(3, 2);
    let params = SsmParams::init(&cfg, &mut r);
    let mut store = ParamStore::new();
    let w = params.register(&mut store, "ssm");
    jitter(&mut store, 51);
    let zoh = Check::new(
        "discretize_zoh",
        vec![
            Tensor::uniform(&[1, 2, 3], 0.05, 1.0, &mut r),
            Tensor::uniform(&[3, 2], -2.0, -0.2, &mut r),
            randn(&[1, 2, 2], 52),
        ],
        ParamStore::new(),
        |g, v, _| {
            let (ab, bb) = g.discretize_zoh(v[0], v[1], v[2])?;
            let s1 = probe(g, ab, 118)?;
            let s2 = probe(g, bb, 119)?;
            g.add(s1, s2)
        },
    );
    let ssm = Check::new("selective_ssm", vec![randn(&[1, 4, 3], 53)], store, move |g, v, p| {
        let y = g.selective_ssm(v[0], &w.vars(p), ScanKind::Parallel)?;
        probe(g, y, 120)
    });
    let ss2d_params = Ss2dParams::init(&SsmConfig::new(2, 2), false, &mut r);
    let mut store = ParamStore::new();
    let w2 = ss2d_params.register(&mut store, "ss2d");
    jitter(&mut store, 54);
    let ss2d = Check::new("ss2d_forward", vec![randn(&[1, 2, 2, 3], 55)], store, move |g, v, p| {
        let y = g.ss2d_forward(v[0], &w2.vars(p), ScanKind::Parallel)?;
        probe(g, y, 121)
    });
    vec![zoh, ssm, ss2d]
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem: 3,
        depths: vec![1],
        widths: vec![4],
        nstate: 2,
        ..BackboneConfig::default()
    }
}

fn composites() -> Vec<Check> {
    let mut r = rng(60);
    let mut store = ParamStore::new();
    let block = VssBlock::new(&mut store, "blk", 3, &tiny_backbone(), &mut r);
    jitter(&mut store, 61);
    let vss = Check::new("vss_block", vec![randn(&[1, 3, 3, 3], 62)], store, move |g, v, p| {
        let y = block.forward(g, p, v[0])?;
        probe(g, y, 122)
    });

    let mut store = ParamStore::new();
    let cfg = DcfmConfig {
        nstate: 2,
        ..DcfmConfig::default()
    };
    let dcfm = Dcfm::new(&mut store, "dcfm", 3, &cfg, &mut r);
    jitter(&mut store, 63);
    let fusion = Check::new(
        "dcfm_forward",
        vec![randn(&[1, 3, 2, 2], 64), randn(&[1, 3, 2, 2], 65)],
        store,
        move |g, v, p| {
            let y = dcfm.forward(
                g,
                p,
                &FeaturePair {
                    rgb: v[0],
                    ir: v[1],
                    stage: 0,
                },
            )?;
            probe(g, y, 123)
        },
    );

    let mut store = ParamStore::new();
    let mta = Mta::new(&mut store, "mta", 3, &MtaConfig::default(), &mut r).expect("odd kernels");
    jitter(&mut store, 66);
    let attention = Check::new("mta_forward", vec![randn(&[1, 3, 4, 4], 67)], store, move |g, v, p| {
        let y = mta.forward(g, p, v[0])?;
        probe(g, y, 124)
    });

    let mut store = ParamStore::new();
    let det = DetectionHead::new(&mut store, "det", 3, &mut r);
    let tpa = TpaHead::new(&mut store, "tpa", 3, &mut r);
    jitter(&mut store, 68);
    let mask = Tensor::from_vec(
        &[1, 1, 3, 3],
        (0..9).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect(),
    )
    .expect("9 cells");
    let targets = Tensor::randn(&[1, 4, 3, 3], 1.5, &mut r);
    let losses = Check::new("losses", vec![randn(&[1, 3, 3, 3], 69)], store, move |g, v, p| {
        let (det_cls, det_reg) = det.forward(g, p, v[0], &mask, &targets)?;
        let aux = tpa.forward(g, p, v[0], &mask, &targets)?;
        let terms = LossTerms {
            det_cls,
            det_reg,
            aux_cls: aux.cls,
            aux_reg: aux.reg,
        };
        Ok(g.total_loss(terms)?.0)
    });
    vec![vss, fusion, attention, losses]
}

impl Suite {
    /// Every primitive op kind, the SSM building blocks and the composites.
    pub fn registered() -> Self {
        let mut checks = primitives();
        checks.extend(ssm_checks());
        checks.extend(composites());
        Self { checks }
    }

    /// Op kinds no registered check records.
    pub fn uncovered(&self) -> Result<Vec<OpKind>> {
        let mut seen = BTreeSet::new();
        for c in &self.checks {
            seen.extend(c.kinds()?);
        }
        Ok(OpKind::ALL.into_iter().filter(|k| !seen.contains(k)).collect())
    }

    pub fn run(&self, cfg: &GradcheckConfig) -> Result<Vec<SuiteRow>> {
        let missing = self.uncovered()?;
        if !missing.is_empty() {
            bail!("op kinds without a gradient check: {missing:?}");
        }
        self.checks
            .iter()
            .map(|c| {
                Ok(SuiteRow {
                    name: c.name.clone(),
                    report: c.run(cfg)?,
                })
            })
            .collect()
    }
}

/// A check whose backward rule is deliberately wrong; it must fail.
pub fn negative_control() -> Check {
    Check::new("wrong_backward", vec![randn(&[4], 70)], ParamStore::new(), |g, v, _| {
        let y = g.custom_unary(v[0], f64::sin, |x| 1.1 * x.cos())?;
        probe(g, y, 125)
    })
}

pub const CSV_HEADER: &str = "name,checked,max_rel_error,max_abs_error,failures,tie_ambiguous,passed";

pub fn write_csv<W: Write>(w: W, rows: &[SuiteRow], cfg: &GradcheckConfig) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        out.write_record([
            row.name.clone(),
            row.report.checked.to_string(),
            format!("{:e}", row.report.max_rel_error),
            format!("{:e}", row.report.max_abs_error),
            row.report.failures.len().to_string(),
            row.report.tie_ambiguous.len().to_string(),
            row.passed(cfg).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
