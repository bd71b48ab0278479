use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmm_core::gradcheck::GradcheckConfig;
use dmm_core::io::Precision;
use dmm_core::metrics::Scaling;
use dmm_harness::config::HarnessConfig;
use dmm_harness::report::{run_sfac_report, summary, SfacRequest};
use dmm_harness::synth::{gen_synthetic_pairs, write_pairs};
use dmm_harness::{bench, report, suite, train};

#[derive(Parser)]
#[command(
    name = "dmm",
    version,
    about = "Synthetic data, gradient checks, scan benchmark, overfit run and SFAC reports"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point width in bits.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 keeps runs bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded RGB/IR pairs, masks and annotations.
    Gen {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Finite-difference check of every registered op and composite.
    Gradcheck,
    /// Time the scan and a dense-attention reference across lengths.
    Bench {
        /// Comma-separated ascending lengths overriding the config.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pre-fit the auxiliary head, then train the toy detector jointly.
    Overfit {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Ablation: skip the target-aware attention and its auxiliary loss.
        #[arg(long)]
        no_attention: bool,
    },
    /// Attention contrast per target-size bucket.
    Sfac {
        /// Directory of `{image_id}.dmmt` maps.
        #[arg(long)]
        maps: PathBuf,
        /// Second map directory; emits per-bucket deltas against `--maps`.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// CSV with `image_id,cx,cy,w,h,angle_deg,class` rows.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, value_enum, default_value_t = ScalingArg::MinMax)]
        scaling: ScalingArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    MinMax,
    Raw,
}

fn load_config(g: &Global) -> Result<HarnessConfig> {
    let mut cfg = match &g.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = &g.precision {
        cfg.precision = p.parse()?;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn precision(cfg: &HarnessConfig) -> Precision {
    Precision::from_bits(cfg.precision).expect("validated")
}

/// Runs one command; `Ok(false)` means its checks did not pass.
fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.global)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("configuring the thread pool")?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cli.command {
        Command::Gen { pairs, height, width } => {
            let o = &cfg.overfit;
            let (n, h, w) = (
                pairs.unwrap_or(o.pairs),
                height.unwrap_or(o.height),
                width.unwrap_or(o.width),
            );
            let data = gen_synthetic_pairs(n, h, w, cfg.seed)?;
            let dir = cfg.out.join("pairs");
            write_pairs(&data, &dir, precision(&cfg))?;
            println!("wrote {n} pairs of {h}x{w} to {}", dir.display());
            Ok(true)
        }
        Command::Gradcheck => {
            if cfg.precision != 64 {
                bail!("gradient checks need 64-bit precision");
            }
            let gc = GradcheckConfig::default();
            let rows = suite::Suite::registered().run(&gc)?;
            let path = cfg.out.join("gradcheck.csv");
            suite::write_csv(fs::File::create(&path)?, &rows, &gc)?;
            let mut ok = true;
            for r in &rows {
                let pass = r.passed(&gc);
                ok &= pass;
                println!(
                    "{:<18} {:>5} coords  max rel err {:.3e}  max abs err {:.3e}  {}",
                    r.name,
                    r.report.checked,
                    r.report.max_rel_error,
                    r.report.max_abs_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            println!("{} checks, report at {}", rows.len(), path.display());
            Ok(ok)
        }
        Command::Bench { lengths, trials } => {
            if let Some(l) = lengths {
                cfg.bench.lengths = l;
            }
            if let Some(t) = trials {
                cfg.bench.trials = t;
            }
            cfg.validate()?;
            let rep = bench::run_scaling_bench(&cfg.bench, cfg.precision, cfg.seed)?;
            let path = cfg.out.join("bench.csv");
            bench::write_csv(fs::File::create(&path)?, &rep)?;
            for r in &rep.rows {
                println!(
                    "{:<10} L={:>6}  {:.4e} s ± {:.1e}  {} flop",
                    r.workload.name(),
                    r.len,
                    r.mean_seconds,
                    r.std_seconds,
                    r.flops
                );
            }
            println!(
                "log-log slope: scan {:.3}, attention {:.3}",
                rep.scan_slope, rep.attention_slope
            );
            println!("scan doubling ratios: {:?}", rep.scan_ratios());
            Ok(true)
        }
        Command::Overfit {
            steps,
            lr,
            no_attention,
        } => {
            cfg.overfit.attention &= !no_attention;
            if let Some(s) = steps {
                cfg.overfit.steps = s;
            }
            if let Some(l) = lr {
                cfg.overfit.lr = l;
            }
            let outcome = train::run_overfit(&cfg)?;
            let files = train::write_outputs(&outcome, &cfg.out)?;
            let ratio = outcome.last() / outcome.initial();
            println!("auxiliary head pre-fit loss {:.4}", outcome.pretrain_loss);
            println!(
                "total loss {:.4} -> {:.4} ({:.2}% of initial)",
                outcome.initial(),
                outcome.last(),
                100.0 * ratio
            );
            println!("auxiliary head unchanged: {}", outcome.tpa_unchanged());
            println!(
                "loss curve {}, checkpoint {}",
                files.losses.display(),
                files.checkpoint.display()
            );
            Ok(ratio < 0.1 && outcome.tpa_unchanged())
        }
        Command::Sfac {
            maps,
            compare,
            annotations,
            height,
            width,
            scaling,
        } => {
            let scaling = match scaling {
                ScalingArg::MinMax => Scaling::MinMax,
                ScalingArg::Raw => Scaling::Raw,
            };
            let outcome = run_sfac_report(&SfacRequest {
                maps: &maps,
                compare: compare.as_deref(),
                annotations: &annotations,
                height,
                width,
                scaling,
            })?;
            let path = cfg.out.join("sfac.csv");
            report::write_csv(fs::File::create(&path)?, &outcome)?;
            print!("{}", summary(&outcome));
            if outcome.missing > 0 {
                eprintln!("warning: {} annotated images had no map", outcome.missing);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
