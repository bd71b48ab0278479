//! Wall-time scaling of the associative scan against an O(L²) dense
//! attention reference.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};
use dmm_core::ssm::{scan_parallel_raw, ScanDims, ScanInputs};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::BenchSection;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Scan,
    Attention,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Scan => "scan",
            Workload::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub workload: Workload,
    pub len: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Analytic floating-point operation count of one trial.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log length.
    pub scan_slope: f64,
    pub attention_slope: f64,
}

impl BenchReport {
    fn series(&self, w: Workload) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.workload == w).collect()
    }

    /// Time ratio between consecutive lengths of the scan.
    pub fn scan_ratios(&self) -> Vec<f64> {
        self.series(Workload::Scan)
            .windows(2)
            .map(|p| p[1].mean_seconds / p[0].mean_seconds)
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn mean_std(samples: &[Duration]) -> (f64, f64) {
    let secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
    let n = secs.len() as f64;
    let mean = secs.iter().sum::<f64>() / n;
    if secs.len() < 2 {
        return (mean, 0.0);
    }
    let var = secs.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn time_trials(warmup: usize, trials: usize, mut f: impl FnMut()) -> Result<Vec<Duration>> {
    for _ in 0..warmup {
        f();
    }
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        f();
        let dt = start.elapsed();
        if dt < Duration::from_micros(1) {
            bail!("trial took {dt:?}, below the 1 µs timer resolution; use longer sequences");
        }
        out.push(dt);
    }
    Ok(out)
}

fn random<T: Float>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from(rng.random_range(lo..hi)).expect("representable"))
        .collect()
}

/// `out_i = Σ_j (q_i · k_j) v_j` evaluated row by row over `[L, d]` operands.
pub fn dense_attention<T: Float>(q: &[T], k: &[T], v: &[T], d: usize) -> Vec<T> {
    let len = q.len() / d;
    let mut out = vec![T::zero(); len * d];
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let acc = &mut out[i * d..(i + 1) * d];
        for j in 0..len {
            let kj = &k[j * d..(j + 1) * d];
            let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
            for (a, &vj) in acc.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *a = *a + s * vj;
            }
        }
    }
    out
}

fn bench_scan<T: Float + Send + Sync>(cfg: &BenchSection, len: usize, rng: &mut ChaCha8Rng) -> Result<BenchRow> {
    let dims = ScanDims {
        batch: 1,
        len,
        channels: cfg.channels,
        nstate: cfg.nstate,
    };
    let states = len * cfg.channels * cfg.nstate;
    let x: Vec<T> = random(rng, len * cfg.channels, -1.0, 1.0);
    let abar: Vec<T> = random(rng, states, 0.5, 0.999);
    let bbar: Vec<T> = random(rng, states, -0.1, 0.1);
    let c: Vec<T> = random(rng, len * cfg.nstate, -1.0, 1.0);
    let d: Vec<T> = random(rng, cfg.channels, -1.0, 1.0);
    let inp = ScanInputs {
        dims,
        x: &x,
        abar: &abar,
        bbar: &bbar,
        c: &c,
        d_skip: Some(&d),
    };
    let samples = time_trials(cfg.warmup, cfg.trials, || {
        black_box(scan_parallel_raw(black_box(inp), false));
    })?;
    let (mean_seconds, std_seconds) = mean_std(&samples);
    Ok(BenchRow {
        workload: Workload::Scan,
        len,
        mean_seconds,
        std_seconds,
        flops: dims.flops(),
    })
}

fn bench_attention<T: Float>(cfg: &BenchSection, len: usize, rng: &mut ChaCha8Rng) -> Result<BenchRow> {
    let d = cfg.attention_dim;
    let q: Vec<T> = random(rng, len * d, -1.0, 1.0);
    let k: Vec<T> = random(rng, len * d, -1.0, 1.0);
    let v: Vec<T> = random(rng, len * d, -1.0, 1.0);
    let samples = time_trials(cfg.warmup, cfg.trials, || {
        black_box(dense_attention(black_box(&q), black_box(&k), black_box(&v), d));
    })?;
    let (mean_seconds, std_seconds) = mean_std(&samples);
    let flops = (len * len * 4 * d) as u64;
    Ok(BenchRow {
        workload: Workload::Attention,
        len,
        mean_seconds,
        std_seconds,
        flops,
    })
}

fn run_typed<T: Float + Send + Sync>(cfg: &BenchSection, seed: u64) -> Result<BenchReport> {
    if cfg.lengths.len() < 2 || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        bail!("need at least two ascending lengths");
    }
    if cfg.trials == 0 || cfg.channels == 0 || cfg.nstate == 0 || cfg.attention_dim == 0 {
        bail!("trials, channels, nstate and attention_dim must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        rows.push(bench_scan::<T>(cfg, len, &mut rng)?);
    }
    for &len in &cfg.lengths {
        rows.push(bench_attention::<T>(cfg, len, &mut rng)?);
    }
    let slope = |w: Workload| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.workload == w)
            .map(|r| (r.len as f64, r.mean_seconds))
            .collect();
        loglog_slope(&pts)
    };
    Ok(BenchReport {
        scan_slope: slope(Workload::Scan),
        attention_slope: slope(Workload::Attention),
        rows,
    })
}

/// Times both workloads at every configured length, in 32- or 64-bit floats.
pub fn run_scaling_bench(cfg: &BenchSection, precision: u32, seed: u64) -> Result<BenchReport> {
    match precision {
        32 => run_typed::<f32>(cfg, seed),
        64 => run_typed::<f64>(cfg, seed),
        p => bail!("unsupported precision {p}"),
    }
}

pub const CSV_HEADER: &str = "workload,L,mean_seconds,std_seconds,flops";

pub fn write_csv<W: Write>(w: W, report: &BenchReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER.split(','))?;
    for r in &report.rows {
        out.write_record([
            r.workload.name().to_string(),
            r.len.to_string(),
            format!("{:e}", r.mean_seconds),
            format!("{:e}", r.std_seconds),
            r.flops.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let lin: Vec<(f64, f64)> = (0..5).map(|k| (2f64.powi(k), 3.0 * 2f64.powi(k))).collect();
        assert!((loglog_slope(&lin) - 1.0).abs() < 1e-12);
        let quad: Vec<(f64, f64)> = (0..5).map(|k| (2f64.powi(k), 0.5 * 4f64.powi(k))).collect();
        assert!((loglog_slope(&quad) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dense_attention_matches_matrix_form() {
        // (Q Kᵀ) V on a 3×2 example computed by hand.
        let q = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let k = [1.0, 2.0, 0.0, 1.0, -1.0, 0.0];
        let v = [1.0, 1.0, 2.0, 0.0, 0.0, 3.0];
        // Scores row 0: [1, 0, -1]; row 1: [2, 1, 0]; row 2: [3, 1, -1].
        let out = dense_attention(&q, &k, &v, 2);
        assert_eq!(out, vec![1.0, -2.0, 4.0, 2.0, 5.0, 0.0]);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[Duration::from_secs(1), Duration::from_secs(3)]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[Duration::from_secs(2)]), (2.0, 0.0));
    }

    #[test]
    fn small_run_produces_rows_for_both_workloads() {
        let cfg = BenchSection {
            lengths: vec![64, 128, 256],
            trials: 2,
            warmup: 1,
            ..BenchSection::default()
        };
        for precision in [32, 64] {
            let r = run_scaling_bench(&cfg, precision, 0).unwrap();
            assert_eq!(r.rows.len(), 6);
            assert_eq!(r.scan_ratios().len(), 2);
            assert!(r.rows.iter().all(|row| row.mean_seconds > 0.0));
            let mut buf = Vec::new();
            write_csv(&mut buf, &r).unwrap();
            assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
        }
    }

    #[test]
    fn rejects_unsorted_lengths() {
        let cfg = BenchSection {
            lengths: vec![128, 64],
            ..BenchSection::default()
        };
        assert!(run_scaling_bench(&cfg, 64, 0).is_err());
        assert!(run_scaling_bench(&BenchSection::default(), 16, 0).is_err());
    }
}
