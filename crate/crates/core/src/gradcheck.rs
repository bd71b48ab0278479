//! Central finite-difference verification of analytic gradients.

use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Absolute discrepancies at or below this count as exact agreement.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// One coordinate where analytic and numeric gradients were compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric|`.
    pub abs_error: f64,
    /// Zero when `abs_error` is within the absolute floor.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over verdict coordinates.
    pub max_abs_error: f64,
    pub worst: Option<Coordinate>,
    /// Coordinates sitting on a kink (e.g. a max-pool tie), excluded from the verdict.
    pub tie_ambiguous: Vec<Coordinate>,
    pub failures: Vec<Coordinate>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares the tape gradient of scalar `f` against central differences at
/// every coordinate of every input.
///
/// A coordinate that fails is probed for a kink: if the mismatch between the
/// one-sided slopes does not shrink with the step, the function is not
/// differentiable there and the coordinate is reported as tie-ambiguous
/// rather than as a failure.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item()?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let again = evaluate(&f, inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let h = cfg.step;
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
        .collect();
    // Every probe evaluates on its own tape; results are folded in order.
    let probed: Vec<Result<(Coordinate, bool)>> = coords
        .par_iter()
        .map(|&(k, i)| {
            let at = |delta: f64| -> Result<f64> {
                let mut work = inputs.to_vec();
                work[k].data_mut()[i] += delta;
                evaluate(&f, &work)
            };
            let (plus, minus) = (at(h)?, at(-h)?);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k][i];
            let coord = Coordinate {
                input: k,
                index: i,
                analytic: a,
                numeric,
                abs_error: (a - numeric).abs(),
                rel_error: relative_error(a, numeric, cfg.abs_floor),
            };
            if coord.rel_error < cfg.tolerance {
                return Ok((coord, false));
            }
            let wide = ((plus - base) / h - (base - minus) / h).abs();
            let (p2, m2) = (at(h / 2.0)?, at(-h / 2.0)?);
            let narrow = ((p2 - base) / (h / 2.0) - (base - m2) / (h / 2.0)).abs();
            Ok((coord, wide > cfg.abs_floor && narrow > 0.75 * wide))
        })
        .collect();

    let mut report = GradcheckReport::default();
    for item in probed {
        let (coord, kink) = item?;
        report.checked += 1;
        if kink {
            report.tie_ambiguous.push(coord);
            continue;
        }
        if coord.rel_error >= cfg.tolerance {
            report.failures.push(coord);
        }
        report.max_abs_error = report.max_abs_error.max(coord.abs_error);
        if report.worst.is_none() || coord.rel_error > report.max_rel_error {
            report.max_rel_error = coord.rel_error;
            report.worst = Some(coord);
        }
    }
    Ok(report)
}

/// [`gradcheck`] over `inputs` followed by every parameter of `store`,
/// which `f` sees through a [`Binding`].
pub fn gradcheck_params<F>(
    f: F,
    inputs: &[Tensor],
    store: &ParamStore,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var], &Binding) -> Result<Var> + Sync,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.values());
    gradcheck(
        |g, v| {
            let binding = Binding::from_vars(v[n..].to_vec());
            f(g, &v[..n], &binding)
        },
        &all,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut StdRng::seed_from_u64(seed))
    }

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let report = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[random(&[3, 4], 1)],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
        assert!(
            report.max_abs_error > 0.0 && report.max_abs_error < 1e-8,
            "{}",
            report.max_abs_error
        );
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn layernorm_gradient_passes() {
        let x = random(&[2, 3, 2, 2], 2);
        let gamma = random(&[3], 3);
        let beta = random(&[3], 4);
        let weights = random(&[2, 3, 2, 2], 5);
        let report = gradcheck(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1, 1e-5)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &[x, gamma, beta],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn max_pool_tie_is_flagged_not_failed() {
        let x = Tensor::from_vec(&[4], vec![1.0, 4.0, 4.0, 2.0]).unwrap();
        let report = gradcheck(
            |g, v| {
                let m = g.max_pool(v[0], &[0])?;
                g.sum(m)
            },
            &[x],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        let flagged: Vec<usize> = report.tie_ambiguous.iter().map(|c| c.index).collect();
        assert_eq!(flagged, vec![1, 2]);
    }

    #[test]
    fn wrong_backward_rule_is_reported() {
        let report = gradcheck(
            |g, v| {
                let y = g.custom_unary(v[0], f64::sin, |x| 1.1 * x.cos())?;
                g.sum(y)
            },
            &[random(&[5], 6)],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 5);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let calls = AtomicU32::new(0);
        let result = gradcheck(
            |g, v| {
                let n = calls.fetch_add(1, Ordering::SeqCst) + 1;
                let c = g.constant(Tensor::scalar(f64::from(n)));
                let s = g.sum(v[0])?;
                g.mul(s, c)
            },
            &[random(&[2], 7)],
            &GradcheckConfig::default(),
        );
        assert!(matches!(result, Err(Error::NonDeterministic { .. })));
    }
}
