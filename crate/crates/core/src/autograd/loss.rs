use super::elementwise::sigmoid;
use super::{Graph, InputGrads, Op, Var};
use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// Per-element smooth-L1 (Huber with unit threshold).
pub fn smooth_l1_elem(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

impl Graph {
    /// Mean negative log-softmax of the true class over rows of `logits[M, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(mismatch("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (m, k) = (t.shape()[0], t.shape()[1]);
        if m == 0 {
            return Err(invalid("cross_entropy", "empty batch"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[label];
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / m as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", t.shape(), targets.shape()));
        }
        if t.numel() == 0 {
            return Err(invalid("bce_with_logits", "empty input"));
        }
        if targets.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(invalid("bce_with_logits", "targets must lie in [0, 1]"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / t.numel() as f64);
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Mean smooth-L1 of `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch("smooth_l1", p.shape(), t.shape()));
        }
        if p.numel() == 0 {
            return Err(invalid("smooth_l1", "empty input"));
        }
        let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| smooth_l1_elem(a - b)).sum();
        let value = Tensor::scalar(total / p.numel() as f64);
        self.push(value, Op::SmoothL1 { pred, target }, "smooth_l1")
    }

    pub(super) fn cross_entropy_backward(
        &self,
        logits: Var,
        labels: &[usize],
        probs: &[f64],
        grad: &[f64],
    ) -> InputGrads {
        let m = labels.len();
        let k = probs.len() / m;
        let scale = grad[0] / m as f64;
        let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        for (r, &label) in labels.iter().enumerate() {
            gl[r * k + label] -= scale;
        }
        vec![(logits, gl)]
    }

    pub(super) fn bce_backward(&self, logits: Var, targets: &[f64], grad: &[f64]) -> InputGrads {
        let z = self.value(logits).data();
        let scale = grad[0] / z.len() as f64;
        let gl = z.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
        vec![(logits, gl)]
    }

    pub(super) fn smooth_l1_backward(&self, pred: Var, target: Var, grad: &[f64]) -> InputGrads {
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let scale = grad[0] / p.len() as f64;
        let gp: Vec<f64> = p.iter().zip(t).map(|(a, b)| smooth_l1_grad(a - b) * scale).collect();
        let gt = gp.iter().map(|g| -g).collect();
        vec![(pred, gp), (target, gt)]
    }
}
