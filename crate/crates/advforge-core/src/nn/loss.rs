use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored at this value before any `log`, so perfectly
/// confident (or numerically underflowed) predictions cannot produce
/// infinities. The floor also shapes the derivative of the
/// distribution-vs-distribution cross entropy: classes squashed below the
/// floor have zero derivative through the clamp.
pub const PROB_FLOOR: f64 = 1e-12;

/// Model output: per-example categorical distributions `[batch, classes]`.
#[derive(Debug, Clone)]
pub struct CategoricalBatch {
    pub probs: Tensor,
}

impl CategoricalBatch {
    pub fn batch(&self) -> usize {
        self.probs.dim0()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.row_len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.rows(i, i + 1)
    }

    /// Highest-probability class per example; ties break to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        let n = self.num_classes();
        (0..self.batch())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0usize;
                for (j, v) in row.iter().enumerate().skip(1) {
                    if *v > row[best] {
                        best = j;
                    }
                }
                let _ = n;
                best
            })
            .collect()
    }
}

/// Training / attack targets: per-example distributions (one-hot or
/// smoothed) plus the underlying hard class index.
#[derive(Debug, Clone)]
pub struct LabelBatch {
    pub targets: Tensor,
    pub hard_indices: Vec<usize>,
}

impl LabelBatch {
    /// One-hot targets from class indices.
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[labels.len(), num_classes]);
        for (i, &c) in labels.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "label {c} out of range for {num_classes} classes"
                )));
            }
            t.data_mut()[i * num_classes + c] = 1.0;
        }
        Ok(LabelBatch {
            targets: t,
            hard_indices: labels.to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.targets.dim0()
    }

    pub fn num_classes(&self) -> usize {
        self.targets.row_len()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> LabelBatch {
        LabelBatch {
            targets: self.targets.slice_rows(start, end),
            hard_indices: self.hard_indices[start..end].to_vec(),
        }
    }
}

fn check_same_shape(p: &Tensor, q: &Tensor) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            format!("{:?}", p.shape()),
            format!("{:?}", q.shape()),
        ));
    }
    Ok(())
}

/// Mean over the batch of `−Σ_c p_c · ln(max(q_c, floor))`.
///
/// `p` may be hard/smoothed targets or another model's output distribution —
/// the dissimilarity use and the loss use share this definition.
pub fn cross_entropy(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_same_shape(p, q)?;
    let per = cross_entropy_rows(p, q);
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-example cross entropies (no batch mean), same floor as
/// [`cross_entropy`]. Used where sums rather than means are wanted, e.g.
/// loss-surface grids.
pub fn cross_entropy_per_example(p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    check_same_shape(p, q)?;
    Ok(cross_entropy_rows(p, q))
}

fn cross_entropy_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    let b = p.dim0();
    let n = p.row_len();
    let pd = p.data();
    let qd = q.data();
    (0..b)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                let pv = pd[i * n + j];
                if pv != 0.0 {
                    acc -= pv * qd[i * n + j].max(PROB_FLOOR).ln();
                }
            }
            acc
        })
        .collect()
}

/// Per-example hard-label cross entropy: `−ln(max(q_label, floor))`.
pub fn hard_ce_per_example(labels: &[usize], q: &Tensor) -> Vec<f64> {
    let n = q.row_len();
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -q.data()[i * n + c].max(PROB_FLOOR).ln())
        .collect()
}

/// Fused softmax+CE logits gradient: `scale · (q − p)` per row.
///
/// This is the analytically-simplified backward of the standard loss path
/// (targets vs softmax output); it avoids the catastrophic cancellation of
/// composing `dCE/dq` with the softmax Jacobian.
pub fn fused_ce_logits_grad(p_targets: &Tensor, q: &Tensor, scale: f64) -> Tensor {
    debug_assert_eq!(p_targets.shape(), q.shape());
    let mut out = Tensor::zeros(q.shape());
    let od = out.data_mut();
    let pd = p_targets.data();
    let qd = q.data();
    for i in 0..od.len() {
        od[i] = scale * (qd[i] - pd[i]);
    }
    out
}

/// `∂CE(p_const, q)/∂q` with the floor's clamp derivative: entries where
/// `q < floor` get zero (the clamp is flat there), everything else gets
/// `−p/q̂`. This is the *pure composition* path used for
/// distribution-vs-distribution CE; compose it with
/// [`super::layers::softmax_backward`] to reach the logits.
pub fn ce_dq(p_const: &Tensor, q: &Tensor, scale: f64) -> Tensor {
    debug_assert_eq!(p_const.shape(), q.shape());
    let mut out = Tensor::zeros(q.shape());
    let od = out.data_mut();
    let pd = p_const.data();
    let qd = q.data();
    for i in 0..od.len() {
        if qd[i] >= PROB_FLOOR {
            od[i] = -scale * pd[i] / qd[i];
        }
    }
    out
}

/// `∂CE(p, q_const)/∂p = −ln(max(q, floor))`, scaled — the derivative of the
/// dissimilarity term through its *first* (reference) argument, used when
/// the training loss differentiates through both sides.
pub fn ce_dp(q_const: &Tensor, scale: f64) -> Tensor {
    let mut out = Tensor::zeros(q_const.shape());
    let od = out.data_mut();
    let qd = q_const.data();
    for i in 0..od.len() {
        od[i] = -scale * qd[i].max(PROB_FLOOR).ln();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn one_hot_layout() {
        let lb = LabelBatch::one_hot(&[2, 0], 3).unwrap();
        assert_eq!(lb.targets.data(), &[0., 0., 1., 1., 0., 0.]);
        assert!(LabelBatch::one_hot(&[3], 3).is_err());
    }

    #[test]
    fn ce_perfect_prediction_is_zero_ish() {
        let p = t(&[1, 3], vec![1.0, 0.0, 0.0]);
        let q = t(&[1, 3], vec![1.0, 0.0, 0.0]);
        // q floors at 1e-12 only where p is nonzero; -1*ln(1) = 0.
        assert!(cross_entropy(&p, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ce_closed_forms() {
        let p = t(&[1, 2], vec![0.5, 0.5]);
        let q = t(&[1, 2], vec![0.5, 0.5]);
        assert!((cross_entropy(&p, &q).unwrap() - 2.0_f64.ln()).abs() < 1e-12);

        let p2 = t(&[1, 2], vec![0.0, 1.0]);
        let q2 = t(&[1, 2], vec![0.9, 0.1]);
        assert!((cross_entropy(&p2, &q2).unwrap() + 0.1_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_is_mean_over_batch() {
        let p = t(&[2, 2], vec![1., 0., 0., 1.]);
        let q = t(&[2, 2], vec![0.5, 0.5, 0.25, 0.75]);
        let per = cross_entropy_per_example(&p, &q).unwrap();
        assert_eq!(per.len(), 2);
        let mean = cross_entropy(&p, &q).unwrap();
        assert!((mean - (per[0] + per[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn hard_ce_matches_one_hot_ce() {
        let q = t(&[2, 3], vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8]);
        let labels = [1usize, 2usize];
        let hard = hard_ce_per_example(&labels, &q);
        let oh = LabelBatch::one_hot(&labels, 3).unwrap();
        let per = cross_entropy_per_example(&oh.targets, &q).unwrap();
        for (a, b) in hard.iter().zip(&per) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_grad_is_q_minus_p() {
        let p = t(&[1, 3], vec![0.0, 1.0, 0.0]);
        let q = t(&[1, 3], vec![0.3, 0.6, 0.1]);
        let g = fused_ce_logits_grad(&p, &q, 2.0);
        assert_eq!(g.data(), &[0.6, -0.8, 0.2]);
    }

    #[test]
    fn ce_dq_clamps_floored_entries() {
        let p = t(&[1, 3], vec![0.5, 0.5, 0.0]);
        let q = t(&[1, 3], vec![0.5, 1e-14, 0.5]);
        let g = ce_dq(&p, &q, 1.0);
        assert_eq!(g.data()[0], -1.0); // -0.5/0.5
        assert_eq!(g.data()[1], 0.0); // below the floor -> clamp is flat
        assert_eq!(g.data()[2], 0.0); // p is zero there
    }

    #[test]
    fn ce_dp_is_negative_log_q() {
        let q = t(&[1, 2], vec![0.1, 1e-15]);
        let g = ce_dp(&q, 1.0);
        assert!((g.data()[0] + 0.1f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let cb = CategoricalBatch {
            probs: t(&[2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.2, 0.7]),
        };
        assert_eq!(cb.argmax(), vec![0, 2]);
    }
}
