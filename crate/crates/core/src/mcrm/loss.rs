//! Contrastive and recognition losses.

use candle_core::Tensor;

use super::queue::ContrastiveQueue;
use crate::error::{Result, SemcError};
use crate::nn::ops;

/// Additive logit offset that removes a key from a softmax denominator.
const MASKED: f64 = -1e9;

/// Concatenated expert embeddings followed by the queue contents.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// (views·B + |Q|) × d. Rows `v·B + b` hold view `v` of sample `b`.
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub views: usize,
    pub queue_len: usize,
}

impl ContrastiveBatch {
    /// Rows that act as anchors (all current-batch rows).
    pub fn num_anchors(&self) -> usize {
        self.batch * self.views
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks expert views of the current batch along the batch axis and
/// appends the queue, pairing labels the same way.
pub fn build_contrastive_batch(
    views: &[Tensor],
    labels: &[usize],
    queue: &ContrastiveQueue,
) -> Result<ContrastiveBatch> {
    let first = views
        .first()
        .ok_or_else(|| SemcError::State("no expert embeddings".into()))?;
    let (batch, dim) = first.dims2()?;
    if batch != labels.len() {
        return Err(SemcError::State(format!(
            "{batch} embeddings per view but {} labels",
            labels.len()
        )));
    }
    for v in views {
        if v.dims2()? != (batch, dim) {
            return Err(SemcError::State(format!(
                "expert views disagree: {:?} vs {:?}",
                v.dims(),
                first.dims()
            )));
        }
    }
    if !queue.is_empty() && queue.dim() != dim {
        return Err(SemcError::State(format!(
            "queue holds {}-d embeddings, batch has {dim}",
            queue.dim()
        )));
    }
    let mut parts: Vec<Tensor> = views.to_vec();
    if let Some(q) = queue.embeddings(first.dtype(), first.device())? {
        parts.push(q);
    }
    let mut all_labels = Vec::with_capacity(views.len() * batch + queue.len());
    for _ in views {
        all_labels.extend_from_slice(labels);
    }
    all_labels.extend(queue.labels());
    Ok(ContrastiveBatch {
        embeddings: Tensor::cat(&parts, 0)?,
        labels: all_labels,
        batch,
        views: views.len(),
        queue_len: queue.len(),
    })
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(SemcError::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn constant(values: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone)]
pub struct SupConOutput {
    pub loss: Tensor,
    /// Anchors skipped because no other row shares their label.
    pub anchors_without_positives: usize,
}

/// Supervised contrastive loss over `embeddings` (rows unit-norm).
///
/// The first `num_anchors` rows are anchors; every row other than the
/// anchor itself is a key. For anchor `a` with positive set `P(a)` (same
/// label, not `a`):
///
/// `loss_a = -1/|P(a)| Σ_{p∈P(a)} log( exp(s_ap/τ) / Σ_{k≠a} exp(s_ak/τ) )`
///
/// averaged over anchors with a non-empty positive set.
pub fn supcon_loss(
    embeddings: &Tensor,
    labels: &[usize],
    num_anchors: usize,
    tau: f64,
) -> Result<SupConOutput> {
    check_temperature(tau)?;
    let (m, _) = embeddings.dims2()?;
    if labels.len() != m || num_anchors > m {
        return Err(SemcError::State(format!(
            "{m} embeddings, {} labels, {num_anchors} anchors",
            labels.len()
        )));
    }
    let anchors = embeddings.narrow(0, 0, num_anchors)?;
    let logits = (anchors.matmul(&embeddings.t()?)? / tau)?;

    let mut self_mask = vec![0.0; num_anchors * m];
    let mut positives = vec![0.0; num_anchors * m];
    let mut valid = vec![0.0; num_anchors];
    let mut inv_count = vec![0.0; num_anchors];
    let mut without = 0;
    for a in 0..num_anchors {
        self_mask[a * m + a] = MASKED;
        let mut count = 0usize;
        for k in 0..m {
            if k != a && labels[k] == labels[a] {
                positives[a * m + k] = 1.0;
                count += 1;
            }
        }
        if count == 0 {
            without += 1;
        } else {
            valid[a] = 1.0;
            inv_count[a] = 1.0 / count as f64;
        }
    }
    let n_valid = num_anchors - without;
    if n_valid == 0 {
        return Ok(SupConOutput {
            loss: Tensor::zeros((), embeddings.dtype(), embeddings.device())?,
            anchors_without_positives: without,
        });
    }
    let logits = (logits + constant(self_mask, num_anchors, m, embeddings)?)?;
    let log_prob = logits.broadcast_sub(&ops::logsumexp(&logits)?)?;
    let pos = constant(positives, num_anchors, m, embeddings)?;
    let mean_log_prob = (pos * log_prob)?
        .sum(1)?
        .mul(&constant(inv_count, num_anchors, 1, embeddings)?.flatten_all()?)?;
    let weights = constant(valid, num_anchors, 1, embeddings)?.flatten_all()?;
    let loss = ((mean_log_prob * weights)?.sum_all()? * (-1.0 / n_valid as f64))?;
    Ok(SupConOutput {
        loss,
        anchors_without_positives: without,
    })
}

/// Label-free multi-view InfoNCE.
///
/// Anchor `b` is view 0 of sample `b`; its positives are the other views of
/// the same sample; every remaining row except the anchor is a negative.
/// Each positive is scored against the negatives only:
///
/// `loss_b = -1/(V-1) Σ_p log( exp(s_bp/τ) / (exp(s_bp/τ) + Σ_n exp(s_bn/τ)) )`
///
/// `masked_keys`, when given, removes the flagged rows from every
/// denominator.
pub fn selfcon_loss(
    batch: &ContrastiveBatch,
    tau: f64,
    masked_keys: Option<&[bool]>,
) -> Result<Tensor> {
    check_temperature(tau)?;
    if batch.views < 2 {
        return Err(SemcError::State(format!(
            "self-contrast needs at least two views, got {}",
            batch.views
        )));
    }
    let e = &batch.embeddings;
    let (m, _) = e.dims2()?;
    let b = batch.batch;
    if let Some(mask) = masked_keys {
        if mask.len() != m {
            return Err(SemcError::State(format!(
                "key mask has {} entries for {m} rows",
                mask.len()
            )));
        }
    }
    let anchors = e.narrow(0, 0, b)?;
    let logits = (anchors.matmul(&e.t()?)? / tau)?;
    let mut neg_mask = vec![0.0; b * m];
    for i in 0..b {
        for v in 0..batch.views {
            neg_mask[i * m + v * b + i] = MASKED;
        }
        if let Some(mask) = masked_keys {
            for (k, &off) in mask.iter().enumerate() {
                if off {
                    neg_mask[i * m + k] = MASKED;
                }
            }
        }
    }
    let lse_neg = ops::logsumexp(&(logits + constant(neg_mask, b, m, e)?)?)?.flatten_all()?;
    let mut total: Option<Tensor> = None;
    for v in 1..batch.views {
        let pos = (anchors.mul(&e.narrow(0, v * b, b)?)?.sum(1)? / tau)?;
        let pair = Tensor::stack(&[pos.clone(), lse_neg.clone()], 1)?;
        let term = (pos - ops::logsumexp(&pair)?.flatten_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.expect("at least one positive view");
    Ok((total.sum_all()? * (-1.0 / (b * (batch.views - 1)) as f64))?)
}

/// `z_fused[b] = Σ_n w[b,n] · z[b,n]` for `z` (B×N×C) and `w` (B×N).
pub fn fuse_logits(expert_logits: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, n, _) = expert_logits.dims3()?;
    let (wb, wn) = weights.dims2()?;
    if (wb, wn) != (b, n) {
        return Err(SemcError::Shape(format!(
            "gate weights {:?} do not match expert logits {:?}",
            weights.dims(),
            expert_logits.dims()
        )));
    }
    Ok(expert_logits
        .broadcast_mul(&weights.unsqueeze(2)?)?
        .sum(1)?)
}

/// Mean cross-entropy of `logits` (B×C) against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(SemcError::Data(format!(
            "{b} predictions for {} labels",
            labels.len()
        )));
    }
    let mut one_hot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(SemcError::Data(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        one_hot[i * c + y] = 1.0;
    }
    let picked = (ops::log_softmax(logits)? * constant(one_hot, b, c, logits)?)?.sum_all()?;
    Ok((picked * (-1.0 / b as f64))?)
}

/// Cross-entropy of the gated prediction.
pub fn moe_ce_loss(fused_logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy(fused_logits, labels)
}

/// Cross-entropy over every expert's logits with labels replicated per expert.
pub fn expert_ce_loss(expert_logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n, c) = expert_logits.dims3()?;
    let flat = expert_logits
        .transpose(0, 1)?
        .contiguous()?
        .reshape((n * b, c))?;
    let replicated: Vec<usize> = (0..n).flat_map(|_| labels.iter().copied()).collect();
    cross_entropy(&flat, &replicated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn mat(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Pair enumeration straight from the definition.
    fn supcon_oracle(e: &[Vec<f64>], y: &[usize], anchors: usize, tau: f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for a in 0..anchors {
            let denom: f64 = (0..e.len())
                .filter(|&k| k != a)
                .map(|k| (dot(&e[a], &e[k]) / tau).exp())
                .sum();
            let pos: Vec<usize> = (0..e.len()).filter(|&k| k != a && y[k] == y[a]).collect();
            if pos.is_empty() {
                continue;
            }
            let s: f64 = pos
                .iter()
                .map(|&p| ((dot(&e[a], &e[p]) / tau).exp() / denom).ln())
                .sum();
            total += -s / pos.len() as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    #[test]
    fn supcon_single_positive_key_is_zero() {
        let e = mat(&[&[0.6, 0.8], &[0.6, 0.8]]);
        let out = supcon_loss(&e, &[1, 1], 2, 0.07).unwrap();
        assert!(ops::scalar(&out.loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn supcon_unique_labels_counts_skipped_anchors() {
        let e = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let out = supcon_loss(&e, &[0, 1, 2], 3, 0.5).unwrap();
        assert_eq!(ops::scalar(&out.loss).unwrap(), 0.0);
        assert_eq!(out.anchors_without_positives, 3);
    }

    #[test]
    fn supcon_four_point_case() {
        let e = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let y = [0, 0, 1, 1];
        let got = ops::scalar(&supcon_loss(&e, &y, 4, 0.5).unwrap().loss).unwrap();
        let oracle = supcon_oracle(&rows_of(&e), &y, 4, 0.5);
        assert!((got - oracle).abs() < 1e-6);
        // ln(e^2 + 2) - 2
        assert!((oracle - 0.239_544_77).abs() < 1e-6);
    }

    #[test]
    fn supcon_rejects_bad_temperature() {
        let e = mat(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(
            supcon_loss(&e, &[0, 0], 2, 0.0),
            Err(SemcError::Config(_))
        ));
    }

    #[test]
    fn supcon_queue_rows_are_keys_only() {
        let e = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, -1.0]]);
        let y = [0, 1, 0, 1];
        let got = ops::scalar(&supcon_loss(&e, &y, 2, 0.3).unwrap().loss).unwrap();
        let oracle = supcon_oracle(&rows_of(&e), &y, 2, 0.3);
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn selfcon_orthogonal_pair() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = ContrastiveQueue::new(4, 2);
        let batch = build_contrastive_batch(&[a.clone(), a.clone(), a], &[0, 1], &q).unwrap();
        let got = ops::scalar(&selfcon_loss(&batch, 1.0, None).unwrap()).unwrap();
        // each positive: ln(e + 3) - 1
        let want = (1f64.exp() + 3.0).ln() - 1.0;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn selfcon_single_sample_without_queue_is_zero() {
        let v1 = mat(&[&[0.6, 0.8]]);
        let v2 = mat(&[&[0.0, 1.0]]);
        let v3 = mat(&[&[1.0, 0.0]]);
        let q = ContrastiveQueue::new(4, 2);
        let batch = build_contrastive_batch(&[v1, v2, v3], &[0], &q).unwrap();
        let got = ops::scalar(&selfcon_loss(&batch, 0.07, None).unwrap()).unwrap();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn selfcon_ignores_masked_keys() {
        let v = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = mat(&[&[0.8, 0.6], &[0.6, 0.8]]);
        let empty = ContrastiveQueue::new(8, 2);
        let base = build_contrastive_batch(&[v.clone(), w.clone()], &[0, 1], &empty).unwrap();
        let mut q = ContrastiveQueue::new(8, 2);
        q.push(vec![1.0, 0.0], 0).unwrap();
        q.push(vec![-0.6, 0.8], 1).unwrap();
        let with_q = build_contrastive_batch(&[v, w], &[0, 1], &q).unwrap();
        let mut mask = vec![false; with_q.len()];
        mask[4] = true;
        mask[5] = true;
        let a = ops::scalar(&selfcon_loss(&base, 0.2, None).unwrap()).unwrap();
        let b = ops::scalar(&selfcon_loss(&with_q, 0.2, Some(&mask)).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
        let c = ops::scalar(&selfcon_loss(&with_q, 0.2, None).unwrap()).unwrap();
        assert!(c > a);
    }

    #[test]
    fn contrastive_batch_layout() {
        let v = Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap();
        let mut q = ContrastiveQueue::new(32, 3);
        for i in 0..16 {
            q.push(vec![0.0, 0.0, 1.0], i % 3).unwrap();
        }
        let b =
            build_contrastive_batch(&[v.clone(), v.clone(), v.clone()], &[0, 1, 2, 0], &q).unwrap();
        assert_eq!(b.len(), 28);
        assert_eq!(b.embeddings.dims(), &[28, 3]);
        assert_eq!(&b.labels[..12], &[0, 1, 2, 0, 0, 1, 2, 0, 0, 1, 2, 0]);
        let empty = ContrastiveQueue::new(32, 3);
        let b = build_contrastive_batch(&[v.clone(), v.clone(), v.clone()], &[0, 1, 2, 0], &empty)
            .unwrap();
        assert_eq!(b.len(), 12);
        assert!(matches!(
            build_contrastive_batch(&[v.clone(), v], &[0, 1], &empty),
            Err(SemcError::State(_))
        ));
    }

    #[test]
    fn fuse_logits_selection_and_oracle() {
        let z = Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let onehot = mat(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
        let sel = fuse_logits(&z, &onehot).unwrap();
        let z2 = z.narrow(1, 1, 1).unwrap().squeeze(1).unwrap();
        assert_eq!(sel.to_vec2::<f64>().unwrap(), z2.to_vec2::<f64>().unwrap());

        let w = mat(&[&[0.2, 0.5, 0.3], &[0.7, 0.1, 0.2]]);
        let got = fuse_logits(&z, &w).unwrap().to_vec2::<f64>().unwrap();
        let zv = z.to_vec3::<f64>().unwrap();
        let wv = w.to_vec2::<f64>().unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let mut acc = 0.0;
                for n in 0..3 {
                    acc += wv[b][n] * zv[b][n][c];
                }
                assert_eq!(got[b][c], acc);
            }
        }
        let bad = mat(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(fuse_logits(&z, &bad), Err(SemcError::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let z = Tensor::zeros((3, 7), DType::F64, &Device::Cpu).unwrap();
        let l = ops::scalar(&moe_ce_loss(&z, &[0, 3, 6]).unwrap()).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let z = mat(&[&[50.0, 0.0, 0.0]]);
        assert!(ops::scalar(&moe_ce_loss(&z, &[0]).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn ce_matches_manual_softmax() {
        let z = Tensor::randn(0f64, 2.0, (4, 7), &Device::Cpu).unwrap();
        let y = [6, 0, 3, 3];
        let got = ops::scalar(&moe_ce_loss(&z, &y).unwrap()).unwrap();
        let rows = z.to_vec2::<f64>().unwrap();
        let mut want = 0.0;
        for (r, &label) in rows.iter().zip(&y) {
            let denom: f64 = r.iter().map(|v| v.exp()).sum();
            want -= (r[label].exp() / denom).ln();
        }
        assert!((got - want / 4.0).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let z = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(moe_ce_loss(&z, &[3]), Err(SemcError::Data(_))));
    }

    #[test]
    fn queue_rows_get_no_gradient() {
        let v = Var::from_tensor(&mat(&[&[0.6, 0.8], &[0.8, -0.6]])).unwrap();
        let mut q = ContrastiveQueue::new(4, 2);
        q.push(vec![1.0, 0.0], 0).unwrap();
        let batch = build_contrastive_batch(&[v.as_tensor().clone()], &[0, 1], &q).unwrap();
        let out = supcon_loss(&batch.embeddings, &batch.labels, 2, 0.5).unwrap();
        let grads = out.loss.backward().unwrap();
        assert!(grads.get(&v).is_some());
    }
}
