//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semc::mcrm::ContrastiveQueue;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dot(&v, &v).sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub type ContrastiveInstance = (
    Vec<Tensor>,
    Vec<Vec<f64>>,
    Vec<usize>,
    ContrastiveQueue,
    usize,
    usize,
);

/// A random contrastive problem: `views` batches of `batch` unit rows
/// (B ≤ 6, d ≤ 8) plus up to eight queue entries. Returns the view
/// tensors, every row in contrastive order, the batch labels, the queue,
/// `batch` and `views`.
pub fn contrastive_instance(seed: u64) -> ContrastiveInstance {
    let mut r = rng(seed);
    let batch = r.random_range(1..=6);
    let views = r.random_range(2..=3);
    let dim = r.random_range(2..=8);
    let classes = r.random_range(1..=4);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let mut queue = ContrastiveQueue::new(8, dim);
    let qlen = r.random_range(0..=8);
    for row in unit_rows(&mut r, qlen, dim) {
        queue.push(row, r.random_range(0..classes)).unwrap();
    }
    let view_rows: Vec<Vec<Vec<f64>>> = (0..views).map(|_| unit_rows(&mut r, batch, dim)).collect();
    let tensors = view_rows.iter().map(|v| to_tensor(v)).collect();
    let mut rows: Vec<Vec<f64>> = view_rows.into_iter().flatten().collect();
    rows.extend(queue.iter().map(|e| e.embedding.clone()));
    (tensors, rows, labels, queue, batch, views)
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu).unwrap()
}

/// Supervised contrastive loss by explicit pair enumeration. Returns the
/// loss and the number of anchors without positives.
pub fn supcon_oracle(
    rows: &[Vec<f64>],
    labels: &[usize],
    anchors: usize,
    tau: f64,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for a in 0..anchors {
        let mut denom = 0.0;
        for (k, row) in rows.iter().enumerate() {
            if k != a {
                denom += (dot(&rows[a], row) / tau).exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, row) in rows.iter().enumerate() {
            if p != a && labels[p] == labels[a] {
                sum += ((dot(&rows[a], row) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count == 0 {
            skipped += 1;
        } else {
            total += -sum / count as f64;
            valid += 1;
        }
    }
    let loss = if valid == 0 {
        0.0
    } else {
        total / valid as f64
    };
    (loss, skipped)
}

/// Multi-view InfoNCE by enumeration. Rows `v·batch + b` are view `v` of
/// sample `b`; rows past `views·batch` are queue negatives. Each positive
/// competes only with negatives.
pub fn selfcon_oracle(rows: &[Vec<f64>], batch: usize, views: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for b in 0..batch {
        let own: Vec<usize> = (0..views).map(|v| v * batch + b).collect();
        let neg: f64 = (0..rows.len())
            .filter(|k| !own.contains(k))
            .map(|k| (dot(&rows[b], &rows[k]) / tau).exp())
            .sum();
        for v in 1..views {
            let pos = (dot(&rows[b], &rows[v * batch + b]) / tau).exp();
            total += -(pos / (pos + neg)).ln();
        }
    }
    total / (batch * (views - 1)) as f64
}

/// Accuracy, macro precision, recall and F1 in percent, counted class by
/// class without a confusion matrix.
pub fn metrics_oracle(pred: &[usize], truth: &[usize], classes: usize) -> [f64; 4] {
    let n = truth.len() as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t != c)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p != c && t == c)
            .count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if 2.0 * tp + fp + fn_ > 0.0 && tp > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fn_)
        } else {
            0.0
        };
        ps += p;
        rs += r;
        fs += f;
    }
    let k = classes as f64;
    [100.0 * acc, 100.0 * ps / k, 100.0 * rs / k, 100.0 * fs / k]
}

/// Source channel of output channel `k` after shuffling `c` channels in
/// `g` groups: output `k = j·g + i` reads input `i·(c/g) + j`.
pub fn shuffle_source(k: usize, c: usize, g: usize) -> usize {
    (k % g) * (c / g) + k / g
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            checked: self.checked + other.checked,
            passed: self.passed + other.passed,
            worst_rel: self.worst_rel.max(other.worst_rel),
        }
    }
}

/// Compares `analytic` gradients of `var` with central differences of
/// `loss`. An element passes when the relative error is at most `rel_tol`
/// or the absolute error is at most `abs_floor`.
pub fn check_var(
    var: &Var,
    analytic: &Tensor,
    loss: &mut dyn FnMut() -> f64,
    eps: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheck {
    assert_eq!(var.dtype(), DType::F64, "finite differences need f64");
    let shape = var.shape().clone();
    let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
    let grad: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
    let mut out = GradCheck::default();
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        var.set(&Tensor::from_vec(work.clone(), &shape, &Device::Cpu).unwrap())
            .unwrap();
        let plus = loss();
        work[i] = base[i] - eps;
        var.set(&Tensor::from_vec(work.clone(), &shape, &Device::Cpu).unwrap())
            .unwrap();
        let minus = loss();
        work[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (numeric - grad[i]).abs();
        let rel = err / numeric.abs().max(grad[i].abs()).max(1e-300);
        out.checked += 1;
        if rel <= rel_tol || err <= abs_floor {
            out.passed += 1;
        } else {
            out.worst_rel = out.worst_rel.max(rel);
        }
    }
    var.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap())
        .unwrap();
    out
}
