mod common;

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use semc::engine::{cosine_lr, MetricsReport};
use semc::mcrm::{gumbel_noise, gumbel_softmax, total_loss, ContrastiveQueue, LossTensors};
use semc::nn::ops;

use common::*;

fn scalar(v: f64) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

proptest! {
    #[test]
    fn gate_rows_sum_to_one(
        logits in prop::collection::vec(-20.0f64..20.0, 1..40),
        tau in 0.05f64..5.0,
        seed in any::<u64>(),
        noisy in any::<bool>(),
    ) {
        let n = 1 + logits.len() % 5;
        let rows = logits.len() / n;
        prop_assume!(rows > 0);
        let t = Tensor::from_vec(logits[..rows * n].to_vec(), (rows, n), &Device::Cpu).unwrap();
        let noise = noisy.then(|| gumbel_noise(rows, n, seed, DType::F64, &Device::Cpu).unwrap());
        let w = gumbel_softmax(&t, noise.as_ref(), tau, false).unwrap();
        for row in w.to_vec2::<f64>().unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn loss_identities(
        sup in 0.0f64..10.0,
        slf in 0.0f64..10.0,
        moe in 0.0f64..10.0,
        alpha in 0.001f64..0.999,
        lambda in 0.0f64..2.0,
    ) {
        let parts = LossTensors {
            l_sup: scalar(sup),
            l_self: scalar(slf),
            l_moe: scalar(moe),
            alpha: scalar(alpha),
            l_aux: None,
        };
        let (t, b) = total_loss(&parts, lambda, 0.0).unwrap();
        prop_assert!((b.l_mc - (sup + lambda * slf)).abs() <= 1e-9);
        prop_assert!((b.l_total - (alpha * moe + (1.0 - alpha) * b.l_mc)).abs() <= 1e-9);
        prop_assert_eq!(ops::scalar(&t).unwrap(), b.l_total);
    }

    #[test]
    fn metrics_match_independent_counts(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200),
    ) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = MetricsReport::from_predictions(&pred, &truth, 5).unwrap();
        let want = metrics_oracle(&pred, &truth, 5);
        for (got, want) in [r.accuracy, r.precision, r.recall, r.f1].into_iter().zip(want) {
            prop_assert!((got - want).abs() <= 1e-9);
            prop_assert!((0.0..=100.0).contains(&got));
        }
        for (c, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
    }

    #[test]
    fn cosine_is_monotone(lr in 1e-6f64..1.0, total in 1usize..500) {
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let v = cosine_lr(lr, t, total);
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn queue_is_a_bounded_fifo(
        capacity in 0usize..12,
        updates in prop::collection::vec(1usize..5, 1..30),
    ) {
        let dim = 2;
        let mut q = ContrastiveQueue::new(capacity, dim);
        let mut reference = VecDeque::new();
        let mut next = 0.0;
        for (step, &rows) in updates.iter().enumerate() {
            let labels: Vec<usize> = (0..rows).map(|i| (step + i) % 3).collect();
            let vals: Vec<f64> = (0..rows * dim).map(|i| next + i as f64).collect();
            next += (rows * dim) as f64;
            let t = Tensor::from_vec(vals.clone(), (rows, dim), &Device::Cpu).unwrap();
            q.update(&[t], &labels).unwrap();
            for (chunk, &l) in vals.chunks(dim).zip(&labels) {
                if capacity > 0 {
                    if reference.len() == capacity {
                        reference.pop_front();
                    }
                    reference.push_back((chunk.to_vec(), l));
                }
            }
            prop_assert!(q.len() <= capacity);
            let got: Vec<(Vec<f64>, usize)> = q.iter().map(|e| (e.embedding.clone(), e.label)).collect();
            prop_assert_eq!(&got, &reference.iter().cloned().collect::<Vec<_>>());
        }
    }
}

#[test]
fn channel_shuffle_matches_closed_form() {
    for c in [4usize, 6, 8, 16] {
        for g in [1usize, 2, 4] {
            if c % g != 0 {
                continue;
            }
            let x = Tensor::arange(0f64, c as f64, &Device::Cpu)
                .unwrap()
                .reshape((1, c, 1, 1))
                .unwrap();
            let y = ops::to_vec_f64(&ops::channel_shuffle(&x, g).unwrap()).unwrap();
            let want: Vec<f64> = (0..c).map(|k| shuffle_source(k, c, g) as f64).collect();
            assert_eq!(y, want, "C={c} g={g}");
        }
    }
}
