use candle_core::{DType, Tensor};
use semc::backbone::expert_parameter_groups;
use semc::data::{render, to_batch, SynthSpec};
use semc::engine::{collect_grads, TrainConfig, Trainer};
use semc::mcrm::AlphaMode;
use semc::model::{tiny_config, ForwardOptions, LossOptions, Semc};
use semc::nn::ops;
use semc::ssfm::FusionFlags;

fn batch(n: usize, dtype: DType) -> (Tensor, Vec<usize>) {
    let spec = SynthSpec {
        classes: 3,
        size: 64,
        ..SynthSpec::default()
    };
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let images: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| render(&spec, c, i as u64).image)
        .collect();
    (
        to_batch(&images, dtype, &candle_core::Device::Cpu).unwrap(),
        labels,
    )
}

fn trainer(dtype: DType, edit: impl FnOnce(&mut TrainConfig)) -> Trainer {
    let model = Semc::new(&tiny_config(64, 3), dtype, 1).unwrap();
    let mut cfg = TrainConfig {
        batch_size: 6,
        epochs: 10,
        lr: 0.01,
        ..TrainConfig::default()
    };
    edit(&mut cfg);
    Trainer::new(model, cfg).unwrap()
}

#[test]
fn contrast_off_reduces_total_to_moe() {
    let mut t = trainer(DType::F64, |c| c.lmc_on = false);
    let (x, y) = batch(6, DType::F64);
    for _ in 0..3 {
        let r = t.train_step(&x, &y, 0.01).unwrap().unwrap();
        assert_eq!(r.losses.l_total, r.losses.l_moe);
        assert_eq!(r.losses.alpha, 1.0);
    }
}

#[test]
fn zero_lambda_makes_mc_equal_sup() {
    let mut cfg = tiny_config(64, 3);
    cfg.mcrm.lambda = 0.0;
    let model = Semc::new(&cfg, DType::F64, 1).unwrap();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            batch_size: 6,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let (x, y) = batch(6, DType::F64);
    for _ in 0..3 {
        let r = t.train_step(&x, &y, 0.01).unwrap().unwrap();
        assert_eq!(r.losses.l_mc, r.losses.l_sup);
    }
}

#[test]
fn bypassed_fusion_returns_deep_maps() {
    let model = Semc::new(&tiny_config(64, 3), DType::F64, 2).unwrap();
    let (x, _) = batch(2, DType::F64);
    let flags = FusionFlags {
        ace_on: false,
        samc_on: false,
    };
    let out = model
        .forward(&x, &ForwardOptions::eval(flags, 1.0))
        .unwrap();
    let deep = model.backbone().forward(&x, false).unwrap().deep;
    for (o, d) in out.features.out.iter().zip(&deep) {
        assert_eq!(ops::to_vec_f64(o).unwrap(), ops::to_vec_f64(d).unwrap());
    }
}

#[test]
fn identical_state_gives_identical_step() {
    let (x, y) = batch(6, DType::F32);
    let mut a = trainer(DType::F32, |_| {});
    a.train_step(&x, &y, 0.01).unwrap();
    let state = a.snapshot().unwrap();
    let mut b = trainer(DType::F32, |_| {});
    b.restore(&state).unwrap();
    b.queue = a.queue.clone();
    b.optimizer.set_velocity(a.optimizer.velocity().clone());
    b.step = a.step;
    let ra = a.train_step(&x, &y, 0.01).unwrap().unwrap();
    let rb = b.train_step(&x, &y, 0.01).unwrap().unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.grad_norm, rb.grad_norm);
}

#[test]
fn every_parameter_group_learns() {
    for lmc_on in [true, false] {
        let model = Semc::new(&tiny_config(64, 3), DType::F64, 3).unwrap();
        let (x, y) = batch(6, DType::F64);
        let opts = ForwardOptions {
            train: true,
            flags: FusionFlags::default(),
            gumbel_seed: Some(9),
            gate_tau: 1.0,
        };
        let out = model.forward(&x, &opts).unwrap();
        let queue = model.new_queue();
        let loss = model
            .losses(
                &out,
                &y,
                &queue,
                &LossOptions {
                    lmc_on,
                    alpha_mode: AlphaMode::Adaptive,
                },
            )
            .unwrap();
        let grads = collect_grads(model.store(), &loss.total.backward().unwrap());
        let has = |name: &str| {
            grads.iter().any(|(e, g)| {
                e.name == name && ops::scalar(&g.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0
            })
        };
        let groups = expert_parameter_groups(model.store(), 3);
        assert!(groups
            .shared
            .iter()
            .filter(|n| n.starts_with("backbone."))
            .any(|n| has(n)));
        for expert in &groups.experts {
            assert!(expert.iter().any(|n| has(n)), "lmc_on={lmc_on}");
        }
    }
}

#[test]
fn fixed_alpha_is_reported() {
    let mut t = trainer(DType::F32, |c| c.alpha_mode = AlphaMode::Fixed(0.1));
    let (x, y) = batch(6, DType::F32);
    let r = t.train_step(&x, &y, 0.01).unwrap().unwrap();
    assert!((r.losses.alpha - 0.1).abs() < 1e-7);
}
