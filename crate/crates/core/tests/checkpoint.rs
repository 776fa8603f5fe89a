use candle_core::DType;
use semc::data::{render, ImageSet, Split, SynthSpec};
use semc::engine::{checkpoint, TrainConfig, Trainer};
use semc::model::{tiny_config, Semc};
use semc::SemcError;

fn dataset(per_class: usize) -> (ImageSet, Split) {
    let spec = SynthSpec {
        classes: 3,
        per_class,
        size: 64,
        ..SynthSpec::default()
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for i in 0..per_class {
            images.push(render(&spec, c, (c * per_class + i) as u64).image);
            labels.push(c);
        }
    }
    let n = images.len();
    let set = ImageSet::from_parts(images, labels, 64).unwrap();
    let split = Split {
        train: (0..n).collect(),
        val: (0..n).step_by(2).collect(),
        test: (1..n).step_by(2).collect(),
    };
    (set, split)
}

fn trainer(experts: usize) -> Trainer {
    let mut cfg = tiny_config(64, 3);
    cfg.backbone.num_experts = experts;
    let model = Semc::new(&cfg, DType::F32, 5).unwrap();
    let tc = TrainConfig {
        batch_size: 4,
        epochs: 4,
        lr: 0.01,
        ..TrainConfig::default()
    };
    Trainer::new(model, tc).unwrap()
}

fn trained() -> (Trainer, ImageSet, Split) {
    let (set, split) = dataset(4);
    let mut t = trainer(3);
    t.train_epoch(&set, &split.train, None, &mut |_| Ok(()))
        .unwrap();
    (t, set, split)
}

#[test]
fn round_trip_restores_everything() {
    let (t, set, split) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &t).unwrap();

    let mut back = trainer(3);
    checkpoint::load_into(&path, &mut back).unwrap();
    let before = t.model.store().snapshot().unwrap();
    let after = back.model.store().snapshot().unwrap();
    assert_eq!(
        before.keys().collect::<Vec<_>>(),
        after.keys().collect::<Vec<_>>()
    );
    for (k, v) in &before {
        let a = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = after[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{k}"
        );
    }
    assert_eq!(back.queue, t.queue);
    assert_eq!(back.queue.labels(), t.queue.labels());
    assert_eq!((back.epoch, back.step), (t.epoch, t.step));
    assert_eq!(
        back.optimizer.velocity().len(),
        t.optimizer.velocity().len()
    );
    assert_eq!(
        back.evaluate(&set, &split.test).unwrap(),
        t.evaluate(&set, &split.test).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (mut a, set, split) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &a).unwrap();
    let mut b = trainer(3);
    checkpoint::load_into(&path, &mut b).unwrap();
    let (la, ..) = a
        .train_epoch(&set, &split.train, None, &mut |_| Ok(()))
        .unwrap();
    let (lb, ..) = b
        .train_epoch(&set, &split.train, None, &mut |_| Ok(()))
        .unwrap();
    assert_eq!(la, lb);
}

#[test]
fn expert_count_mismatch_is_rejected() {
    let (t, ..) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &t).unwrap();
    let mut other = trainer(2);
    let err = checkpoint::load_into(&path, &mut other).unwrap_err();
    assert!(
        matches!(&err, SemcError::Checkpoint(m) if m.contains("num_experts")),
        "{err}"
    );
}

#[test]
fn corrupt_files_are_rejected() {
    let (t, ..) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(
        checkpoint::read(&path),
        Err(SemcError::Checkpoint(_))
    ));

    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    std::fs::write(&path, &bad_version).unwrap();
    let err = checkpoint::read(&path).unwrap_err();
    assert!(matches!(&err, SemcError::Checkpoint(m) if m.contains("version")));

    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        checkpoint::read(&path),
        Err(SemcError::Checkpoint(_))
    ));
}
