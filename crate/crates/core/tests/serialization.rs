mod common;

use common::synthetic_images;
use mprnet::blocks::io::{encode_weights, load_weights, save_weights};
use mprnet::blocks::{ablation, build_model, ModelConfig};
use mprnet::training::{
    checkpoint_name, fit, latest_checkpoint, load_checkpoint, save_checkpoint, TrainConfig, TrainSet, Trainer,
};
use mprnet::{Error, LoadError};

fn load_error(e: Error) -> LoadError {
    match e {
        Error::Load(l) => l,
        other => panic!("expected a load error, got {other}"),
    }
}

#[test]
fn every_configuration_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = vec![
        ModelConfig::with_scale(2),
        ModelConfig::with_scale(3),
        ModelConfig::default(),
    ];
    for (_, paths) in ablation::arb_rows() {
        configs.push(ModelConfig {
            paths,
            ..ModelConfig::tiny(8, 1, 2, 4)
        });
    }
    for (i, cfg) in configs.iter().enumerate() {
        let store = build_model(cfg, i as u64).unwrap();
        let path = dir.path().join(format!("{i}.mprw"));
        save_weights(&store, cfg, &path).unwrap();
        let (loaded, lcfg) = load_weights(&path).unwrap();
        assert_eq!(&lcfg, cfg);
        assert_eq!(loaded, store);
        assert_eq!(encode_weights(&loaded, &lcfg), std::fs::read(&path).unwrap());
    }
}

#[test]
fn damaged_weight_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny(8, 1, 1, 2);
    let bytes = encode_weights(&build_model(&cfg, 0).unwrap(), &cfg);
    let path = dir.path().join("w.mprw");

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_error(load_weights(&path).unwrap_err()),
        LoadError::Corrupt(_)
    ));

    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(
        load_error(load_weights(&path).unwrap_err()),
        LoadError::Corrupt(_)
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(
        load_error(load_weights(&path).unwrap_err()),
        LoadError::BadMagic(_)
    ));

    assert!(matches!(
        load_weights(dir.path().join("absent.mprw")).unwrap_err(),
        Error::Io { .. }
    ));
}

fn tiny_run() -> (ModelConfig, TrainConfig, TrainSet) {
    let cfg = ModelConfig::tiny(8, 1, 1, 2);
    let tc = TrainConfig {
        patch_lr: 8,
        batch: 2,
        total_steps: 4,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    (cfg, tc, TrainSet::from_hr(synthetic_images(2, 32), 2, 8).unwrap())
}

#[test]
fn checkpoints_round_trip_and_detect_damage() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, tc, set) = tiny_run();
    let mut trainer = Trainer::new(cfg.clone(), tc, build_model(&cfg, 1).unwrap()).unwrap();
    trainer.step_once(&set).unwrap();
    let ck = trainer.checkpoint();
    let path = dir.path().join(checkpoint_name(ck.step));
    save_checkpoint(&ck, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);

    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, bytes.len() / 3, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&path).is_err(), "truncated to {cut} bytes");
    }
    let mut flipped = bytes.clone();
    let i = flipped.len() - 20;
    flipped[i] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn training_writes_checkpoints_and_resumes_from_the_latest() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, tc, set) = tiny_run();
    let init = build_model(&cfg, 2).unwrap();
    fit(&cfg, &tc, init.clone(), &set, Some(dir.path())).unwrap();
    for step in [2, 4] {
        assert!(dir.path().join(checkpoint_name(step)).exists());
    }
    assert_eq!(
        latest_checkpoint(dir.path()).unwrap().unwrap(),
        dir.path().join(checkpoint_name(4))
    );
    assert!(dir.path().join("weights.mprw").exists());

    let longer = TrainConfig {
        total_steps: 6,
        ..tc.clone()
    };
    let resumed = fit(&cfg, &longer, init.clone(), &set, Some(dir.path())).unwrap();
    assert_eq!(resumed.step, 6);
    let steps: Vec<u64> = mprnet::training::read_loss_csv(&dir.path().join("loss.csv"))
        .unwrap()
        .iter()
        .map(|r| r.0)
        .collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());

    let other = ModelConfig::tiny(8, 1, 2, 2);
    let err = fit(&other, &longer, build_model(&other, 2).unwrap(), &set, Some(dir.path()))
        .err()
        .expect("config mismatch is rejected");
    assert!(matches!(err, Error::Config(_)));
}
