use bgnet::checkpoint;
use bgnet::config::{ModelConfig, TrainConfig};
use bgnet::data::{full_batch, synth_sample, Augmenter, SynthParams};
use bgnet::datamodel::Sample;
use bgnet::trainer::{checkpoint_path, overfit_fixed_batch, train_loop, TrainOutputs, Trainer, FINAL_CHECKPOINT};

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr: 3e-3,
        seed: 4,
        checkpoint_every: 2,
        model: ModelConfig {
            backbone_channels: vec![4, 8, 8, 16, 16],
            head_width: 8,
            eam_low_width: 8,
            eam_high_width: 8,
            eam_mid_width: 8,
            input_size: 32,
            ..ModelConfig::desk()
        },
        ..TrainConfig::default()
    }
}

fn samples(n: usize) -> Vec<Sample> {
    let p = SynthParams { count: n, size: 32, seed: 4, contrast: 0.3 };
    (0..n).map(|i| synth_sample(i, &p).unwrap()).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let cfg = small_config();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch = full_batch(&samples(4), &Augmenter::from_model(&cfg.model)).unwrap();
    let before = trainer.store.clone();
    trainer.step(&batch, 0.0).unwrap();
    for ((_, a), (_, b)) in before.entries().zip(trainer.store.entries()) {
        if a.kind == bgnet::params::ParamKind::Weight {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
    }
}

#[test]
fn fixed_batch_loss_mostly_decreases() {
    let cfg = small_config();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch = full_batch(&samples(4), &Augmenter::from_model(&cfg.model)).unwrap();
    let losses = overfit_fixed_batch(&mut trainer, &batch, 60, 1e-3).unwrap();
    let tail = &losses[10..];
    let down = tail.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * (tail.len() - 1) as f64, "{down} of {} steps decreased: {losses:?}", tail.len() - 1);
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn training_loop_writes_log_and_checkpoints_deterministically() {
    let cfg = small_config();
    let data = samples(6);
    let mut logs = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        let trainer = train_loop(&cfg, &data, &TrainOutputs { dir: Some(tmp.path().to_path_buf()) }, &mut log).unwrap();
        assert_eq!(trainer.steps, 6);
        assert!(checkpoint_path(tmp.path(), 2).is_file());
        assert!(!checkpoint_path(tmp.path(), 1).is_file());
        let archive = checkpoint::load(&tmp.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(archive.epoch, Some(3));
        assert_eq!(archive.config.as_ref(), Some(&cfg));
        logs.push(String::from_utf8(log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), 6);
    let keys: Vec<String> = {
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let want = ["epoch", "step", "lr", "wbce_p2", "wiou_p2", "wbce_p3", "wiou_p3", "wbce_p4", "wiou_p4", "edge_dice", "lambda", "total"];
    let mut sorted_want = want.to_vec();
    sorted_want.sort();
    assert_eq!(keys, sorted_want);
    assert!(lines[0].starts_with("{\"epoch\":0,\"step\":0,\"lr\":"));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let trainer = Trainer::new(&small_config()).unwrap();
    let bytes = checkpoint::encode(&trainer.archive(0));
    assert!(checkpoint::decode(&bytes).is_ok());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(checkpoint::decode(&bad_magic).is_err());
    let mut bad_version = bytes;
    bad_version[8] = 99;
    assert!(checkpoint::decode(&bad_version).is_err());
}
