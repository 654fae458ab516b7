use std::fs;

use ssmixer::data::{gen_toy_images, write_images, TsSpec};
use ssmixer::experiment::{
    eval_checkpoint, linear_probe, restore, train, write_run, DataConfig, ExperimentConfig, Flow, ModelConfig,
};
use ssmixer_core::tsm2::Tsm2Config;
use ssmixer_core::vim2::Vim2Config;

fn small_tsm2() -> ExperimentConfig {
    let model = Tsm2Config { history: 32, horizon: 8, patch: 8, dim: 8, layers: 1, ..Tsm2Config::default() };
    ExperimentConfig {
        model: ModelConfig::Tsm2(model),
        epochs: 2,
        batch_size: 8,
        seed: 11,
        data: DataConfig { series: TsSpec { len: 200, ..TsSpec::default() }, ..DataConfig::default() },
        ..ExperimentConfig::tsm2_desk()
    }
}

fn small_vim2() -> ExperimentConfig {
    let model = Vim2Config {
        stage_widths: vec![4, 8],
        token_depths: vec![1, 1],
        channel_depths: vec![1, 0],
        num_classes: 3,
        ..Vim2Config::desk()
    };
    ExperimentConfig {
        model: ModelConfig::Vim2(model),
        epochs: 1,
        batch_size: 4,
        data: DataConfig { train_images: 8, val_images: 6, ..DataConfig::default() },
        ..ExperimentConfig::vim2_desk()
    }
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let cfg = small_tsm2();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let t = train(&cfg, |_| Flow::Continue).unwrap();
        write_run(d.path(), &cfg, &t).unwrap();
    }
    for f in ["run.csv", "checkpoint.ntf", "config.json"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let other = train(&ExperimentConfig { seed: 12, ..cfg }, |_| Flow::Continue).unwrap();
    let first = train(&small_tsm2(), |_| Flow::Continue).unwrap();
    assert_ne!(other.records, first.records);
}

#[test]
fn run_csv_has_one_row_per_epoch() {
    let cfg = small_tsm2();
    let d = tempfile::tempdir().unwrap();
    let t = train(&cfg, |_| Flow::Continue).unwrap();
    write_run(d.path(), &cfg, &t).unwrap();
    let text = fs::read_to_string(d.path().join("run.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,val_metric,baseline");
    assert_eq!(lines.count(), cfg.epochs);
    let timing = fs::read_to_string(d.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 1 + 2 * cfg.epochs);
}

#[test]
fn early_stop_ends_training() {
    let mut seen = 0;
    let t = train(&ExperimentConfig { epochs: 5, ..small_tsm2() }, |_| {
        seen += 1;
        if seen == 2 {
            Flow::Stop
        } else {
            Flow::Continue
        }
    })
    .unwrap();
    assert_eq!(t.records.len(), 2);
}

#[test]
fn records_are_consistent() {
    let t = train(&small_tsm2(), |_| Flow::Continue).unwrap();
    for r in &t.records {
        assert!(r.train_loss.is_finite() && r.val_loss >= 0.0);
        assert!((r.val_metric - r.val_loss / r.baseline).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_restores_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    let cfg = small_vim2();
    let t = train(&cfg, |_| Flow::Continue).unwrap();
    write_run(dir.path(), &cfg, &t).unwrap();
    let (back, _, store) = restore(&dir.path().join("checkpoint.ntf")).unwrap();
    assert_eq!(back, cfg);
    for ((na, ta), (nb, tb)) in store.iter().zip(t.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
    let tr = gen_toy_images(3, 4, 1).unwrap();
    let va = gen_toy_images(3, 9, 2).unwrap();
    write_images(data.path(), &tr, &va).unwrap();
    let metrics = eval_checkpoint(&dir.path().join("checkpoint.ntf"), data.path()).unwrap();
    let names: Vec<&str> = metrics.iter().map(|m| m.0).collect();
    assert_eq!(names, ["cross_entropy", "accuracy", "majority_accuracy"]);
    let acc = metrics[1].1;
    assert!((0.0..=1.0).contains(&acc) && (acc * 9.0 - (acc * 9.0).round()).abs() < 1e-9);
    assert!((metrics[2].1 - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn config_json_round_trips_and_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    for cfg in [ExperimentConfig::tsm2_desk(), ExperimentConfig::vim2_desk()] {
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }
    fs::write(&path, r#"{"model":{"kind":"tsm2"},"epochs":3,"typo":1}"#).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    fs::write(&path, r#"{"model":{"kind":"tsm2","variates":3},"epochs":3}"#).unwrap();
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!((c.epochs, c.batch_size), (3, 16));
}

#[test]
fn mismatched_data_is_rejected() {
    let mut cfg = small_tsm2();
    cfg.data.series.variates = 3;
    assert!(train(&cfg, |_| Flow::Continue).is_err());
    assert!(train(&ExperimentConfig { batch_size: 0, ..small_tsm2() }, |_| Flow::Continue).is_err());
}

#[test]
fn linear_probe_beats_chance() {
    let tr = gen_toy_images(3, 90, 3).unwrap();
    let va = gen_toy_images(3, 60, 4).unwrap();
    assert!(linear_probe(&tr, &va, 10, 0).unwrap() > 0.4);
}
