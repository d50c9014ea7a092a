use std::fs;

use mlc_core::checkpoint::Checkpoint;
use mlc_core::config::RunConfig;
use mlc_core::data::{generate_synthetic, DatasetDir, SynthSpec};
use mlc_core::model::{GateSource, HeadKind};
use mlc_core::run::{
    build_model, calibrate, evaluate, train_run, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};
use mlc_core::tensor::Tensor;
use mlc_core::train::{train, EpochLog};

fn small_data() -> DatasetDir {
    generate_synthetic(&SynthSpec {
        num_samples: 240,
        ..SynthSpec::reference()
    })
    .unwrap()
}

fn quick(head: HeadKind) -> RunConfig {
    let mut c = RunConfig::reference();
    c.model.head = head;
    c.train.epochs = 2;
    c
}

#[test]
fn run_writes_config_log_and_loadable_checkpoint() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(HeadKind::DecoderGat);
    let art = train_run(&cfg, &data, dir.path()).unwrap();

    let saved = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);

    let log: Vec<EpochLog> = fs::read_to_string(dir.path().join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log, art.outcome.log);
    assert_eq!(log.len(), 2);

    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.epoch, art.outcome.best_epoch);
    assert_eq!(ckpt.ema_val_map, art.outcome.best_ema_map);
    assert_eq!(ckpt.params, art.outcome.best);

    // the restored model scores validation data exactly as the best EMA weights do
    let (arch, store) = ckpt.restore().unwrap();
    let restored = arch
        .scores(&store, &data.val.features, GateSource::Live)
        .unwrap();
    let (arch0, _) = build_model(&cfg, &data).unwrap();
    let direct = arch0
        .scores(&art.outcome.best, &data.val.features, GateSource::Live)
        .unwrap();
    assert_eq!(restored, direct);

    let report = evaluate(&ckpt, &data.val, None).unwrap();
    assert_eq!(
        report.map,
        mlc_core::metrics::mean_average_precision(&restored, &data.val.labels).unwrap()
    );
    let cal = calibrate(&ckpt, &data.train).unwrap();
    assert_eq!(cal.thresholds.len(), 10);
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = small_data();
    let cfg = quick(HeadKind::Plain);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_run(&cfg, &data, a.path()).unwrap();
    let rb = train_run(&cfg, &data, b.path()).unwrap();
    assert_eq!(ra.outcome.log, rb.outcome.log);
    assert_eq!(
        fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(),
        fs::read(b.path().join(CHECKPOINT_FILE)).unwrap()
    );

    let mut other = cfg.clone();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    let rc = train_run(&other, &data, c.path()).unwrap();
    assert_ne!(ra.outcome.log, rc.outcome.log);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data();
    let mut cfg = quick(HeadKind::Decoder);
    cfg.train.onecycle.max_lr = 0.0;
    let (arch, mut store) = build_model(&cfg, &data).unwrap();
    let before = store.clone();
    train(
        &arch,
        &mut store,
        &data.train,
        &data.val,
        &cfg.train,
        0,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(store, before);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut data = small_data();
    let shape = data.train.features.shape().to_vec();
    data.train.features = Tensor::full(shape, f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    let err = match train_run(&quick(HeadKind::Plain), &data, dir.path()) {
        Ok(_) => panic!("training on NaN features succeeded"),
        Err(e) => e,
    };
    assert_eq!(err.kind(), "diverged");
    let msg = err.to_string();
    assert!(msg.contains("epoch 1") && msg.contains("batch 1"), "{msg}");
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(HeadKind::Plain);
    cfg.train.epochs = 1;
    train_run(&cfg, &data, dir.path()).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), "integrity");
    fs::write(&path, b"not a checkpoint").unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), "integrity");
}

#[test]
fn graph_head_without_embeddings_names_the_fix() {
    let mut data = small_data();
    data.embeddings = None;
    let err = match build_model(&quick(HeadKind::Gat), &data) {
        Ok(_) => panic!("built a graph head without embeddings"),
        Err(e) => e,
    };
    assert_eq!(err.kind(), "missing-embeddings");
    assert!(err.to_string().contains("unnamed labels"));
    assert!(build_model(&quick(HeadKind::Decoder), &data).is_ok());
}
