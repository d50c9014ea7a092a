//! End-to-end operations shared by the command line and the tests: build a
//! model for a dataset, train it with logging and checkpointing, evaluate
//! and calibrate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{DatasetDir, MultilabelDataset};
use crate::error::{Error, Result};
use crate::label_graph::CorrelationMatrix;
use crate::metrics::{calibrate_thresholds, default_grid, AdaptReport, Calibration};
use crate::model::{Arch, GateSource, GraphInputs};
use crate::params::ParamStore;
use crate::train::{train, TrainOutcome};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mlck";
pub const CONFIG_FILE: &str = "config.json";

/// Graph inputs for `data`: the correlation graph comes from the training
/// labels, the embeddings are aligned to the class order.
pub fn graph_inputs(cfg: &RunConfig, data: &DatasetDir) -> Result<Option<GraphInputs>> {
    if !cfg.model.head.uses_graph() {
        return Ok(None);
    }
    let emb = data.embeddings.as_ref().ok_or_else(|| {
        Error::MissingEmbeddings(format!(
            "head {:?} needs {}; datasets with unnamed labels have no word vectors, \
             so use the plain or decoder head",
            cfg.model.head,
            crate::data::EMBEDDINGS_FILE
        ))
    })?;
    let names = &data.train.class_names;
    let z = CorrelationMatrix::from_label_matrix(&data.train.labels, names, cfg.model.correlation)?;
    Ok(Some(GraphInputs {
        embeddings: emb.aligned_to(names)?,
        adjacency: z.adjacency().clone(),
    }))
}

/// Initial model for `data`, seeded by `cfg.seed`.
pub fn build_model(cfg: &RunConfig, data: &DatasetDir) -> Result<(Arch, ParamStore)> {
    cfg.validate()?;
    let sample = data.train.sample_shape();
    if sample[0] != cfg.model.backbone.in_channels {
        return Err(Error::Config(format!(
            "model.backbone.in_channels is {}, data has {} channels",
            cfg.model.backbone.in_channels, sample[0]
        )));
    }
    cfg.model.backbone.output_hw(sample[1], sample[2])?;
    let graph = graph_inputs(cfg, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Arch::new(
        cfg.model.clone(),
        cfg.loss,
        data.train.num_classes(),
        graph,
        &mut rng,
    )
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains and writes the resolved config, a JSON-lines log and the
/// best-EMA checkpoint into `out_dir`.
pub fn train_run(cfg: &RunConfig, data: &DatasetDir, out_dir: &Path) -> Result<RunArtifacts> {
    let (arch, mut store) = build_model(cfg, data)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_flat_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(
        &arch,
        &mut store,
        &data.train,
        &data.val,
        &cfg.train,
        cfg.seed,
        |rec| {
            let line = serde_json::to_string(rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        },
    )?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        class_names: data.train.class_names.clone(),
        epoch: outcome.best_epoch,
        ema_val_map: outcome.best_ema_map,
        params: outcome.best.clone(),
        graph: arch.graph().cloned(),
    };
    ckpt.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        outcome,
    })
}

/// Fits per-class thresholds on `set` (the training split by convention).
pub fn calibrate(ckpt: &Checkpoint, set: &MultilabelDataset) -> Result<Calibration> {
    let (arch, store) = ckpt.restore()?;
    let scores = arch.predict(&store, &set.features, GateSource::Live)?;
    calibrate_thresholds(&scores, &set.labels, &default_grid())
}

/// Scores `set` at 0.5 and at `thresholds` (0.5 everywhere when absent).
pub fn evaluate(
    ckpt: &Checkpoint,
    set: &MultilabelDataset,
    thresholds: Option<&[f64]>,
) -> Result<AdaptReport> {
    let (arch, store) = ckpt.restore()?;
    if ckpt.class_names != set.class_names {
        return Err(Error::Data(
            "checkpoint and dataset class names differ".into(),
        ));
    }
    let scores = arch.predict(&store, &set.features, GateSource::Live)?;
    let k = set.num_classes();
    let default = vec![0.5; k];
    let thr = thresholds.unwrap_or(&default);
    AdaptReport::new(&scores, &set.labels, thr)
}
