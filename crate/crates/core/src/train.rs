//! Training loop: SAM over SGD, per-step OneCycle and EMA updates, and an
//! early-stopping rule evaluated on the EMA weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultilabelDataset;
use crate::error::{Error, Result};
use crate::metrics::mean_average_precision;
use crate::model::{Arch, GateSource};
use crate::optim::{Ema, OneCycle, OneCycleConfig, Sam, SamConfig};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    /// Decay of the moving average over the best-so-far sequence.
    pub beta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            enabled: true,
            patience: 5,
            beta: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the metric has not set a new best for `patience` epochs and
/// the current value is strictly below a moving average of the best-so-far
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopTracker {
    cfg: EarlyStopConfig,
    best: Option<f64>,
    since_best: usize,
    best_ema: Option<f64>,
}

impl EarlyStopTracker {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        EarlyStopTracker {
            cfg,
            best: None,
            since_best: 0,
            best_ema: None,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_ema(&self) -> Option<f64> {
        self.best_ema
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    /// Records one epoch's metric (which must be finite).
    pub fn observe(&mut self, metric: f64) -> StopDecision {
        debug_assert!(metric.is_finite());
        match self.best {
            Some(b) if metric <= b => self.since_best += 1,
            _ => {
                self.best = Some(metric);
                self.since_best = 0;
            }
        }
        let best = self.best.expect("set above");
        // written as an increment so a constant sequence stays exact
        let ema = match self.best_ema {
            None => best,
            Some(e) => e + (1.0 - self.cfg.beta) * (best - e),
        };
        self.best_ema = Some(ema);
        if self.cfg.enabled && self.since_best >= self.cfg.patience && metric < ema {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub onecycle: OneCycleConfig,
    pub sam: SamConfig,
    pub ema_decay: f64,
    pub early_stop: EarlyStopConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            onecycle: OneCycleConfig::default(),
            sam: SamConfig::default(),
            ema_decay: 0.9997,
            early_stop: EarlyStopConfig::default(),
        }
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: f64,
    #[serde(rename = "ema_val_mAP")]
    pub ema_val_map: f64,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) with the best EMA validation mAP.
    pub best_epoch: usize,
    pub best_ema_map: f64,
    /// EMA weights at `best_epoch`.
    pub best: ParamStore,
}

/// Trains `store` in place. `on_epoch` sees each record as soon as it is
/// final, so logs survive an abort later in the run.
pub fn train<F>(
    arch: &Arch,
    store: &mut ParamStore,
    train_set: &MultilabelDataset,
    val_set: &MultilabelDataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.onecycle, cfg.epochs * steps_per_epoch)?;
    let mut sam = Sam::new(cfg.sam, store)?;
    let mut ema = Ema::new(cfg.ema_decay, store)?;
    let mut stopper = EarlyStopTracker::new(cfg.early_stop);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut best = (0, f64::NEG_INFINITY, ema.averaged(store));
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.gather(batch)?;
            lr = schedule.lr(step);
            let loss = sam.step(store, lr, |s| arch.loss_and_grads(s, &x, &y))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {loss} at epoch {epoch}, batch {} (step {step})",
                    b + 1
                )));
            }
            ema.update(store);
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val_map = validation_map(arch, store, val_set)?;
        let ema_store = ema.averaged(store);
        let ema_val_map = validation_map(arch, &ema_store, val_set)?;
        if ema_val_map > best.1 {
            best = (epoch, ema_val_map, ema_store);
        }
        let stopped = stopper.observe(ema_val_map) == StopDecision::Stop;
        let record = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            lr,
            val_map,
            ema_val_map,
            stopped,
        };
        on_epoch(&record)?;
        log.push(record);
        if stopped {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_ema_map: best.1,
        best: best.2,
    })
}

pub fn validation_map(arch: &Arch, store: &ParamStore, set: &MultilabelDataset) -> Result<f64> {
    let scores = arch.scores(store, &set.features, GateSource::Live)?;
    if !scores.is_finite() {
        return Err(Error::Diverged("non-finite validation scores".into()));
    }
    mean_average_precision(&scores, &set.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seq: &[f64]) -> Vec<StopDecision> {
        let mut t = EarlyStopTracker::new(EarlyStopConfig::default());
        seq.iter().map(|&m| t.observe(m)).collect()
    }

    #[test]
    fn improving_sequence_never_stops() {
        let seq: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        assert!(run(&seq).iter().all(|&d| d == StopDecision::Continue));
    }

    #[test]
    fn drop_after_best_stops_on_fifth_epoch() {
        let d = run(&[0.9, 0.5, 0.5, 0.5, 0.5, 0.5]);
        assert_eq!(d[..5], [StopDecision::Continue; 5]);
        assert_eq!(d[5], StopDecision::Stop);
    }

    #[test]
    fn flat_at_the_average_continues() {
        let d = run(&[0.9; 12]);
        assert!(d.iter().all(|&x| x == StopDecision::Continue));
    }

    #[test]
    fn average_follows_best_recurrence() {
        let seq = [0.2, 0.5, 0.4, 0.7, 0.6, 0.65];
        let mut t = EarlyStopTracker::new(EarlyStopConfig::default());
        let mut best = f64::NEG_INFINITY;
        let mut ema: Option<f64> = None;
        for &m in &seq {
            t.observe(m);
            best = best.max(m);
            ema = Some(match ema {
                None => best,
                Some(e) => 0.9 * e + 0.1 * best,
            });
            assert!((t.best_ema().unwrap() - ema.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_tracker_never_stops() {
        let mut t = EarlyStopTracker::new(EarlyStopConfig {
            enabled: false,
            ..Default::default()
        });
        for m in [0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1] {
            assert_eq!(t.observe(m), StopDecision::Continue);
        }
    }
}
