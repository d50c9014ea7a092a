//! SGD with momentum, the SAM two-pass wrapper, the OneCycle schedule and
//! an exponential moving average of weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Weight decay applies only to parameters of rank >= 2 (matrices and
/// filters). Biases, gains and attention vectors are exempt.
pub fn decay_mask(store: &ParamStore) -> Vec<bool> {
    store.iter().map(|p| p.value.rank() >= 2).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    mask: Vec<bool>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        Sgd {
            cfg,
            mask: decay_mask(store),
            velocity: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// `v <- μ v + (g + λ·mask·w)`, `w <- w - lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        grads.check_matches(store)?;
        for (((w, g), v), &decays) in store
            .values_mut()
            .zip(&grads.0)
            .zip(&mut self.velocity)
            .zip(&self.mask)
        {
            let wd = if decays { self.cfg.weight_decay } else { 0.0 };
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = if wd != 0.0 { gi + wd * *wi } else { gi };
                *vi = self.cfg.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamConfig {
    pub rho: f64,
    pub sgd: SgdConfig,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: 0.05,
            sgd: SgdConfig::default(),
        }
    }
}

/// Sharpness-aware minimization around [`Sgd`].
///
/// `g = ∇L(w)`, `ε = ρ g / ‖g‖₂` (global norm), `g' = ∇L(w + ε)`, then
/// restore `w` and take the base step with `g'`. When `ρ = 0` or `‖g‖ = 0`
/// the perturbation is skipped and `g` is used directly.
#[derive(Clone, Debug)]
pub struct Sam {
    rho: f64,
    base: Sgd,
}

impl Sam {
    pub fn new(cfg: SamConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.rho >= 0.0) {
            return Err(Error::Config(format!(
                "sam rho must be >= 0, got {}",
                cfg.rho
            )));
        }
        Ok(Sam {
            rho: cfg.rho,
            base: Sgd::new(cfg.sgd, store),
        })
    }

    /// Runs one step. `loss_grad` evaluates loss and gradients at the
    /// store's current values; the loss at the unperturbed point is returned.
    pub fn step<F>(&mut self, store: &mut ParamStore, lr: f64, mut loss_grad: F) -> Result<f64>
    where
        F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
    {
        let (loss, grads) = loss_grad(store)?;
        let norm = grads.global_norm();
        if self.rho == 0.0 || norm == 0.0 {
            self.base.step(store, &grads, lr)?;
            return Ok(loss);
        }
        let scale = self.rho / norm;
        let eps: Vec<Tensor> = grads.0.iter().map(|g| g.map(|v| v * scale)).collect();
        let original: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        for (w, e) in store.values_mut().zip(&eps) {
            for (wi, ei) in w.data_mut().iter_mut().zip(e.data()) {
                *wi += ei;
            }
        }
        let perturbed = loss_grad(store);
        for (w, orig) in store.values_mut().zip(original) {
            *w = orig;
        }
        let (_, sharp_grads) = perturbed?;
        self.base.step(store, &sharp_grads, lr)?;
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycleConfig {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub div_initial: f64,
    pub div_final: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            max_lr: 0.007,
            warmup_frac: 0.3,
            div_initial: 25.0,
            div_final: 1e4,
        }
    }
}

/// Cosine warmup from `max_lr/div_initial` to `max_lr`, then cosine anneal
/// to `max_lr/div_final` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    cfg: OneCycleConfig,
    total_steps: usize,
}

impl OneCycle {
    pub fn new(cfg: OneCycleConfig, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("onecycle needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&cfg.warmup_frac) || !(cfg.max_lr >= 0.0) {
            return Err(Error::Config(
                "onecycle warmup_frac must be in [0, 1], max_lr >= 0".into(),
            ));
        }
        if !(cfg.div_initial > 0.0 && cfg.div_final > 0.0) {
            return Err(Error::Config("onecycle divisors must be positive".into()));
        }
        Ok(OneCycle { cfg, total_steps })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        (self.cfg.warmup_frac * self.total_steps as f64).round() as usize
    }

    /// Learning rate at `step`; steps past the end hold the final value.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        let peak = self.cfg.max_lr;
        let start = peak / self.cfg.div_initial;
        let end = peak / self.cfg.div_final;
        let warm = self.warmup_steps();
        if step < warm {
            cosine_interp(start, peak, step as f64 / warm as f64)
        } else {
            let span = self.total_steps - warm;
            if span == 0 {
                return end;
            }
            cosine_interp(peak, end, (step - warm) as f64 / span as f64)
        }
    }
}

/// Exact at both ends: `t = 0` gives `from`, `t = 1` gives `to`.
fn cosine_interp(from: f64, to: f64, t: f64) -> f64 {
    let w = (1.0 - (std::f64::consts::PI * t).cos()) / 2.0;
    from * (1.0 - w) + to * w
}

/// Shadow copy of the parameters, `shadow <- decay·shadow + (1-decay)·w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "ema decay must be in [0, 1], got {decay}"
            )));
        }
        Ok(Ema {
            decay,
            shadow: store.iter().map(|p| p.value.clone()).collect(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn update(&mut self, store: &ParamStore) {
        // increment form: with rounding it still lands between old shadow
        // and live value, so the shadow never leaves the observed envelope
        let c = 1.0 - self.decay;
        for (s, p) in self.shadow.iter_mut().zip(store.iter()) {
            for (si, &wi) in s.data_mut().iter_mut().zip(p.value.data()) {
                *si += c * (wi - *si);
            }
        }
    }

    /// Exchanges live and shadow values; calling twice restores both.
    pub fn swap(&mut self, store: &mut ParamStore) {
        for (s, w) in self.shadow.iter_mut().zip(store.values_mut()) {
            std::mem::swap(s, w);
        }
    }

    /// A copy of `store` holding the shadow values.
    pub fn averaged(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (w, s) in out.values_mut().zip(&self.shadow) {
            *w = s.clone();
        }
        out
    }
}
