//! Multilabel losses over per-class scores.
//!
//! [`aam_loss`] is the asymmetric angular margin loss on cosine logits:
//!
//! ```text
//! L_j = (k/s)     ·    y  · p_-^γ- · ln p_+
//!     + ((1-k)/s) · (1-y) · p_+^γ+ · ln p_-
//! p_+ = σ( s(cosθ_j - m))
//! p_- = σ(-s(cosθ_j + m))
//! ```
//!
//! The loss of a sample is `-Σ_j L_j`; a batch reports the mean over samples.
//! [`asl_loss`] is the asymmetric loss baseline on raw logits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, sigmoid, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Cosines are pulled this far inside `[-1, 1]` before use.
pub const COS_CLAMP: f64 = 1e-7;

/// Which focusing exponent multiplies which term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FocusPairing {
    /// `γ-` on the positive term and `γ+` on the negative term.
    #[default]
    AsPrinted,
    /// `γ+` on the positive term and `γ-` on the negative term, as in ASL.
    Swapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamConfig {
    pub s: f64,
    pub m: f64,
    pub k: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub pairing: FocusPairing,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            s: 23.0,
            m: 0.0,
            k: 0.7,
            gamma_pos: 0.0,
            gamma_neg: 1.0,
            pairing: FocusPairing::AsPrinted,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::Config(format!(
                "aam scale s must be > 0, got {}",
                self.s
            )));
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::Config(format!(
                "aam k must lie in [0, 1], got {}",
                self.k
            )));
        }
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config("aam focusing exponents must be >= 0".into()));
        }
        if !self.m.is_finite() {
            return Err(Error::Config("aam margin must be finite".into()));
        }
        Ok(())
    }

    /// Exponents for (positive term, negative term).
    fn exponents(&self) -> (f64, f64) {
        match self.pairing {
            FocusPairing::AsPrinted => (self.gamma_neg, self.gamma_pos),
            FocusPairing::Swapped => (self.gamma_pos, self.gamma_neg),
        }
    }

    /// Confidence that a class is present: `p_+ = σ(s(cosθ - m))`.
    pub fn confidence(&self, cos: f64) -> f64 {
        sigmoid(self.s * (clamp_cos(cos) - self.m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
        }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config("asl focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return Err(Error::Config(format!(
                "asl clip must lie in [0, 1), got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

fn check_targets(tape: &Tape, scores: Var, targets: &Tensor) -> Result<usize> {
    let shape = tape.shape(scores);
    if shape.len() != 2 || shape != targets.shape() {
        return Err(dim_err!(
            "scores {shape:?} and targets {:?} must both be [batch, classes]",
            targets.shape()
        ));
    }
    if let Some(bad) = targets.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("targets must be 0/1, found {bad}")));
    }
    Ok(shape[0])
}

/// `sum(weight * focus * log_p)` where a zero exponent drops the focus term.
fn weighted_term(
    tape: &mut Tape,
    weight: Tensor,
    focus_base: Var,
    gamma: f64,
    log_p: Var,
) -> Result<Var> {
    let w = tape.constant(weight);
    let mut term = tape.mul(w, log_p)?;
    if gamma != 0.0 {
        let focus = tape.powf(focus_base, gamma)?;
        term = tape.mul(term, focus)?;
    }
    tape.sum(term)
}

/// Batch-mean AAM loss for cosine logits `cos: [B, K]` and 0/1 targets.
pub fn aam_loss(tape: &mut Tape, cos: Var, targets: &Tensor, cfg: &AamConfig) -> Result<Var> {
    cfg.validate()?;
    let batch = check_targets(tape, cos, targets)?;
    let (g_pos_term, g_neg_term) = cfg.exponents();
    let c = tape.clamp(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)?;

    let shifted = tape.shift(c, -cfg.m)?;
    let z_pos = tape.scale(shifted, cfg.s)?;
    let shifted = tape.shift(c, cfg.m)?;
    let z_neg = tape.scale(shifted, -cfg.s)?;
    let log_p_pos = tape.log_sigmoid(z_pos)?;
    let log_p_neg = tape.log_sigmoid(z_neg)?;
    let p_pos = tape.sigmoid(z_pos)?;
    let p_neg = tape.sigmoid(z_neg)?;

    let pos_w = targets.map(|y| cfg.k / cfg.s * y);
    let neg_w = targets.map(|y| (1.0 - cfg.k) / cfg.s * (1.0 - y));
    let pos = weighted_term(tape, pos_w, p_neg, g_pos_term, log_p_pos)?;
    let neg = weighted_term(tape, neg_w, p_pos, g_neg_term, log_p_neg)?;
    let total = tape.add(pos, neg)?;
    tape.scale(total, -1.0 / batch as f64)
}

/// Batch-mean ASL loss for raw logits `[B, K]` and 0/1 targets.
pub fn asl_loss(tape: &mut Tape, logits: Var, targets: &Tensor, cfg: &AslConfig) -> Result<Var> {
    cfg.validate()?;
    let batch = check_targets(tape, logits, targets)?;

    // positives: (1-p)^γ+ · ln p
    let log_p = tape.log_sigmoid(logits)?;
    let neg_logits = tape.scale(logits, -1.0)?;
    let one_minus_p = tape.sigmoid(neg_logits)?;
    let pos = weighted_term(tape, targets.clone(), one_minus_p, cfg.gamma_pos, log_p)?;

    // negatives: p_c^γ- · ln(1 - p_c), p_c = max(p - clip, 0)
    let neg_w = targets.map(|y| 1.0 - y);
    let neg = if cfg.clip == 0.0 {
        let log_q = tape.log_sigmoid(neg_logits)?;
        let p = tape.sigmoid(logits)?;
        weighted_term(tape, neg_w, p, cfg.gamma_neg, log_q)?
    } else {
        let shifted = tape.shift(one_minus_p, cfg.clip)?;
        let q = tape.clamp(shifted, f64::NEG_INFINITY, 1.0)?;
        let log_q = tape.log(q)?;
        let flipped = tape.scale(q, -1.0)?;
        let p_clipped = tape.shift(flipped, 1.0)?;
        weighted_term(tape, neg_w, p_clipped, cfg.gamma_neg, log_q)?
    };
    let total = tape.add(pos, neg)?;
    tape.scale(total, -1.0 / batch as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub cos: f64,
    /// Loss of one class with `y = 1`.
    pub pos_part: f64,
    /// Loss of one class with `y = 0`.
    pub neg_part: f64,
}

/// Both halves of the AAM loss over a grid of cosines.
pub fn aam_part_curves(cfg: &AamConfig, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if let Some(bad) = grid.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(Error::Domain(format!(
            "cosine grid value {bad} outside [-1, 1]"
        )));
    }
    let (g_pos_term, g_neg_term) = cfg.exponents();
    Ok(grid
        .iter()
        .map(|&cos| {
            let c = clamp_cos(cos);
            let z_pos = cfg.s * (c - cfg.m);
            let z_neg = -cfg.s * (c + cfg.m);
            let focus = |p: f64, g: f64| if g == 0.0 { 1.0 } else { p.powf(g) };
            CurvePoint {
                cos,
                pos_part: -(cfg.k / cfg.s) * focus(sigmoid(z_neg), g_pos_term) * log_sigmoid(z_pos),
                neg_part: -((1.0 - cfg.k) / cfg.s)
                    * focus(sigmoid(z_pos), g_neg_term)
                    * log_sigmoid(z_neg),
            }
        })
        .collect())
}

/// `n` evenly spaced points from -1 to 1 inclusive.
pub fn cosine_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("cos,pos_part,neg_part\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.cos, p.pos_part, p.neg_part);
    }
    out
}
