//! Three small computations for `www/index.html`. Each wasm export returns
//! JSON and throws a string on bad input; the plain functions underneath are
//! what the tests call.

use std::collections::BTreeMap;

use mlc_core::label_graph::{CorrelationConfig, CorrelationMatrix};
use mlc_core::losses::{aam_part_curves, cosine_grid, AamConfig, FocusPairing};
use mlc_core::optim::{OneCycle, OneCycleConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct Curves {
    pub cos: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn curves(
    s: f64,
    m: f64,
    k: f64,
    gamma_pos: f64,
    gamma_neg: f64,
    swapped: bool,
    points: usize,
) -> Result<Curves, String> {
    if points < 2 {
        return Err("need at least two points".into());
    }
    let cfg = AamConfig {
        s,
        m,
        k,
        gamma_pos,
        gamma_neg,
        pairing: if swapped {
            FocusPairing::Swapped
        } else {
            FocusPairing::AsPrinted
        },
    };
    let pts = aam_part_curves(&cfg, &cosine_grid(points)).map_err(|e| e.to_string())?;
    Ok(Curves {
        cos: pts.iter().map(|p| p.cos).collect(),
        pos: pts.iter().map(|p| p.pos_part).collect(),
        neg: pts.iter().map(|p| p.neg_part).collect(),
    })
}

/// Learning rate at every step `0..=steps`.
pub fn schedule(
    max_lr: f64,
    warmup_frac: f64,
    div_initial: f64,
    div_final: f64,
    steps: usize,
) -> Result<Vec<f64>, String> {
    let cfg = OneCycleConfig {
        max_lr,
        warmup_frac,
        div_initial,
        div_final,
    };
    let oc = OneCycle::new(cfg, steps).map_err(|e| e.to_string())?;
    Ok((0..=steps).map(|t| oc.lr(t)).collect())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Cooccurrence {
    pub classes: Vec<String>,
    /// Row i, column j holds `P(j | i)`.
    pub conditional: Vec<Vec<f64>>,
    pub edges: Vec<Vec<bool>>,
    pub reweighted: Vec<Vec<f64>>,
}

/// `text` holds one sample per line, labels separated by commas or spaces.
/// Classes are sorted by name. Blank lines are samples with no labels.
pub fn cooccurrence(text: &str, tau: f64, p: f64) -> Result<Cooccurrence, String> {
    let samples: Vec<Vec<&str>> = text
        .lines()
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .collect()
        })
        .collect();
    let mut index = BTreeMap::new();
    for name in samples.iter().flatten() {
        index.insert(*name, 0);
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let classes: Vec<String> = index.keys().map(|s| s.to_string()).collect();
    let sets: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| s.iter().map(|n| index[n]).collect())
        .collect();
    let cm = CorrelationMatrix::build(&sets, &classes, CorrelationConfig { tau, p })
        .map_err(|e| e.to_string())?;
    let k = classes.len();
    let grid = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..k).map(|i| (0..k).map(|j| f(i, j)).collect()).collect()
    };
    Ok(Cooccurrence {
        conditional: grid(&|i, j| cm.conditional(i, j)),
        reweighted: grid(&|i, j| cm.reweighted(i, j)),
        edges: (0..k)
            .map(|i| (0..k).map(|j| cm.adjacency().edge(i, j)).collect())
            .collect(),
        classes,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn aam_curves(
    s: f64,
    m: f64,
    k: f64,
    gamma_pos: f64,
    gamma_neg: f64,
    swapped: bool,
    points: usize,
) -> Result<String, JsValue> {
    to_js(curves(s, m, k, gamma_pos, gamma_neg, swapped, points))
}

#[wasm_bindgen]
pub fn onecycle(
    max_lr: f64,
    warmup_frac: f64,
    div_initial: f64,
    div_final: f64,
    steps: usize,
) -> Result<String, JsValue> {
    to_js(schedule(max_lr, warmup_frac, div_initial, div_final, steps))
}

#[wasm_bindgen]
pub fn label_graph(text: &str, tau: f64, p: f64) -> Result<String, JsValue> {
    to_js(cooccurrence(text, tau, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_span_the_grid() {
        let c = curves(23.0, 0.0, 0.7, 0.0, 1.0, false, 11).unwrap();
        assert_eq!(c.cos.len(), 11);
        assert_eq!((c.cos[0], c.cos[10]), (-1.0, 1.0));
        // a confident correct prediction costs less than a wrong one
        assert!(c.pos[10] < c.pos[0]);
        assert!(c.neg[0] < c.neg[10]);
        assert!(curves(23.0, 0.0, 1.5, 0.0, 1.0, false, 11).is_err());
        assert!(curves(23.0, 0.0, 0.7, 0.0, 1.0, false, 1).is_err());
    }

    #[test]
    fn schedule_peaks_at_max_lr() {
        let lr = schedule(0.1, 0.3, 25.0, 1e4, 100).unwrap();
        assert_eq!(lr.len(), 101);
        assert!((lr[0] - 0.1 / 25.0).abs() < 1e-15);
        assert!((lr[100] - 0.1 / 1e4).abs() < 1e-15);
        let peak = lr.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - 0.1).abs() < 1e-15);
        assert!(schedule(0.1, 0.3, 25.0, 1e4, 0).is_err());
    }

    #[test]
    fn cooccurrence_matches_hand_counts() {
        // cat appears 4 times, dog twice (both with cat)
        let text = "cat dog\ncat,dog\ncat\ncat\n\nbird";
        let c = cooccurrence(text, 0.4, 0.2).unwrap();
        assert_eq!(c.classes, ["bird", "cat", "dog"]);
        assert_eq!(c.conditional[1][2], 0.5);
        assert_eq!(c.conditional[2][1], 1.0);
        assert_eq!(c.conditional[0][1], 0.0);
        assert!(c.edges[1][2] && c.edges[2][1] && !c.edges[0][1]);
        // bird has no neighbour and keeps all weight on itself
        assert_eq!(c.reweighted[0], [1.0, 0.0, 0.0]);
        assert_eq!(c.reweighted[2], [0.0, 0.2, 0.8]);
        for row in &c.reweighted {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(cooccurrence("a b", 1.5, 0.2).is_err());
    }
}
