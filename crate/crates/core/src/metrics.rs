//! Ranking and thresholded multilabel metrics, and per-class threshold
//! calibration.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Average precision of one class: the mean, over positives, of precision
/// at each positive's rank. Scores are sorted descending with ties kept in
/// index order. `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn precision(self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn f1(self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(p: f64, r: f64) -> Option<f64> {
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub ap: Vec<Option<f64>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "OP")]
    pub op: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    pub thresholds: Vec<f64>,
    /// Classes without positives, left out of mAP.
    pub excluded_from_map: Vec<usize>,
    /// Ratios whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

fn check_shapes(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let &[b, k] = scores.shape() else {
        return Err(dim_err!("scores must be B×K, got {:?}", scores.shape()));
    };
    if labels.shape() != scores.shape() {
        return Err(dim_err!(
            "labels {:?} do not match scores {:?}",
            labels.shape(),
            scores.shape()
        ));
    }
    if let Some(i) = labels.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!(
            "label at row {} column {} is not 0/1",
            i / k + 1,
            i % k + 1
        )));
    }
    Ok((b, k))
}

fn column(t: &Tensor, k: usize, j: usize) -> Vec<f64> {
    t.data().iter().skip(j).step_by(k).copied().collect()
}

/// Confusion counts of class `j` when predicting `score >= thr`.
fn class_counts(scores: &[f64], labels: &[f64], thr: f64) -> Counts {
    let mut c = Counts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= thr, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// mAP plus overall (pooled) and per-class precision, recall and F1.
pub fn evaluate(scores: &Tensor, labels: &Tensor, thresholds: &[f64]) -> Result<EvalReport> {
    let (b, k) = check_shapes(scores, labels)?;
    if thresholds.len() != k {
        return Err(dim_err!("{} thresholds for {k} classes", thresholds.len()));
    }
    let mut degenerate = Vec::new();
    let mut flag = |v: Option<f64>, what: String| {
        v.unwrap_or_else(|| {
            degenerate.push(what);
            0.0
        })
    };
    let mut ap = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let (mut precision, mut recall, mut f1) = (Vec::new(), Vec::new(), Vec::new());
    let mut total = Counts::default();
    for j in 0..k {
        let (s, y) = (column(scores, k, j), column(labels, k, j));
        let a = average_precision(&s, &y);
        if a.is_none() {
            excluded.push(j);
        }
        ap.push(a);
        let c = class_counts(&s, &y, thresholds[j]);
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        precision.push(flag(c.precision(), format!("precision of class {j}")));
        recall.push(flag(c.recall(), format!("recall of class {j}")));
        f1.push(flag(c.f1(), format!("F1 of class {j}")));
    }
    let scored: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = flag(
        (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        "mAP".into(),
    );
    let op = flag(total.precision(), "OP".into());
    let or = flag(total.recall(), "OR".into());
    let of1 = flag(harmonic(op, or), "OF1".into());
    let cp = precision.iter().sum::<f64>() / k as f64;
    let cr = recall.iter().sum::<f64>() / k as f64;
    let cf1 = flag(harmonic(cp, cr), "CF1".into());
    Ok(EvalReport {
        num_samples: b,
        ap,
        precision,
        recall,
        f1,
        map,
        op,
        or,
        of1,
        cp,
        cr,
        cf1,
        thresholds: thresholds.to_vec(),
        excluded_from_map: excluded,
        degenerate,
    })
}

/// Mean AP over classes with at least one positive (0 if none has).
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    let (_, k) = check_shapes(scores, labels)?;
    let aps: Vec<f64> = (0..k)
        .filter_map(|j| average_precision(&column(scores, k, j), &column(labels, k, j)))
        .collect();
    Ok(if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    })
}

/// `0.01, 0.02, .., 0.99`, built from integers so 0.5 is exact.
pub fn default_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: Vec<f64>,
    /// Classes without positives; their threshold stays at 0.5.
    pub flagged: Vec<usize>,
}

/// Per class, the grid threshold with the highest F1. Ties go to the
/// threshold closest to 0.5, then to the lower one.
pub fn calibrate_thresholds(scores: &Tensor, labels: &Tensor, grid: &[f64]) -> Result<Calibration> {
    let (_, k) = check_shapes(scores, labels)?;
    if !grid.contains(&0.5) || grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Config(
            "calibration grid must lie in (0, 1) and contain 0.5".into(),
        ));
    }
    let mut thresholds = vec![0.5; k];
    let mut flagged = Vec::new();
    for (j, thr) in thresholds.iter_mut().enumerate() {
        let (s, y) = (column(scores, k, j), column(labels, k, j));
        if !y.contains(&1.0) {
            flagged.push(j);
            continue;
        }
        let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
        for &t in grid {
            let f = class_counts(&s, &y, t).f1().unwrap_or(0.0);
            let closer = (t - 0.5).abs() < (best.1 - 0.5).abs()
                || ((t - 0.5).abs() == (best.1 - 0.5).abs() && t < best.1);
            if f > best.0 || (f == best.0 && closer) {
                best = (f, t);
            }
        }
        *thr = best.1;
    }
    Ok(Calibration {
        thresholds,
        flagged,
    })
}

/// Side-by-side report at the default 0.5 thresholds and at calibrated ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    #[serde(rename = "OF1-adapt")]
    pub of1_adapt: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    #[serde(rename = "CF1-adapt")]
    pub cf1_adapt: f64,
    /// `adapt - default`; may be negative on held-out data.
    pub delta_of1: f64,
    pub delta_cf1: f64,
    pub default: EvalReport,
    pub adapt: EvalReport,
}

impl AdaptReport {
    pub fn new(scores: &Tensor, labels: &Tensor, thresholds: &[f64]) -> Result<Self> {
        let k = labels.shape().get(1).copied().unwrap_or(0);
        let default = evaluate(scores, labels, &vec![0.5; k])?;
        let adapt = evaluate(scores, labels, thresholds)?;
        Ok(AdaptReport {
            map: default.map,
            of1: default.of1,
            of1_adapt: adapt.of1,
            cf1: default.cf1,
            cf1_adapt: adapt.cf1,
            delta_of1: adapt.of1 - default.of1,
            delta_cf1: adapt.cf1 - default.cf1,
            default,
            adapt,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "mAP,OF1,OF1-adapt,CF1,CF1-adapt\n{},{},{},{},{}\n",
            self.map, self.of1, self.of1_adapt, self.cf1, self.cf1_adapt
        )
    }
}

impl EvalReport {
    /// Per-class rows followed by an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap,precision,recall,f1,threshold\n");
        for j in 0..self.ap.len() {
            let ap = self.ap[j].map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{j},{ap},{},{},{},{}\n",
                self.precision[j], self.recall[j], self.f1[j], self.thresholds[j]
            ));
        }
        out.push_str(&format!(
            "# mAP={} OP={} OR={} OF1={} CP={} CR={} CF1={}\n",
            self.map, self.op, self.or, self.of1, self.cp, self.cr, self.cf1
        ));
        out
    }
}
