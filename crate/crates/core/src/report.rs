//! Evaluation metrics and plot-data export.
//!
//! Run accuracy is `100 * (1 - |y - y_hat| / y)` floored at zero, averaged
//! over runs with nonzero mass. Relative accuracy is undefined for empty
//! runs, so those are reported separately as a mean absolute error in kg.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_file, write_json};
use crate::error::{Error, Result};

/// Predictions for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPrediction {
    pub run_id: String,
    /// Raw per-frame network outputs.
    pub frame_raw: Vec<f64>,
    /// Per-frame outputs scaled by speed and capture interval (kg per
    /// capture).
    pub frame_scaled: Vec<f64>,
    pub predicted_total: f64,
    pub true_total: f64,
}

impl RunPrediction {
    pub fn new(run_id: impl Into<String>, frame_raw: Vec<f64>, frame_scaled: Vec<f64>, true_total: f64) -> Self {
        let predicted_total = frame_scaled.iter().sum();
        Self {
            run_id: run_id.into(),
            frame_raw,
            frame_scaled,
            predicted_total,
            true_total,
        }
    }

    /// Signed total error `y_hat - y`.
    pub fn error(&self) -> f64 {
        self.predicted_total - self.true_total
    }

    pub fn is_empty_run(&self) -> bool {
        self.true_total == 0.0
    }
}

pub fn run_accuracy(y: f64, y_hat: f64) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!(
            "relative accuracy needs a positive total, got {y}"
        )));
    }
    Ok((100.0 * (1.0 - (y - y_hat).abs() / y)).max(0.0))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub empty_runs: usize,
    /// Mean absolute predicted total over empty runs, if any.
    pub empty_mae: Option<f64>,
}

pub fn dataset_accuracy(preds: &[RunPrediction]) -> Result<AccuracySummary> {
    let mut acc = Vec::new();
    let mut empty = Vec::new();
    for p in preds {
        if p.is_empty_run() {
            empty.push(p.predicted_total.abs());
        } else {
            acc.push(run_accuracy(p.true_total, p.predicted_total)?);
        }
    }
    if acc.is_empty() {
        return Err(Error::Domain("no run with nonzero mass".into()));
    }
    let (mean, std) = mean_std(&acc);
    Ok(AccuracySummary {
        mean,
        std,
        runs: acc.len(),
        empty_runs: empty.len(),
        empty_mae: (!empty.is_empty()).then(|| empty.iter().sum::<f64>() / empty.len() as f64),
    })
}

/// Mean squared first difference.
pub fn smoothness_metric(signal: &[f64]) -> Result<f64> {
    if signal.len() < 2 {
        return Err(Error::Domain("smoothness needs at least two samples".into()));
    }
    let s: f64 = signal.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok(s / (signal.len() - 1) as f64)
}

/// Squared Pearson correlation between two equal-length series.
pub fn r_squared(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let (ma, _) = mean_std(&a[..n]);
    let (mb, _) = mean_std(&b[..n]);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab * sab / (saa * sbb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges. Values on an interior edge go to the bin nearer
    /// the middle of the range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Histogram of signed total errors. Edges span the observed range; when
/// every error is equal the range is widened symmetrically by one unit.
pub fn error_histogram(preds: &[RunPrediction], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::config("histogram needs at least two bins"));
    }
    let errs: Vec<f64> = preds.iter().map(RunPrediction::error).collect();
    if errs.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numeric { layer: "errors".into() });
    }
    let (mut lo, mut hi) = errs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &e| (l.min(e), h.max(e)));
    if errs.is_empty() {
        (lo, hi) = (0.0, 0.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    edges[bins] = hi;
    let mut counts = vec![0; bins];
    let mid = 0.5 * (lo + hi);
    for e in errs {
        // Mirror the binning rule about the midpoint so that sign-symmetric
        // errors give a mirror-image histogram.
        let i = if e <= mid {
            ((e - lo) / width).floor() as usize
        } else {
            (bins - 1).saturating_sub(((hi - e) / width).floor() as usize)
        };
        counts[i.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Runs whose total error lies more than `threshold_sigma` population
/// standard deviations from the mean error.
pub fn outlier_scan(preds: &[RunPrediction], threshold_sigma: f64) -> Result<Vec<String>> {
    if preds.len() < 3 {
        return Err(Error::Domain("outlier scan needs at least three runs".into()));
    }
    let errs: Vec<f64> = preds.iter().map(RunPrediction::error).collect();
    let (mean, std) = mean_std(&errs);
    if threshold_sigma.is_infinite() || std == 0.0 {
        return Ok(Vec::new());
    }
    Ok(preds
        .iter()
        .zip(&errs)
        .filter(|(_, e)| (*e - mean).abs() > threshold_sigma * std)
        .map(|(p, _)| p.run_id.clone())
        .collect())
}

/// Metrics written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: String,
    pub accuracy: AccuracySummary,
    /// Mean smoothness of the scaled per-frame signal over runs with at
    /// least two frames.
    pub mean_smoothness: f64,
    pub mean_abs_error: f64,
    pub outliers: Vec<String>,
    pub histogram: Histogram,
    /// Per-frame R^2 against the hidden oracle, only when explicitly
    /// requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_r2: Option<f64>,
    /// Mean and std of per-seed mean accuracies, when several seeds were
    /// evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub across_seeds: Option<(f64, f64)>,
}

impl Report {
    pub fn build(split: &str, preds: &[RunPrediction], bins: usize, threshold_sigma: f64) -> Result<Self> {
        let accuracy = dataset_accuracy(preds)?;
        let smooth: Vec<f64> = preds
            .iter()
            .filter(|p| p.frame_scaled.len() >= 2)
            .map(|p| smoothness_metric(&p.frame_scaled))
            .collect::<Result<_>>()?;
        let outliers = if preds.len() >= 3 {
            outlier_scan(preds, threshold_sigma)?
        } else {
            Vec::new()
        };
        Ok(Self {
            split: split.to_string(),
            accuracy,
            mean_smoothness: mean_std(&smooth).0,
            mean_abs_error: preds.iter().map(|p| p.error().abs()).sum::<f64>() / preds.len() as f64,
            outliers,
            histogram: error_histogram(preds, bins)?,
            oracle_r2: None,
            across_seeds: None,
        })
    }

    /// Writes `report.json`, `errors.csv` and one `signal_<run>.csv` per run.
    pub fn write(&self, dir: &Path, preds: &[RunPrediction]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        let mut errors = String::from("run_id,true_total,predicted_total,error\n");
        for p in preds {
            errors.push_str(&format!("{},{},{},{}\n", p.run_id, p.true_total, p.predicted_total, p.error()));
        }
        write_file(&dir.join("errors.csv"), errors.as_bytes())?;
        write_file(&dir.join("histogram.csv"), self.histogram.to_csv().as_bytes())?;
        for p in preds {
            let mut s = String::from("frame_index,raw,scaled\n");
            for (i, (r, c)) in p.frame_raw.iter().zip(&p.frame_scaled).enumerate() {
                s.push_str(&format!("{i},{r},{c}\n"));
            }
            write_file(&dir.join(format!("signal_{}.csv", p.run_id)), s.as_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(id: &str, y: f64, y_hat: f64) -> RunPrediction {
        RunPrediction::new(id, vec![y_hat], vec![y_hat], y)
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(run_accuracy(100.0, 95.5).unwrap(), 95.5);
        assert_eq!(run_accuracy(7.0, 7.0).unwrap(), 100.0);
        assert_eq!(run_accuracy(100.0, 250.0).unwrap(), 0.0);
        assert!(run_accuracy(0.0, 1.0).is_err());
    }

    #[test]
    fn dataset_accuracy_examples() {
        let perfect = [pred("a", 3.0, 3.0), pred("b", 5.0, 5.0)];
        let s = dataset_accuracy(&perfect).unwrap();
        assert_eq!((s.mean, s.std), (100.0, 0.0));
        let s = dataset_accuracy(&[pred("a", 100.0, 90.0), pred("b", 100.0, 100.0)]).unwrap();
        assert_eq!((s.mean, s.std), (95.0, 5.0));
        let s = dataset_accuracy(&[pred("a", 100.0, 90.0), pred("e", 0.0, -0.25)]).unwrap();
        assert_eq!((s.mean, s.runs, s.empty_runs, s.empty_mae), (90.0, 1, 1, Some(0.25)));
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_metric(&[2.0; 5]).unwrap(), 0.0);
        assert_eq!(smoothness_metric(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 1.0);
        let a = 1.5;
        assert_eq!(smoothness_metric(&[a, -a, a, -a, a]).unwrap(), 4.0 * a * a);
        assert!(smoothness_metric(&[1.0]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let zero: Vec<_> = (0..6).map(|i| pred(&i.to_string(), 4.0, 4.0)).collect();
        let h = error_histogram(&zero, 5).unwrap();
        assert_eq!(h.counts, vec![0, 0, 6, 0, 0]);
        let sym = [pred("a", 10.0, 12.0), pred("b", 10.0, 8.0), pred("c", 10.0, 11.0), pred("d", 10.0, 9.0)];
        let h = error_histogram(&sym, 4).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        let h = error_histogram(&sym, 3).unwrap();
        let rev: Vec<_> = h.counts.iter().rev().copied().collect();
        assert_eq!(h.counts, rev);
        assert_eq!((h.edges[0], *h.edges.last().unwrap()), (-2.0, 2.0));
        assert!(error_histogram(&sym, 1).is_err());
    }

    #[test]
    fn outlier_examples() {
        let mut preds: Vec<_> = (0..30)
            .map(|i| pred(&format!("r{i}"), 10.0, 10.0 + if i % 2 == 0 { 0.1 } else { -0.1 }))
            .collect();
        assert!(outlier_scan(&preds, 3.0).unwrap().is_empty());
        assert!(outlier_scan(&preds, f64::INFINITY).unwrap().is_empty());
        // 10 sigma of the homogeneous errors
        preds.push(pred("bad", 10.0, 10.0 + 10.0 * 0.1 * 30f64.sqrt()));
        assert_eq!(outlier_scan(&preds, 3.0).unwrap(), vec!["bad".to_string()]);
    }

    proptest! {
        #[test]
        fn accuracy_is_permutation_invariant(ys in prop::collection::vec((0.5f64..50.0, 0.0f64..80.0), 1..20), seed in 0u64..1000) {
            let preds: Vec<_> = ys.iter().enumerate().map(|(i, (y, p))| pred(&i.to_string(), *y, *p)).collect();
            let mut shuffled = preds.clone();
            let k = preds.len();
            shuffled.rotate_left(seed as usize % k);
            shuffled.reverse();
            let a = dataset_accuracy(&preds).unwrap();
            let b = dataset_accuracy(&shuffled).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9);
        }

        #[test]
        fn histogram_counts_sum(errs in prop::collection::vec(-50f64..50.0, 1..40), bins in 2usize..12) {
            let preds: Vec<_> = errs.iter().enumerate().map(|(i, e)| pred(&i.to_string(), 100.0, 100.0 + e)).collect();
            let h = error_histogram(&preds, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), preds.len());
            prop_assert_eq!(h.edges.len(), bins + 1);
        }

        #[test]
        fn smoothness_zero_iff_constant(xs in prop::collection::vec(-5f64..5.0, 2..30)) {
            let constant = xs.windows(2).all(|w| w[0] == w[1]);
            prop_assert_eq!(smoothness_metric(&xs).unwrap() == 0.0, constant);
        }
    }
}
