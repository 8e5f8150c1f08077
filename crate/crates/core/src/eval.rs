//! Saliency metrics: MAE, adaptive-threshold precision / recall / F-beta,
//! and precision-recall curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, SaliencyMap};

/// `beta^2`, weighting precision over recall.
pub const BETA_SQUARED: f64 = 0.3;

pub const DEFAULT_THRESHOLDS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FBetaForm {
    /// `(1 + b^2) P R / (b^2 P + R)`.
    #[default]
    Standard,
    /// `(1 + b^2) P R / (b P + R)`, with `b = sqrt(b^2)` in the denominator.
    PrintedDenominator,
}

fn check(s: &SaliencyMap, g: &BinaryMask) -> Result<()> {
    if s.height() != g.height() || s.width() != g.width() {
        return Err(Error::Shape(format!(
            "saliency {}x{} vs ground truth {}x{}",
            s.height(),
            s.width(),
            g.height(),
            g.width()
        )));
    }
    Ok(())
}

/// Mean absolute error between a saliency map and its mask.
pub fn mae(s: &SaliencyMap, g: &BinaryMask) -> Result<f64> {
    check(s, g)?;
    if s.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = s
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, &b)| (a - f64::from(b)).abs())
        .sum();
    Ok(total / s.len() as f64)
}

/// Twice the mean saliency. May exceed 1, in which case nothing is predicted.
pub fn adaptive_threshold(s: &SaliencyMap) -> f64 {
    2.0 * s.mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    /// `s > t`
    Above,
    /// `s >= t`
    AtLeast,
}

fn counts(s: &SaliencyMap, g: &BinaryMask, threshold: f64, cmp: Comparison) -> (usize, usize, usize) {
    let (mut pred, mut gt, mut hit) = (0, 0, 0);
    for (&v, &y) in s.values().iter().zip(g.values()) {
        let p = match cmp {
            Comparison::Above => v > threshold,
            Comparison::AtLeast => v >= threshold,
        };
        pred += usize::from(p);
        gt += usize::from(y == 1);
        hit += usize::from(p && y == 1);
    }
    (pred, gt, hit)
}

/// Precision and recall from raw counts.
///
/// Empty sets: nothing predicted and nothing salient gives `(1, 1)`;
/// nothing predicted against a non-empty mask gives `(0, 0)`; predictions
/// against an empty mask give precision 0 and (vacuous) recall 1.
pub fn precision_recall_from_counts(pred: usize, gt: usize, hit: usize) -> (f64, f64) {
    match (pred, gt) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (0.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => (hit as f64 / pred as f64, hit as f64 / gt as f64),
    }
}

/// Precision and recall of the region `{s > threshold}`.
pub fn precision_recall(s: &SaliencyMap, g: &BinaryMask, threshold: f64) -> Result<(f64, f64)> {
    check(s, g)?;
    let (pred, gt, hit) = counts(s, g, threshold, Comparison::Above);
    Ok(precision_recall_from_counts(pred, gt, hit))
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    f_beta_with(precision, recall, FBetaForm::Standard)
}

pub fn f_beta_with(precision: f64, recall: f64, form: FBetaForm) -> f64 {
    let weight = match form {
        FBetaForm::Standard => BETA_SQUARED,
        FBetaForm::PrintedDenominator => BETA_SQUARED.sqrt(),
    };
    let den = weight * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQUARED) * precision * recall / den
    }
}

/// Thresholds `k / (n - 1)` for `k = 0..n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Mean precision and recall over images at each of `n_thresholds` evenly
/// spaced thresholds in `[0, 1]`. A pixel is predicted salient when
/// `s >= threshold`, so threshold 0 selects every pixel.
pub fn pr_curve(predictions: &[SaliencyMap], gts: &[BinaryMask], n_thresholds: usize) -> Result<Vec<CurvePoint>> {
    if predictions.is_empty() || predictions.len() != gts.len() {
        return Err(Error::Data(format!(
            "pr curve needs equal, non-empty lists (got {} maps, {} masks)",
            predictions.len(),
            gts.len()
        )));
    }
    for (s, g) in predictions.iter().zip(gts) {
        check(s, g)?;
    }
    let ts = thresholds(n_thresholds);
    let m = predictions.len() as f64;
    Ok(ts
        .into_iter()
        .map(|t| {
            let (mut ps, mut rs) = (0.0, 0.0);
            for (s, g) in predictions.iter().zip(gts) {
                let (pred, gt, hit) = counts(s, g, t, Comparison::AtLeast);
                let (p, r) = precision_recall_from_counts(pred, gt, hit);
                ps += p;
                rs += r;
            }
            CurvePoint {
                threshold: t,
                precision: ps / m,
                recall: rs / m,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub mae: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of per-image MAE.
    pub mae: f64,
    /// Mean adaptive-threshold precision over images.
    pub precision: f64,
    /// Mean adaptive-threshold recall over images.
    pub recall: f64,
    /// F-beta of the mean precision and mean recall.
    pub f_beta: f64,
    pub pr_curve: Vec<CurvePoint>,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    /// Curve as CSV: `threshold,precision,recall`, one row per threshold.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        out
    }
}

/// Scores a set of predictions. `names` labels the per-image rows.
pub fn evaluate(
    names: &[String],
    predictions: &[SaliencyMap],
    gts: &[BinaryMask],
    n_thresholds: usize,
    form: FBetaForm,
) -> Result<EvalReport> {
    if names.len() != predictions.len() {
        return Err(Error::Data("one name per prediction required".into()));
    }
    let pr_curve = pr_curve(predictions, gts, n_thresholds)?;
    let mut per_image = Vec::with_capacity(predictions.len());
    for ((name, s), g) in names.iter().zip(predictions).zip(gts) {
        let t = adaptive_threshold(s);
        let (p, r) = precision_recall(s, g, t)?;
        per_image.push(ImageScore {
            name: name.clone(),
            mae: mae(s, g)?,
            threshold: t,
            precision: p,
            recall: r,
            f_beta: f_beta_with(p, r, form),
        });
    }
    let m = per_image.len() as f64;
    let precision = per_image.iter().map(|s| s.precision).sum::<f64>() / m;
    let recall = per_image.iter().map(|s| s.recall).sum::<f64>() / m;
    Ok(EvalReport {
        mae: per_image.iter().map(|s| s.mae).sum::<f64>() / m,
        precision,
        recall,
        f_beta: f_beta_with(precision, recall, form),
        pr_curve,
        per_image,
    })
}

/// Mean F-beta and MAE without the curve; the cheap path for sweeps.
pub fn summary(predictions: &[SaliencyMap], gts: &[BinaryMask]) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != gts.len() {
        return Err(Error::Data("summary needs equal, non-empty lists".into()));
    }
    let (mut ps, mut rs, mut maes) = (0.0, 0.0, 0.0);
    for (s, g) in predictions.iter().zip(gts) {
        let (p, r) = precision_recall(s, g, adaptive_threshold(s))?;
        ps += p;
        rs += r;
        maes += mae(s, g)?;
    }
    let m = predictions.len() as f64;
    Ok((f_beta(ps / m, rs / m), maes / m))
}
