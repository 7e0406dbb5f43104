//! Localization metrics over score maps and binary ground-truth masks.
//!
//! All metrics work at the native grid resolution. Multi-source predictions
//! carry no class labels, so class-aware scores are taken under the best
//! bijection between predicted maps and sounding ground truths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arrayfile;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::walk::{permutations, MAX_PERMUTATION_K};

/// Default binarization threshold on min-max normalized maps.
pub const DEFAULT_BINARIZE: f64 = 0.4;
pub const DEFAULT_AUC_STEP: f64 = 0.05;

/// Min-max normalization to `[0, 1]`; constant maps become all zeros.
pub fn normalize_map(map: &Array) -> Array {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Array::zeros(map.shape());
    }
    map.map(|v| (v - lo) / (hi - lo))
}

fn check_same_shape(map: &Array, mask: &Array) -> Result<()> {
    if map.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "map shape {:?} does not match mask shape {:?}",
            map.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn check_unit(name: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in [0, 1], got {t}")))
    }
}

/// IoU between `{map >= t}` and the mask. Two empty sets score 1.
pub fn iou_at(map: &Array, mask: &Array, t: f64) -> Result<f64> {
    check_same_shape(map, mask)?;
    check_unit("threshold", t)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&s, &m) in map.data().iter().zip(mask.data()) {
        let (p, g) = (s >= t, m > 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Area under the success-ratio curve `θ ↦ |{IoU ≥ θ}| / n` for
/// `θ = 0, step, …, 1`, integrated with the trapezoid rule.
pub fn auc_iou_with_step(ious: &[f64], step: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Dimension("AUC over no samples".into()));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Parameter(format!("AUC step must lie in (0, 1], got {step}")));
    }
    let steps = (1.0 / step).round() as usize;
    let n = ious.len() as f64;
    let success = |theta: f64| ious.iter().filter(|&&v| v >= theta - 1e-12).count() as f64 / n;
    let curve: Vec<f64> = (0..=steps).map(|i| success((i as f64 * step).min(1.0))).collect();
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
    Ok(area.min(1.0))
}

pub fn auc_iou(ious: &[f64]) -> Result<f64> {
    auc_iou_with_step(ious, DEFAULT_AUC_STEP)
}

/// All-points average precision of score-ranked pixels against a mask:
/// `Σ (R_i − R_{i−1}) P_i` over descending unique score thresholds.
pub fn pixel_ap(map: &Array, mask: &Array) -> Result<f64> {
    check_same_shape(map, mask)?;
    let positives = mask.data().iter().filter(|&&m| m > 0.5).count();
    if positives == 0 {
        return Err(Error::Domain("average precision needs a nonempty mask".into()));
    }
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map.data()[b].total_cmp(&map.data()[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = map.data()[order[i]];
        while i < order.len() && map.data()[order[i]] == score {
            if mask.data()[order[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Ground truth for one class in a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub mask: Array,
    /// Whether this class is audible.
    pub sounding: bool,
}

/// Predicted maps plus ground truths. For class-aligned metrics `maps[i]`
/// belongs to `truths[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub maps: Vec<Array>,
    pub truths: Vec<GroundTruth>,
}

impl EvalSample {
    fn check(&self) -> Result<()> {
        if self.maps.len() != self.truths.len() {
            return Err(Error::Dimension(format!(
                "{} maps for {} ground truths",
                self.maps.len(),
                self.truths.len()
            )));
        }
        if !self.truths.iter().any(|t| t.sounding) {
            return Err(Error::Domain("sample has no sounding class".into()));
        }
        for (m, t) in self.maps.iter().zip(&self.truths) {
            check_same_shape(m, &t.mask)?;
        }
        Ok(())
    }

    pub fn sounding_masks(&self) -> Vec<&Array> {
        self.truths.iter().filter(|t| t.sounding).map(|t| &t.mask).collect()
    }

    /// Arrays `map{i}`, `mask{i}`, `class_ids`, `sounding`.
    pub fn to_arrays(&self) -> Vec<(String, Array)> {
        let mut out = Vec::new();
        for (i, (m, t)) in self.maps.iter().zip(&self.truths).enumerate() {
            out.push((format!("map{i}"), m.clone()));
            out.push((format!("mask{i}"), t.mask.clone()));
        }
        out.push(("class_ids".into(), Array::vector(self.truths.iter().map(|t| t.class_id as f64).collect())));
        out.push(("sounding".into(), Array::vector(self.truths.iter().map(|t| f64::from(u8::from(t.sounding))).collect())));
        out
    }

    pub fn from_arrays(arrays: &[(String, Array)]) -> Result<Self> {
        let missing = |n: &str| Error::format("<arrays>", format!("missing array {n}"));
        let ids = arrayfile::find(arrays, "class_ids").ok_or_else(|| missing("class_ids"))?;
        let sounding = arrayfile::find(arrays, "sounding").ok_or_else(|| missing("sounding"))?;
        let mut maps = Vec::new();
        let mut truths = Vec::new();
        for i in 0..ids.len() {
            let map = arrayfile::find(arrays, &format!("map{i}")).ok_or_else(|| missing(&format!("map{i}")))?;
            let mask = arrayfile::find(arrays, &format!("mask{i}")).ok_or_else(|| missing(&format!("mask{i}")))?;
            maps.push(map.clone());
            truths.push(GroundTruth {
                class_id: ids.data()[i] as usize,
                mask: mask.clone(),
                sounding: sounding.data().get(i).copied().unwrap_or(0.0) != 0.0,
            });
        }
        Ok(EvalSample { maps, truths })
    }

    pub fn read(path: &Path) -> Result<Self> {
        EvalSample::from_arrays(&arrayfile::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        arrayfile::write(path, &self.to_arrays())
    }
}

/// Class-aware AP of one class-aligned sample: `Σ δ_k AP_k / Σ δ_k`.
pub fn cap_sample(sample: &EvalSample) -> Result<f64> {
    sample.check()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (map, t) in sample.maps.iter().zip(&sample.truths) {
        if t.sounding {
            num += pixel_ap(map, &t.mask)?;
            den += 1.0;
        }
    }
    Ok(num / den)
}

/// Mean class-aware AP over class-aligned samples.
pub fn cap(samples: &[EvalSample]) -> Result<f64> {
    mean_over(samples, cap_sample)
}

/// Class-aware IoU of one class-aligned sample: δ-weighted mean of the IoU
/// between each normalized map, binarized at `binarize`, and its mask.
pub fn class_iou_sample(sample: &EvalSample, binarize: f64) -> Result<f64> {
    sample.check()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (map, t) in sample.maps.iter().zip(&sample.truths) {
        if t.sounding {
            num += iou_at(&normalize_map(map), &t.mask, binarize)?;
            den += 1.0;
        }
    }
    Ok(num / den)
}

/// Fraction of class-aligned samples whose class-aware IoU is at least `t`.
pub fn ciou_at(samples: &[EvalSample], t: f64, binarize: f64) -> Result<f64> {
    check_unit("success threshold", t)?;
    if samples.is_empty() {
        return Err(Error::Dimension("CIoU over no samples".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        if class_iou_sample(s, binarize)? >= t {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Scores every bijection between `maps` and `masks` by the mean of
/// `metric(map, mask)` over pairs. Returns the best score and the winning
/// assignment, `pairing[i]` being the map assigned to `masks[i]`.
pub fn best_pairing_eval<F>(maps: &[Array], masks: &[&Array], metric: F) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&Array, &Array) -> Result<f64>,
{
    let k = maps.len();
    if k != masks.len() {
        return Err(Error::Dimension(format!("{k} maps for {} sounding masks", masks.len())));
    }
    if k == 0 {
        return Err(Error::Dimension("no maps to pair".into()));
    }
    if k > MAX_PERMUTATION_K {
        return Err(Error::Parameter(format!(
            "{k} maps exceed the pairing enumeration cap of {MAX_PERMUTATION_K}"
        )));
    }
    let mut table = vec![0.0; k * k];
    for (m, map) in maps.iter().enumerate() {
        for (t, mask) in masks.iter().enumerate() {
            table[m * k + t] = metric(map, mask)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k) {
        let score = perm.iter().enumerate().map(|(t, &m)| table[m * k + t]).sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    Ok(best.expect("k >= 1"))
}

/// Reorders an unlabeled sample's maps to the bijection that maximizes the
/// mean of `metric` over sounding classes. Silent classes are dropped.
pub fn align_best<F>(sample: &EvalSample, metric: F) -> Result<EvalSample>
where
    F: Fn(&Array, &Array) -> Result<f64>,
{
    let truths: Vec<GroundTruth> = sample.truths.iter().filter(|t| t.sounding).cloned().collect();
    let masks: Vec<&Array> = truths.iter().map(|t| &t.mask).collect();
    let (_, pairing) = best_pairing_eval(&sample.maps, &masks, metric)?;
    Ok(EvalSample {
        maps: pairing.iter().map(|&m| sample.maps[m].clone()).collect(),
        truths,
    })
}

/// AP of the mean predicted map against the union of sounding masks.
pub fn piap(maps: &[Array], masks: &[&Array]) -> Result<f64> {
    let first = maps.first().ok_or_else(|| Error::Dimension("PIAP over no maps".into()))?;
    let mask0 = masks.first().ok_or_else(|| Error::Domain("PIAP needs a sounding mask".into()))?;
    let mut mean = Array::zeros(first.shape());
    for m in maps {
        check_same_shape(m, first)?;
        mean.add_assign(m);
    }
    let mean = mean.map(|v| v / maps.len() as f64);
    let mut union = Array::zeros(mask0.shape());
    for m in masks {
        check_same_shape(m, mask0)?;
        for (u, &v) in union.data_mut().iter_mut().zip(m.data()) {
            if v > 0.5 {
                *u = 1.0;
            }
        }
    }
    if union.sum() == 0.0 {
        return Err(Error::Domain("PIAP needs a nonempty union of sounding masks".into()));
    }
    pixel_ap(&mean, &union)
}

fn mean_over<T>(items: &[T], f: impl Fn(&T) -> Result<f64>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Dimension("metric over no samples".into()));
    }
    let mut total = 0.0;
    for it in items {
        total += f(it)?;
    }
    Ok(total / items.len() as f64)
}

// ---- reports ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Binarization threshold applied to normalized maps.
    pub binarize: f64,
    /// Success threshold for multi-source class-aware IoU.
    pub ciou: f64,
    /// Success threshold for single-source IoU.
    pub iou: f64,
    pub auc_step: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { binarize: DEFAULT_BINARIZE, ciou: 0.3, iou: 0.5, auc_step: DEFAULT_AUC_STEP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<(String, f64)>,
    pub samples: usize,
    pub thresholds: Thresholds,
}

impl MetricReport {
    pub fn new(metrics: Vec<(String, f64)>, samples: usize, thresholds: Thresholds) -> Result<Self> {
        if let Some((name, v)) = metrics.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("metric {name} = {v} is outside [0, 1]")));
        }
        Ok(MetricReport { metrics, samples, thresholds })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// `metric,value` rows with a header; `.` decimal separator.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (n, v) in &self.metrics {
            out.push_str(&format!("{n},{v}\n"));
        }
        out
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}
