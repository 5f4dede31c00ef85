//! Segmentation and diagnosis metrics plus the inference-timing benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{pta, region_areas, PtaResult, SegMask, EXTERNAL_LAYER, INTERNAL_CAVITY, TRABECULAE};
use crate::tensor::Tensor;
use crate::unet::UNetParams;

/// Dice coefficient for one label: 2|P ∩ G| / (|P| + |G|). A region absent
/// from both masks scores 1.
pub fn dice(pred: &SegMask, gt: &SegMask, label: u8) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::dimension(format!(
            "dice: masks {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        let pp = *p == label;
        let gg = *g == label;
        if pp && gg {
            inter += 1;
        }
        total += pp as usize + gg as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Absolute PTA difference in percentage points.
pub fn pta_error(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    let p = pta(&region_areas(pred))?;
    let g = pta(&region_areas(gt))?;
    Ok((p.pta - g.pta).abs())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        MeanStd {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub matthews: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Slice-level diagnosis confusion and the derived metrics. Matthews is 0
/// by convention when any marginal of the confusion is empty.
pub fn diagnosis_metrics(predictions: &[PtaResult], truths: &[PtaResult]) -> Result<DiagnosisMetrics> {
    if predictions.len() != truths.len() {
        return Err(Error::contract("prediction/truth length mismatch"));
    }
    if predictions.is_empty() {
        return Err(Error::contract("diagnosis_metrics: empty input"));
    }
    let mut c = Confusion::default();
    for (p, t) in predictions.iter().zip(truths) {
        match (p.positive, t.positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let n = predictions.len() as f64;
    let (tp, fp, tn, fnn) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let accuracy = (tp + tn) / n;
    let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let specificity = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
    let denom = (tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn);
    let matthews = if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fnn) / denom.sqrt()
    };
    Ok(DiagnosisMetrics {
        confusion: c,
        accuracy,
        matthews,
        recall,
        specificity,
    })
}

/// Aggregated evaluation over a set of (prediction, ground truth) mask pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slice_count: usize,
    pub dice_external_layer: MeanStd,
    pub dice_internal_cavity: MeanStd,
    pub dice_trabeculae: MeanStd,
    pub pta_error: MeanStd,
    /// Slices excluded from the PTA statistics because PTA was undefined.
    pub pta_excluded: usize,
    pub diagnosis: DiagnosisMetrics,
}

pub fn evaluate_pairs(pairs: &[(SegMask, SegMask)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluate_pairs: empty input"));
    }
    let mut dice_el = Vec::new();
    let mut dice_ic = Vec::new();
    let mut dice_t = Vec::new();
    let mut pta_errors = Vec::new();
    let mut pta_excluded = 0usize;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (pred, gt) in pairs {
        dice_el.push(dice(pred, gt, EXTERNAL_LAYER)?);
        dice_ic.push(dice(pred, gt, INTERNAL_CAVITY)?);
        dice_t.push(dice(pred, gt, TRABECULAE)?);
        match (pta(&region_areas(pred)), pta(&region_areas(gt))) {
            (Ok(p), Ok(g)) => {
                pta_errors.push((p.pta - g.pta).abs());
                preds.push(p);
                truths.push(g);
            }
            _ => pta_excluded += 1,
        }
    }
    let diagnosis = if preds.is_empty() {
        DiagnosisMetrics::default()
    } else {
        diagnosis_metrics(&preds, &truths)?
    };
    Ok(MetricsReport {
        slice_count: pairs.len(),
        dice_external_layer: MeanStd::from_values(&dice_el),
        dice_internal_cavity: MeanStd::from_values(&dice_ic),
        dice_trabeculae: MeanStd::from_values(&dice_t),
        pta_error: MeanStd::from_values(&pta_errors),
        pta_excluded,
        diagnosis,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// Wall-clock duration of every timed run, milliseconds.
    pub durations_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub batch_size: usize,
    pub threads: usize,
}

pub const DEFAULT_WARMUP_RUNS: usize = 5;
pub const DEFAULT_TIMED_RUNS: usize = 100;

/// Timing protocol: `warmup` untimed runs, then `runs` timed runs of the
/// full predict path. Every timed run's output is checked identical to the
/// warm-up output; a mismatch is a determinism failure.
pub fn benchmark_inference(
    params: &UNetParams,
    batch: &Tensor,
    runs: usize,
    warmup: usize,
) -> Result<TimingReport> {
    let reference = params.predict(batch)?;
    for _ in 1..warmup {
        let out = params.predict(batch)?;
        if out != reference {
            return Err(Error::contract("non-deterministic inference during warm-up"));
        }
    }
    let mut durations = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = params.predict(batch)?;
        durations.push(start.elapsed().as_secs_f64() * 1e3);
        if out != reference {
            return Err(Error::contract("non-deterministic inference during timed runs"));
        }
    }
    let stats = MeanStd::from_values(&durations);
    Ok(TimingReport {
        warmup_runs: warmup,
        timed_runs: runs,
        durations_ms: durations,
        mean_ms: stats.mean,
        std_ms: stats.std,
        batch_size: batch.shape()[0],
        threads: rayon::current_num_threads(),
    })
}

fn fmt_mean_std(m: &MeanStd) -> String {
    if m.n == 0 {
        "n=0".to_string()
    } else {
        format!("{:.4} ({:.4})", m.mean, m.std)
    }
}

/// Text rendering of a metrics report, mean (std) per row.
pub fn render_metrics(report: &MetricsReport) -> String {
    let d = &report.diagnosis;
    format!(
        "Segmentation metrics over {} slices (mean (std)):\n\
         \x20 Dice EL        {}\n\
         \x20 Dice IC        {}\n\
         \x20 Dice T         {}\n\
         \x20 PTA error (pp) {}{}\n\
         Diagnosis (threshold PTA >= 27.4%):\n\
         \x20 confusion      TP={} FP={} TN={} FN={}\n\
         \x20 accuracy       {:.4}\n\
         \x20 matthews       {:.4}\n\
         \x20 recall         {:.4}\n\
         \x20 specificity    {:.4}\n",
        report.slice_count,
        fmt_mean_std(&report.dice_external_layer),
        fmt_mean_std(&report.dice_internal_cavity),
        fmt_mean_std(&report.dice_trabeculae),
        fmt_mean_std(&report.pta_error),
        if report.pta_excluded > 0 {
            format!("  [{} slices excluded: undefined PTA]", report.pta_excluded)
        } else {
            String::new()
        },
        d.confusion.tp,
        d.confusion.fp,
        d.confusion.tn,
        d.confusion.fn_,
        d.accuracy,
        d.matthews,
        d.recall,
        d.specificity,
    )
}

pub fn render_timing(report: &TimingReport) -> String {
    format!(
        "Inference time: {:.2} ms ({:.2}) per batch of {} [{} timed runs, {} warm-up, {} thread(s)]\n\
         \x20 per slice: {:.2} ms\n",
        report.mean_ms,
        report.std_ms,
        report.batch_size,
        report.timed_runs,
        report.warmup_runs,
        report.threads,
        report.mean_ms / report.batch_size.max(1) as f64,
    )
}
