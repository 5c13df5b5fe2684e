//! Sequence-level metrics with anomalous (label 1) as the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detect::Verdict;
use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::pipeline::{FeatureMode, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    /// 0 with `precision_undefined` set when nothing was flagged.
    pub precision: f64,
    /// 0 with `recall_undefined` set when there are no anomalous sequences.
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    /// Sequences without a score; excluded from every rate.
    pub unscorable: usize,
}

pub fn metrics(verdicts: &[Verdict]) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::default();
    let mut unscorable = 0;
    for v in verdicts {
        let label = v
            .true_label
            .ok_or_else(|| Error::invalid(format!("verdict {} has no true label", v.sequence_id)))?;
        if v.is_unscorable() {
            unscorable += 1;
            continue;
        }
        match (label, v.flagged) {
            (Label::Anomalous, true) => cm.tp += 1,
            (Label::Normal, true) => cm.fp += 1,
            (Label::Normal, false) => cm.tn += 1,
            (Label::Anomalous, false) => cm.fn_ += 1,
        }
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("no scorable verdicts"));
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    Ok(Metrics {
        confusion: cm,
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        precision_undefined,
        recall_undefined,
        unscorable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub dataset: String,
    pub window_size: usize,
    pub stride: usize,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    pub metrics: Metrics,
    pub threshold: f64,
    pub fpr_tolerance: f64,
    /// Thresholds recalibrated with each fold of the training scores held out.
    pub fold_thresholds: Vec<f64>,
    pub verdicts: Vec<Verdict>,
    /// Mean aggregated score of scorable normal / anomalous test sequences.
    pub mean_score_normal: f64,
    pub mean_score_anomalous: f64,
}

/// One line-delimited record; field order is fixed by declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub model: ModelKind,
    pub dataset: String,
    pub window_size: usize,
    pub stride: usize,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unscorable: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub threshold: f64,
    pub fpr_tolerance: f64,
    pub fold_threshold_min: f64,
    pub fold_threshold_max: f64,
    pub mean_score_normal: f64,
    pub mean_score_anomalous: f64,
}

impl EvalReport {
    pub fn record(&self) -> ReportRecord {
        let m = &self.metrics;
        let fmin = self.fold_thresholds.iter().copied().fold(f64::NAN, f64::min);
        let fmax = self.fold_thresholds.iter().copied().fold(f64::NAN, f64::max);
        ReportRecord {
            model: self.model,
            dataset: self.dataset.clone(),
            window_size: self.window_size,
            stride: self.stride,
            feature_mode: self.feature_mode,
            seed: self.seed,
            tp: m.confusion.tp,
            fp: m.confusion.fp,
            tn: m.confusion.tn,
            fn_: m.confusion.fn_,
            unscorable: m.unscorable,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            precision_undefined: m.precision_undefined,
            recall_undefined: m.recall_undefined,
            threshold: self.threshold,
            fpr_tolerance: self.fpr_tolerance,
            fold_threshold_min: fmin,
            fold_threshold_max: fmax,
            mean_score_normal: self.mean_score_normal,
            mean_score_anomalous: self.mean_score_anomalous,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.record()).expect("report record serializes")
    }

    pub fn verdict_csv(&self) -> String {
        verdict_csv(&self.verdicts)
    }
}

/// Per-sequence verdict table as CSV.
pub fn verdict_csv(verdicts: &[Verdict]) -> String {
    let mut out = String::from("sequence_id,score,flagged,true_label\n");
    for v in verdicts {
        let score = v.score.map(|s| format!("{s:?}")).unwrap_or_else(|| "unscorable".into());
        let label = v.true_label.map(|l| l.as_u8().to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", v.sequence_id, score, v.flagged as u8, label);
    }
    out
}

/// Mean and half-range of accuracy/precision/recall over several seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy_spread: f64,
    pub precision_spread: f64,
    pub recall_spread: f64,
}

pub fn summarize(reports: &[EvalReport]) -> Option<SeedSummary> {
    if reports.is_empty() {
        return None;
    }
    let stat = |f: &dyn Fn(&EvalReport) -> f64| {
        let vals: Vec<f64> = reports.iter().map(f).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, (hi - lo) / 2.0)
    };
    let (accuracy, accuracy_spread) = stat(&|r| r.metrics.accuracy);
    let (precision, precision_spread) = stat(&|r| r.metrics.precision);
    let (recall, recall_spread) = stat(&|r| r.metrics.recall);
    Some(SeedSummary {
        runs: reports.len(),
        accuracy,
        precision,
        recall,
        accuracy_spread,
        precision_spread,
        recall_spread,
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Human-readable table: one row per report plus a mean row.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<14} {:>7} {:>5} {:>6} {:>9} {:>9} {:>9} {:>4} {:>4} {:>4} {:>4}",
        "Model", "Dataset", "Window", "Mode", "Seed", "Accuracy", "Precision", "Recall", "TP", "FP", "TN", "FN"
    );
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<6} {:<14} {:>7} {:>5} {:>6} {:>9} {:>9} {:>9} {:>4} {:>4} {:>4} {:>4}",
            r.model.as_str().to_uppercase(),
            r.dataset,
            r.window_size,
            r.feature_mode.as_str(),
            r.seed,
            pct(m.accuracy),
            if m.precision_undefined { "n/a".into() } else { pct(m.precision) },
            if m.recall_undefined { "n/a".into() } else { pct(m.recall) },
            m.confusion.tp,
            m.confusion.fp,
            m.confusion.tn,
            m.confusion.fn_
        );
    }
    if let Some(s) = summarize(reports).filter(|s| s.runs > 1) {
        let _ = writeln!(
            out,
            "{:<6} {:<14} {:>7} {:>5} {:>6} {:>9} {:>9} {:>9}",
            "mean",
            "",
            "",
            "",
            s.runs,
            pct(s.accuracy),
            pct(s.precision),
            pct(s.recall)
        );
    }
    out
}
