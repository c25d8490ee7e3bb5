//! Segmentation metrics and report aggregation.
//!
//! Thresholded metrics use `p >= 0.5`. A ratio whose denominator is zero is
//! reported as 1 (both maps agree that the class is absent).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::types::{MetricsReport, ProbabilityMap, VesselMask, VESSEL};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn same_size(a: &VesselMask, b: &VesselMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape((b.height(), b.width()), (a.height(), a.width())));
    }
    Ok(())
}

pub fn confusion(pred: &VesselMask, gt: &VesselMask) -> Result<ConfusionCounts> {
    same_size(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        match (p == VESSEL, g == VESSEL) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub dsc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    ScalarMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

/// Rank-based ROC AUC (Mann-Whitney U) with midranks for ties.
pub fn auc(probs: &ProbabilityMap, gt: &VesselMask) -> Result<f64> {
    if (probs.height(), probs.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape((gt.height(), gt.width()), (probs.height(), probs.width())));
    }
    let p = probs.probs();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut pos_rank_sum = 0.0;
    let mut n_pos = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the mean rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if gt.pixels()[k] == VESSEL {
                pos_rank_sum += midrank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = p.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassGroundTruth);
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &VesselMask) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let px = mask.pixels();
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut count = 0;
    for start in 0..h * w {
        if px[start] != VESSEL || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            let (y, x) = (k / w, k % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if px[q] == VESSEL && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    count
}

/// Predicted over ground-truth component count; 0 for an empty prediction.
pub fn vascular_connectivity(pred: &VesselMask, gt: &VesselMask) -> Result<f64> {
    same_size(pred, gt)?;
    let g = count_components(gt);
    if g == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(count_components(pred) as f64 / g as f64)
}

/// All metrics for one probability map.
pub fn metrics_for(probs: &ProbabilityMap, gt: &VesselMask) -> Result<MetricsReport> {
    let pred = probs.binarize(THRESHOLD);
    let s = scalar_metrics(&confusion(&pred, gt)?);
    Ok(MetricsReport {
        dsc: s.dsc,
        acc: s.acc,
        sen: s.sen,
        spe: s.spe,
        iou: s.iou,
        auc: auc(probs, gt)?,
        vc: vascular_connectivity(&pred, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence_id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub mean: MetricsReport,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Unweighted mean over sequences.
pub fn mean_report(items: &[SequenceMetrics]) -> MetricsReport {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&MetricsReport) -> f64| items.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
    MetricsReport {
        dsc: sum(|m| m.dsc),
        acc: sum(|m| m.acc),
        sen: sum(|m| m.sen),
        spe: sum(|m| m.spe),
        iou: sum(|m| m.iou),
        auc: sum(|m| m.auc),
        vc: sum(|m| m.vc),
    }
}

impl EvalReport {
    pub fn from_sequences(per_sequence: Vec<SequenceMetrics>, config_hash: &str, checkpoint_id: &str) -> Self {
        let mean = mean_report(&per_sequence);
        Self {
            per_sequence,
            mean,
            config_hash: config_hash.to_string(),
            checkpoint_id: checkpoint_id.to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence_id,dsc,acc,sen,spe,iou,auc,vc\n");
        let row = |out: &mut String, id: &str, m: &MetricsReport| {
            out.push_str(&format!(
                "{id},{},{},{},{},{},{},{}\n",
                m.dsc, m.acc, m.sen, m.spe, m.iou, m.auc, m.vc
            ));
        };
        for s in &self.per_sequence {
            row(&mut out, &s.sequence_id, &s.metrics);
        }
        row(&mut out, "mean", &self.mean);
        out
    }
}

/// Metrics for precomputed maps paired with ground truth.
pub fn evaluate_maps<'a>(
    pairs: impl IntoIterator<Item = (String, &'a ProbabilityMap, &'a VesselMask)>,
) -> Result<Vec<SequenceMetrics>> {
    pairs
        .into_iter()
        .map(|(id, p, g)| {
            Ok(SequenceMetrics {
                sequence_id: id,
                metrics: metrics_for(p, g)?,
            })
        })
        .collect()
}

/// Full-resolution tiled inference and metrics for every labeled example.
pub fn evaluate_model(model: &Model, examples: &[Example], tile: usize) -> Result<Vec<SequenceMetrics>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let gt = ex
            .label
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no label", ex.sequence.id())))?;
        let probs = model.predict(&ex.sequence, tile)?;
        out.push(SequenceMetrics {
            sequence_id: ex.sequence.id().to_string(),
            metrics: metrics_for(&probs, gt)?,
        });
    }
    Ok(out)
}

/// Mean DSC of a model over labeled examples.
pub fn mean_dsc(model: &Model, examples: &[Example], tile: usize) -> Result<f64> {
    Ok(mean_report(&evaluate_model(model, examples, tile)?).dsc)
}
