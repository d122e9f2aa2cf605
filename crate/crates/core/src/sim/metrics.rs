use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::WindowStats;
use crate::trace::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("predictions and labels differ in length: {preds} vs {labels}")]
    Length { preds: usize, labels: usize },
    #[error("no samples")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassId,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Labelled instances of the class.
    pub support: u64,
    pub predicted: u64,
}

/// Per-class precision, recall and F1 over classes `0..num_classes`.
pub fn per_class_metrics(preds: &[ClassId], labels: &[ClassId], num_classes: usize) -> Result<Vec<ClassMetrics>, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::Length { preds: preds.len(), labels: labels.len() });
    }
    let mut tp = vec![0u64; num_classes];
    let mut predicted = vec![0u64; num_classes];
    let mut support = vec![0u64; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if (p as usize) < num_classes {
            predicted[p as usize] += 1;
        }
        if (l as usize) < num_classes {
            support[l as usize] += 1;
        }
        if p == l && (p as usize) < num_classes {
            tp[p as usize] += 1;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..num_classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { class: c as ClassId, precision, recall, f1, support: support[c], predicted: predicted[c] }
        })
        .collect())
}

/// Unweighted mean F1 over classes that occur as a label or a prediction.
pub fn compute_macro_f1(preds: &[ClassId], labels: &[ClassId], num_classes: usize) -> Result<f64, MetricsError> {
    if preds.is_empty() && labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per = per_class_metrics(preds, labels, num_classes)?;
    let present: Vec<_> = per.iter().filter(|m| m.support > 0 || m.predicted > 0).collect();
    if present.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(present.iter().map(|m| m.f1).sum::<f64>() / present.len() as f64)
}

/// Most frequent class; ties go to the lowest class. `None` for no votes.
pub fn majority(votes: &[ClassId]) -> Option<ClassId> {
    let max = *votes.iter().max()? as usize;
    let mut counts = vec![0u64; max + 1];
    for &v in votes {
        counts[v as usize] += 1;
    }
    // position() of the max count picks the lowest class on ties
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best).map(|c| c as ClassId)
}

/// Majority vote of each flow's packet predictions.
pub fn flow_majority_vote(per_flow: &[Vec<ClassId>]) -> Vec<Option<ClassId>> {
    per_flow.iter().map(|v| majority(v)).collect()
}

/// Timing of one request from grant to result application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub grant_ns: u64,
    pub engine_arrive_ns: u64,
    pub start_ns: u64,
    pub done_ns: u64,
    pub return_ns: u64,
}

impl RoundTrip {
    pub fn transmission_ns(&self) -> u64 {
        self.engine_arrive_ns - self.grant_ns
    }

    pub fn queueing_ns(&self) -> u64 {
        self.start_ns - self.engine_arrive_ns
    }

    pub fn inference_ns(&self) -> u64 {
        self.done_ns - self.start_ns
    }

    pub fn return_ns(&self) -> u64 {
        self.return_ns - self.done_ns
    }

    pub fn total_ns(&self) -> u64 {
        self.return_ns - self.grant_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub phase: String,
    pub count: u64,
    pub mean_ns: f64,
    pub p99_ns: u64,
}

fn phase_stats(phase: &str, mut v: Vec<u64>) -> PhaseStats {
    v.sort_unstable();
    let n = v.len();
    let mean_ns = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    // nearest rank
    let rank = (0.99 * n as f64).ceil() as usize;
    PhaseStats { phase: phase.to_string(), count: n as u64, mean_ns, p99_ns: v[rank.max(1) - 1] }
}

/// Mean and p99 of each latency phase; empty when there are no samples.
pub fn latency_breakdown(samples: &[RoundTrip]) -> Vec<PhaseStats> {
    if samples.is_empty() {
        return Vec::new();
    }
    let col = |f: fn(&RoundTrip) -> u64| samples.iter().map(f).collect::<Vec<_>>();
    vec![
        phase_stats("transmission", col(RoundTrip::transmission_ns)),
        phase_stats("queueing", col(RoundTrip::queueing_ns)),
        phase_stats("inference", col(RoundTrip::inference_ns)),
        phase_stats("return", col(RoundTrip::return_ns)),
        phase_stats("total", col(RoundTrip::total_ns)),
    ]
}

/// Grant history of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGrants {
    pub five_tuple: String,
    pub label: Option<ClassId>,
    pub predicted: Option<ClassId>,
    pub packets: u64,
    pub first_ts_ns: u64,
    pub last_ts_ns: u64,
    pub grants: u64,
    pub first_grant_ns: Option<u64>,
    pub last_grant_ns: Option<u64>,
    /// Mean spacing of consecutive grants, when there are at least two.
    pub mean_grant_interval_ns: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionCounts {
    /// Packets classified from a stored inference result.
    pub stored: u64,
    /// Packets classified by the fallback tree.
    pub fallback: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub packets: u64,
    pub flows: u64,
    pub duration_ns: u64,
    pub token_rate: f64,
    pub grants: u64,
    /// Grants per packet.
    pub grant_fraction: f64,
    /// Grants per second of trace time.
    pub grant_rate: f64,
    pub drops: u64,
    pub responses: u64,
    pub in_flight_at_end: u64,
    /// Results that arrived after their flow lost its table slot.
    pub stale_results: u64,
    pub table_collisions: u64,
    pub decisions: DecisionCounts,
    pub classes: Vec<ClassMetrics>,
    pub packet_macro_f1: Option<f64>,
    pub flow_macro_f1: Option<f64>,
    pub latency: Vec<PhaseStats>,
    pub windows: Vec<WindowStats>,
    pub flow_grants: Vec<FlowGrants>,
}

impl Metrics {
    /// Mean grants per flow.
    pub fn mean_grants_per_flow(&self) -> f64 {
        if self.flows == 0 {
            0.0
        } else {
            self.grants as f64 / self.flows as f64
        }
    }

    pub fn latency_phase(&self, phase: &str) -> Option<&PhaseStats> {
        self.latency.iter().find(|p| p.phase == phase)
    }

    pub fn write_class_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "class,precision,recall,f1,support,predicted")?;
        for c in &self.classes {
            writeln!(w, "{},{},{},{},{},{}", c.class, c.precision, c.recall, c.f1, c.support, c.predicted)?;
        }
        Ok(())
    }

    pub fn write_latency_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "phase,count,mean_ns,p99_ns")?;
        for p in &self.latency {
            writeln!(w, "{},{},{},{}", p.phase, p.count, p.mean_ns, p.p99_ns)?;
        }
        Ok(())
    }
}
