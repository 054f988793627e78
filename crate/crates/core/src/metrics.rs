//! Per-step training diagnostics and their CSV serialization.
//!
//! The metrics CSV schema is fixed:
//! `step,objective,tau,beta,k,loss_total,loss_pos,loss_guidance,grad_norm,entropy,intervention_ratio,exact_rkl`
//! with `loss_pos` the policy-gradient branch, `loss_guidance` the
//! divergence-guidance branch (the SeqKD NLL lands here), and
//! `intervention_ratio` left empty for SeqKD, where masking does not apply.
//! Advantage histograms go to a sidecar CSV as `step,bucket_low,bucket_high,count`
//! rows, written once per eval interval plus the final step.

use std::io::Write;

use crate::error::Result;

/// Inner histogram range in nats; values beyond fall into open-ended
/// underflow and overflow buckets.
const HIST_MIN: f64 = -10.0;
const HIST_MAX: f64 = 10.0;
const HIST_INNER: usize = 40;

/// Bucketed advantage counts over fixed bin edges, so counts from different
/// steps and runs are directly comparable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdvantageHistogram {
    counts: Vec<u64>,
}

impl Default for AdvantageHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl AdvantageHistogram {
    pub fn new() -> Self {
        Self {
            counts: vec![0; HIST_INNER + 2],
        }
    }

    pub fn record(&mut self, advantage: f64) {
        let bucket = if advantage < HIST_MIN {
            0
        } else if advantage >= HIST_MAX {
            HIST_INNER + 1
        } else {
            1 + ((advantage - HIST_MIN) / (HIST_MAX - HIST_MIN) * HIST_INNER as f64) as usize
        };
        self.counts[bucket.min(HIST_INNER + 1)] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin edges of bucket `i`; the outermost buckets are open-ended.
    pub fn bucket_bounds(&self, i: usize) -> (f64, f64) {
        let width = (HIST_MAX - HIST_MIN) / HIST_INNER as f64;
        if i == 0 {
            (f64::NEG_INFINITY, HIST_MIN)
        } else if i == HIST_INNER + 1 {
            (HIST_MAX, f64::INFINITY)
        } else {
            let low = HIST_MIN + (i - 1) as f64 * width;
            (low, low + width)
        }
    }
}

/// One training step's diagnostics.
///
/// Loss and gradient fields describe the batch drawn from the pre-update
/// policy snapshot; `exact_rkl` is measured after the step's update so the
/// final row reflects the final policy. `mean_entropy` averages the student
/// entropy over the distinct contexts visited by the batch, again on the
/// pre-update snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_pos: f64,
    pub loss_guidance: f64,
    pub grad_norm: f64,
    /// L2 norm of the guidance branch alone; bounded by sqrt(2 * visited).
    pub guidance_grad_norm: f64,
    pub visited_contexts: usize,
    pub mean_entropy: f64,
    /// Fraction of batch tokens with the mask set; `None` for SeqKD.
    pub intervention_ratio: Option<f64>,
    /// Exact reverse KL to the teacher, student-stationary weighting.
    pub exact_rkl: f64,
    pub advantage_histogram: AdvantageHistogram,
    /// Tokens whose advantage hit the diagnostic floor this step.
    pub floored_tokens: usize,
}

/// Constant per-run columns of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub objective: String,
    pub tau: f64,
    pub beta: f64,
    pub k: usize,
}

pub const METRICS_HEADER: &str =
    "step,objective,tau,beta,k,loss_total,loss_pos,loss_guidance,grad_norm,entropy,intervention_ratio,exact_rkl";

/// Writes the per-step metrics CSV. Output is byte-deterministic for a
/// given metrics stream.
pub fn write_metrics_csv<W: Write>(
    w: &mut W,
    label: &RunLabel,
    metrics: &[RunMetrics],
) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        let ratio = m
            .intervention_ratio
            .map(|r| r.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            label.objective,
            label.tau,
            label.beta,
            label.k,
            m.loss_total,
            m.loss_pos,
            m.loss_guidance,
            m.grad_norm,
            m.mean_entropy,
            ratio,
            m.exact_rkl
        )?;
    }
    Ok(())
}

pub const HIST_HEADER: &str = "step,bucket_low,bucket_high,count";

/// Writes advantage histograms for every eval-interval step and the final
/// step. Empty buckets are skipped.
pub fn write_advantage_hist_csv<W: Write>(
    w: &mut W,
    metrics: &[RunMetrics],
    eval_interval: usize,
) -> Result<()> {
    writeln!(w, "{HIST_HEADER}")?;
    let interval = eval_interval.max(1);
    let last = metrics.len().saturating_sub(1);
    for (i, m) in metrics.iter().enumerate() {
        if i % interval != 0 && i != last {
            continue;
        }
        for (bucket, &count) in m.advantage_histogram.counts().iter().enumerate() {
            if count == 0 {
                continue;
            }
            let (low, high) = m.advantage_histogram.bucket_bounds(bucket);
            writeln!(w, "{},{},{},{}", m.step, low, high, count)?;
        }
    }
    Ok(())
}
