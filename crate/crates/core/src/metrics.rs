//! View-order ranking metrics and policy evaluation.
//!
//! Labels arrive in the order the simulated user viewed tiles, not in grid
//! order; both metrics are computed over that sequence.

use crate::env::{ClickRecord, EnvError, Environment};
use crate::page::{Configuration, PageInstance};
use crate::rng::SeededRng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("precision cutoff {cutoff} outside 1..={len}")]
    BadCutoff { cutoff: usize, len: usize },
    #[error("evaluation needs at least one page")]
    NoPages,
    #[error("rollout failed: {0}")]
    Rollout(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Discounted cumulative gain of graded labels in view order:
/// sum of (2^rel_i - 1)/log2(i+1) over 1-based positions.
fn dcg(labels: &[f64]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &rel)| (2f64.powf(rel) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Normalized DCG against the ideal (descending) ordering of the same
/// labels. All-zero labels score 0.
pub fn ndcg(labels: &[f64]) -> f64 {
    if labels.iter().all(|&l| l == 0.0) {
        return 0.0;
    }
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    dcg(labels) / dcg(&ideal)
}

/// Fraction of the first `cutoff` viewed positions that were clicked.
pub fn pre_at_k(labels: &[f64], cutoff: usize) -> Result<f64, MetricsError> {
    if cutoff == 0 || cutoff > labels.len() {
        return Err(MetricsError::BadCutoff {
            cutoff,
            len: labels.len(),
        });
    }
    Ok(labels[..cutoff].iter().sum::<f64>() / cutoff as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population variance over evaluation episodes.
    pub variance: f64,
}

impl MetricSummary {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

/// Aggregate greedy-evaluation report over a page set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub episodes: usize,
    pub ndcg: MetricSummary,
    pub precision: MetricSummary,
    /// Cutoff used for precision: min(10, k).
    pub precision_cutoff: usize,
    pub clicks: MetricSummary,
    pub reward: MetricSummary,
}

/// Run one episode per page: place via `rollout`, simulate clicks on a
/// per-episode rng stream derived from `seed`, and summarize NDCG,
/// Pre@min(10,k), click count, and environment reward.
pub fn evaluate_policy<F>(
    mut rollout: F,
    env: &Environment,
    pages: &[PageInstance],
    seed: u64,
) -> Result<EvaluationReport, MetricsError>
where
    F: FnMut(&PageInstance) -> Result<Configuration, String>,
{
    if pages.is_empty() {
        return Err(MetricsError::NoPages);
    }
    let cutoff = pages[0].k().min(10);
    let mut ndcgs = Vec::with_capacity(pages.len());
    let mut precisions = Vec::with_capacity(pages.len());
    let mut clicks = Vec::with_capacity(pages.len());
    let mut rewards = Vec::with_capacity(pages.len());
    for (episode, page) in pages.iter().enumerate() {
        let configuration = rollout(page).map_err(MetricsError::Rollout)?;
        let mut rng = SeededRng::derive(seed, "eval-episode", &[episode as u64]);
        let record: ClickRecord = env.simulate_clicks(page, &configuration, &mut rng)?;
        ndcgs.push(ndcg(&record.labels));
        precisions.push(pre_at_k(&record.labels, cutoff)?);
        clicks.push(record.labels.iter().sum::<f64>());
        rewards.push(record.reward);
    }
    Ok(EvaluationReport {
        episodes: pages.len(),
        ndcg: MetricSummary::from_samples(&ndcgs),
        precision: MetricSummary::from_samples(&precisions),
        precision_cutoff: cutoff,
        clicks: MetricSummary::from_samples(&clicks),
        reward: MetricSummary::from_samples(&rewards),
    })
}
