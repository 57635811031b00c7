//! Localization metrics: exact accuracy, the seeded random baseline,
//! near-miss window rates, and normalized signed distances.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ErrorType, StudentAttempt};
use crate::prompting::{ParseStatus, PromptSetting};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions to score")]
    NoPredictions,
    #[error("prediction references unknown attempt {0}")]
    UnknownAttempt(String),
    #[error("window size must be at least 1")]
    BadWindow,
    #[error("distance histogram needs an odd bin count >= 3, got {0}")]
    BadBinCount(usize),
    #[error("random baseline needs at least one run")]
    NoRuns,
}

/// One model prediction for one attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub attempt_id: String,
    pub model_id: String,
    pub setting: PromptSetting,
    pub predicted_step: Option<usize>,
    pub parse_status: ParseStatus,
    pub raw_output: String,
}

fn attempt_map(attempts: &[StudentAttempt]) -> BTreeMap<&str, &StudentAttempt> {
    attempts.iter().map(|a| (a.id.as_str(), a)).collect()
}

fn lookup<'a>(
    map: &BTreeMap<&str, &'a StudentAttempt>,
    id: &str,
) -> Result<&'a StudentAttempt, MetricsError> {
    map.get(id).copied().ok_or_else(|| MetricsError::UnknownAttempt(id.to_string()))
}

/// Percentage of predictions that hit the annotated first error step exactly.
/// Unparsed predictions count as misses.
pub fn exact_accuracy(
    predictions: &[Prediction],
    attempts: &[StudentAttempt],
) -> Result<f64, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::NoPredictions);
    }
    let map = attempt_map(attempts);
    let mut correct = 0usize;
    for prediction in predictions {
        let attempt = lookup(&map, &prediction.attempt_id)?;
        if prediction.predicted_step == Some(attempt.first_error_index) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// Share of predictions that miss; by definition 100 - exact_accuracy, so the
/// two always sum to exactly 100.
pub fn incorrect_share(
    predictions: &[Prediction],
    attempts: &[StudentAttempt],
) -> Result<f64, MetricsError> {
    Ok(100.0 - exact_accuracy(predictions, attempts)?)
}

/// Uniform-random predictions for one baseline run. Run r draws every attempt's
/// step from a ChaCha stream seeded with root_seed + r, in attempt order.
pub fn random_baseline_predictions(
    attempts: &[StudentAttempt],
    root_seed: u64,
    run: u64,
) -> Vec<Prediction> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(root_seed.wrapping_add(run));
    attempts
        .iter()
        .map(|attempt| Prediction {
            attempt_id: attempt.id.clone(),
            model_id: "random".into(),
            setting: PromptSetting::RandomBaseline,
            predicted_step: Some(rng.gen_range(1..=attempt.steps.len())),
            parse_status: ParseStatus::Ok,
            raw_output: String::new(),
        })
        .collect()
}

/// Mean exact accuracy of the uniform-random baseline over n_runs seeded runs.
pub fn random_baseline(
    attempts: &[StudentAttempt],
    n_runs: u64,
    root_seed: u64,
) -> Result<f64, MetricsError> {
    if n_runs == 0 {
        return Err(MetricsError::NoRuns);
    }
    if attempts.is_empty() {
        return Err(MetricsError::NoPredictions);
    }
    let mut total = 0.0;
    for run in 0..n_runs {
        let predictions = random_baseline_predictions(attempts, root_seed, run);
        total += exact_accuracy(&predictions, attempts)?;
    }
    Ok(total / n_runs as f64)
}

/// Share of incorrect predictions that land within k steps of the true error.
/// Returns None when every prediction is exactly right (no incorrect pool).
/// Unparsed predictions are in the pool but inside no window.
pub fn window_rate(
    predictions: &[Prediction],
    attempts: &[StudentAttempt],
    k: usize,
) -> Result<Option<f64>, MetricsError> {
    if k < 1 {
        return Err(MetricsError::BadWindow);
    }
    if predictions.is_empty() {
        return Err(MetricsError::NoPredictions);
    }
    let map = attempt_map(attempts);
    let mut incorrect = 0usize;
    let mut within = 0usize;
    for prediction in predictions {
        let attempt = lookup(&map, &prediction.attempt_id)?;
        if prediction.predicted_step == Some(attempt.first_error_index) {
            continue;
        }
        incorrect += 1;
        if let Some(step) = prediction.predicted_step {
            let delta = step as i64 - attempt.first_error_index as i64;
            if delta.unsigned_abs() as usize <= k {
                within += 1;
            }
        }
    }
    if incorrect == 0 {
        return Ok(None);
    }
    Ok(Some(100.0 * within as f64 / incorrect as f64))
}

/// One signed localization distance, normalized by the attempt's step count.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceRecord {
    pub attempt_id: String,
    pub signed_step_delta: i64,
    /// (predicted - actual) / step_count; always strictly inside (-1, 1).
    pub normalized_distance: f64,
    pub error_type: Option<ErrorType>,
}

/// Distance for one prediction; None when the reply never parsed.
pub fn normalized_distance(
    prediction: &Prediction,
    attempt: &StudentAttempt,
) -> Option<DistanceRecord> {
    let step = prediction.predicted_step?;
    let delta = step as i64 - attempt.first_error_index as i64;
    Some(DistanceRecord {
        attempt_id: attempt.id.clone(),
        signed_step_delta: delta,
        normalized_distance: delta as f64 / attempt.steps.len() as f64,
        error_type: attempt.error_type,
    })
}

/// One histogram cell: count of distances falling in the bin around `bin_center`.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceBin {
    pub error_type: String,
    pub bin_center: f64,
    pub count: u64,
}

/// Bins normalized distances over [-1, 1] per error type. The bin count must
/// be odd so the central bin is centered at zero; untyped records group under
/// "untyped".
pub fn distance_distribution_by_type(
    records: &[DistanceRecord],
    bins: usize,
) -> Result<Vec<DistanceBin>, MetricsError> {
    if bins < 3 || bins % 2 == 0 {
        return Err(MetricsError::BadBinCount(bins));
    }
    let width = 2.0 / bins as f64;
    let mut counts: BTreeMap<(String, u64), u64> = BTreeMap::new();
    for record in records {
        let label = record
            .error_type
            .map(|t| t.label().to_string())
            .unwrap_or_else(|| "untyped".to_string());
        let idx = (((record.normalized_distance + 1.0) / width).floor() as i64)
            .clamp(0, bins as i64 - 1) as u64;
        *counts.entry((label, idx)).or_insert(0) += 1;
    }
    Ok(counts
        .into_iter()
        .map(|((label, idx), count)| DistanceBin {
            error_type: label,
            bin_center: -1.0 + (idx as f64 + 0.5) * width,
            count,
        })
        .collect())
}

/// Half-up rounding to two decimals, the report convention for percentages.
pub fn fmt_pct(value: f64) -> String {
    let scaled = (value.abs() * 100.0 + 0.5).floor() / 100.0;
    let rounded = if value < 0.0 { -scaled } else { scaled };
    format!("{rounded:.2}")
}
