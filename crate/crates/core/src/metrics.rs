//! Run-level metrics: success and progress rates, step efficiency,
//! cumulative curves, pruning rates, task similarity, ordering robustness
//! and correlation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::TaskResult;
use crate::memory::Outcome;
use crate::retrieval::task_similarity_profile;

pub const DEFAULT_ROLLING_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based position in the stream.
    pub t: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pruning {
    pub pruned: usize,
    pub retained: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub metric: Metric,
    pub orderings: Vec<(String, f64)>,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub n_tasks: usize,
    pub n_graded: usize,
    /// Success rate over graded single-turn tasks.
    pub accuracy: Option<f64>,
    pub success_rate: f64,
    pub progress_rate: f64,
    /// Mean steps over graded multi-turn tasks.
    pub avg_steps: Option<f64>,
    /// Steps and backend calls summed over all tasks, ungraded included.
    pub total_steps: usize,
    pub total_backend_calls: usize,
    /// Running mean of the success indicator over graded tasks.
    pub cumulative_curve: Vec<CurvePoint>,
    pub rolling_window: usize,
    pub rolling_curve: Vec<CurvePoint>,
    pub pruning: Pruning,
    pub similarity_profile: Option<f64>,
    #[serde(default)]
    pub robustness: Option<Robustness>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SuccessRate,
    ProgressRate,
    Accuracy,
    AvgSteps,
}

impl Metric {
    pub fn select(self, r: &RunReport) -> Option<f64> {
        match self {
            Metric::SuccessRate => Some(r.success_rate),
            Metric::ProgressRate => Some(r.progress_rate),
            Metric::Accuracy => r.accuracy,
            Metric::AvgSteps => r.avg_steps,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn indicator(r: &TaskResult) -> f64 {
    if r.feedback.outcome == Outcome::Success {
        1.0
    } else {
        0.0
    }
}

pub fn compute_report(run_id: &str, results: &[TaskResult], embeddings: &[Vec<f64>]) -> Result<RunReport> {
    compute_report_with(run_id, results, embeddings, DEFAULT_ROLLING_WINDOW)
}

/// Builds a report; `embeddings` are task-input vectors for the similarity
/// profile and may be empty.
pub fn compute_report_with(
    run_id: &str,
    results: &[TaskResult],
    embeddings: &[Vec<f64>],
    rolling_window: usize,
) -> Result<RunReport> {
    if rolling_window == 0 {
        return Err(Error::InvalidInput("rolling window must be positive".into()));
    }
    let graded: Vec<&TaskResult> = results.iter().filter(|r| r.feedback.outcome.is_graded()).collect();
    if graded.is_empty() {
        return Err(Error::EmptyReport);
    }
    let success_rate = mean(graded.iter().map(|r| indicator(r))).unwrap_or(0.0);
    let progress_rate = mean(graded.iter().map(|r| r.feedback.progress)).unwrap_or(0.0);
    let accuracy = mean(graded.iter().filter(|r| !r.env.is_multi_turn()).map(|r| indicator(r)));
    let avg_steps = mean(
        graded
            .iter()
            .filter(|r| r.env.is_multi_turn())
            .map(|r| r.steps_taken as f64),
    );

    let mut cumulative_curve = Vec::with_capacity(graded.len());
    let mut rolling_curve = Vec::with_capacity(graded.len());
    let mut window: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(rolling_window);
    let (mut sum, mut n) = (0.0, 0usize);
    for (pos, r) in results.iter().enumerate() {
        if !r.feedback.outcome.is_graded() {
            continue;
        }
        let x = indicator(r);
        sum += x;
        n += 1;
        cumulative_curve.push(CurvePoint {
            t: pos + 1,
            value: sum / n as f64,
        });
        if window.len() == rolling_window {
            window.pop_front();
        }
        window.push_back(x);
        rolling_curve.push(CurvePoint {
            t: pos + 1,
            value: window.iter().sum::<f64>() / window.len() as f64,
        });
    }

    let pruned: usize = results.iter().map(|r| r.pruned_ids.len()).sum();
    let retrieved: usize = results.iter().map(|r| r.retrieved_ids.len()).sum();
    let retained = retrieved.saturating_sub(pruned);
    let pruning = Pruning {
        pruned,
        retained,
        rate: pruned as f64 / (pruned + retained).max(1) as f64,
    };

    let similarity_profile = if embeddings.is_empty() {
        None
    } else {
        Some(task_similarity_profile(embeddings)?)
    };

    Ok(RunReport {
        run_id: run_id.to_string(),
        n_tasks: results.len(),
        n_graded: graded.len(),
        accuracy,
        success_rate,
        progress_rate,
        avg_steps,
        total_steps: results.iter().map(|r| r.steps_taken).sum(),
        total_backend_calls: results.iter().map(|r| r.backend_calls).sum(),
        cumulative_curve,
        rolling_window,
        rolling_curve,
        pruning,
        similarity_profile,
        robustness: None,
    })
}

/// Max minus min of `metric` across reports for different orderings.
pub fn robustness_spread(reports: &[(String, RunReport)], metric: Metric) -> Result<Robustness> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput("robustness needs at least two orderings".into()));
    }
    let orderings = reports
        .iter()
        .map(|(name, r)| {
            metric
                .select(r)
                .map(|v| (name.clone(), v))
                .ok_or_else(|| Error::InvalidInput(format!("report `{name}` has no {metric:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let max = orderings.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let min = orderings.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    Ok(Robustness {
        metric,
        orderings,
        spread: max - min,
    })
}

/// Pearson correlation coefficient.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "correlate needs two equal-length series of at least 2 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json` and `report.csv` into `dir`. The CSV has one `task`
/// row per graded task (curve data) followed by one `summary` row.
pub fn write_report(dir: &Path, report: &RunReport, results: &[TaskResult]) -> Result<()> {
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join("report.csv");
    let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record([
        "row",
        "t",
        "task_id",
        "outcome",
        "progress",
        "steps",
        "cumulative",
        "rolling",
    ])
    .map_err(csv_err)?;
    let graded = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.feedback.outcome.is_graded());
    for (((pos, r), c), rl) in graded.zip(&report.cumulative_curve).zip(&report.rolling_curve) {
        w.write_record([
            "task".to_string(),
            (pos + 1).to_string(),
            r.task_id.clone(),
            r.feedback.outcome.to_string(),
            r.feedback.progress.to_string(),
            r.steps_taken.to_string(),
            c.value.to_string(),
            rl.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.write_record([
        "summary".to_string(),
        report.n_tasks.to_string(),
        report.run_id.clone(),
        opt(report.accuracy),
        report.progress_rate.to_string(),
        opt(report.avg_steps),
        report.success_rate.to_string(),
        report.pruning.rate.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))
}
