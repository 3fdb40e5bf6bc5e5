//! Reference classifiers and recognition-quality metrics.
//!
//! Both baselines look at the same raw history a two-layer model sees
//! (`T1 + T2 - 1` steps), so their posterior series line up step for step
//! with [`TlhmmModel::infer`](crate::tlhmm::TlhmmModel::infer).

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{self, FitConfig, HmmParams, ObservationSequence};
use crate::linalg::{DataMatrix, Gaussian};
use crate::random::derive_seed;
use crate::scenario::{Event, Situation};
use crate::tlhmm::{raw_sequences, softmax_posterior, PosteriorSeries, StateCount};

fn labels_of(situations: &[Situation]) -> Vec<String> {
    situations.iter().map(|s| s.label().to_string()).collect()
}

fn uniform(h: usize) -> Vec<f64> {
    vec![1.0 / h as f64; h]
}

fn by_situation<'a>(
    situations: &[Situation],
    events: &[Event],
    raw: &'a [ObservationSequence],
) -> Result<Vec<Vec<&'a ObservationSequence>>> {
    situations
        .iter()
        .map(|&s| {
            let set: Vec<&ObservationSequence> = events
                .iter()
                .zip(raw)
                .filter(|(e, _)| e.situation == s)
                .map(|(_, r)| r)
                .collect();
            if set.is_empty() {
                return Err(Error::invalid(format!("no training events for class {s}")));
            }
            Ok(set)
        })
        .collect()
}

/// Sliding-window posterior shared by both baselines.
fn windowed_posterior<F>(
    labels: Vec<String>,
    prior: &[f64],
    raw: &ObservationSequence,
    window: usize,
    score: F,
) -> Result<PosteriorSeries>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if raw.len() < window {
        return Err(Error::TooShort {
            min: window,
            got: raw.len(),
        });
    }
    let d = raw.feature_dim();
    let data = raw.values().as_slice();
    let n_out = raw.len() - window + 1;
    let mut out = PosteriorSeries {
        labels,
        steps: Vec::with_capacity(n_out),
        times: Vec::with_capacity(n_out),
        probabilities: Vec::with_capacity(n_out),
    };
    for i in 0..n_out {
        let step = i + window - 1;
        let lls = score(&data[i * d..(i + window) * d]);
        out.steps.push(step);
        out.times.push(step as f64 * raw.dt());
        out.probabilities.push(softmax_posterior(&lls, prior));
    }
    Ok(out)
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One raw-feature HMM per situation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleHmmClassifier {
    pub situations: Vec<Situation>,
    pub models: Vec<HmmParams>,
    pub window: usize,
    pub prior: Vec<f64>,
}

impl SingleHmmClassifier {
    pub fn new(situations: Vec<Situation>, models: Vec<HmmParams>, window: usize) -> Result<Self> {
        if situations.len() != models.len() || models.is_empty() {
            return Err(Error::invalid("one model per situation required"));
        }
        if window == 0 {
            return Err(Error::invalid("window must be at least 1"));
        }
        let prior = uniform(models.len());
        Ok(Self {
            situations,
            models,
            window,
            prior,
        })
    }

    /// Trains each situation's HMM on that situation's whole-event raw
    /// sequences.
    pub fn fit(
        events: &[Event],
        situations: &[Situation],
        window: usize,
        states: &StateCount,
        fit: &FitConfig,
        seed: u64,
    ) -> Result<Self> {
        let raw = raw_sequences(events)?;
        let groups = by_situation(situations, events, &raw)?;
        let models: Vec<HmmParams> = groups
            .par_iter()
            .enumerate()
            .map(|(j, set)| {
                let seqs: Vec<ObservationSequence> = set.iter().map(|s| (*s).clone()).collect();
                let s = derive_seed(seed, 2000 + j as u64);
                let k = match states.fixed {
                    Some(k) => k,
                    None => hmm::select_state_count(&hmm::pool(&seqs)?, states.min..=states.max, fit, s)?,
                };
                hmm::baum_welch_fit(&seqs, k, fit, s).map(|(m, _)| m)
            })
            .collect::<Result<_>>()?;
        Self::new(situations.to_vec(), models, window)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        let prior = c.prior.clone();
        let mut out = Self::new(c.situations, c.models, c.window)?;
        crate::tlhmm::validate_prior(&prior, out.models.len())?;
        out.prior = prior;
        Ok(out)
    }

    pub fn infer(&self, raw: &ObservationSequence) -> Result<PosteriorSeries> {
        let d = self.models[0].feature_dim();
        if raw.feature_dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: raw.feature_dim(),
            });
        }
        windowed_posterior(labels_of(&self.situations), &self.prior, raw, self.window, |w| {
            self.models.iter().map(|m| m.window_log_likelihood(w)).collect()
        })
    }
}

/// Shrinkage weight toward the diagonal, used when a class has fewer than
/// `5 × dim` windows or its sample covariance is not positive definite.
pub const QDA_SHRINKAGE: f64 = 0.1;

/// Per-class Gaussian over flattened raw-feature windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QdaClassifier {
    pub situations: Vec<Situation>,
    pub classes: Vec<Gaussian>,
    pub window: usize,
    pub prior: Vec<f64>,
}

impl QdaClassifier {
    pub fn new(situations: Vec<Situation>, classes: Vec<Gaussian>, window: usize) -> Result<Self> {
        if situations.len() != classes.len() || classes.is_empty() {
            return Err(Error::invalid("one class density per situation required"));
        }
        if window == 0 || !classes[0].dim().is_multiple_of(window) {
            return Err(Error::invalid("class dimension must be a multiple of the window"));
        }
        let prior = uniform(classes.len());
        Ok(Self {
            situations,
            classes,
            window,
            prior,
        })
    }

    /// Fits one Gaussian per class on every length-`window` slice of that
    /// class's raw sequences.
    pub fn fit(events: &[Event], situations: &[Situation], window: usize) -> Result<Self> {
        let raw = raw_sequences(events)?;
        let groups = by_situation(situations, events, &raw)?;
        let classes = situations
            .iter()
            .zip(&groups)
            .map(|(s, set)| {
                let rows = flatten_windows(set, window)?;
                fit_class(s.label(), &rows)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(situations.to_vec(), classes, window)
    }

    /// Fits from explicit flattened samples, one matrix per class.
    pub fn fit_samples(situations: &[Situation], samples: &[DataMatrix], window: usize) -> Result<Self> {
        let classes = situations
            .iter()
            .zip(samples)
            .map(|(s, rows)| fit_class(s.label(), rows))
            .collect::<Result<Vec<_>>>()?;
        Self::new(situations.to_vec(), classes, window)
    }

    pub fn class_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.classes.iter().map(|g| g.log_pdf(x)).collect()
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        softmax_posterior(&self.class_log_densities(x), &self.prior)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        let prior = c.prior.clone();
        let mut out = Self::new(c.situations, c.classes, c.window)?;
        crate::tlhmm::validate_prior(&prior, out.classes.len())?;
        out.prior = prior;
        Ok(out)
    }

    pub fn infer(&self, raw: &ObservationSequence) -> Result<PosteriorSeries> {
        let d = self.classes[0].dim() / self.window;
        if raw.feature_dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: raw.feature_dim(),
            });
        }
        windowed_posterior(labels_of(&self.situations), &self.prior, raw, self.window, |w| {
            self.class_log_densities(w)
        })
    }
}

fn flatten_windows(seqs: &[&ObservationSequence], window: usize) -> Result<DataMatrix> {
    let d = seqs[0].feature_dim();
    let mut rows = DataMatrix::with_cols(d * window)?;
    for s in seqs {
        let data = s.values().as_slice();
        for i in 0..=s.len().saturating_sub(window) {
            if i + window <= s.len() {
                rows.push_row(&data[i * d..(i + window) * d])?;
            }
        }
    }
    Ok(rows)
}

fn fit_class(label: &str, rows: &DataMatrix) -> Result<Gaussian> {
    let singular = |why: String| Error::Numerical(format!("class {label}: {why}"));
    if rows.nrows() < 2 {
        return Err(singular(format!("{} samples cannot give a covariance", rows.nrows())));
    }
    let dim = rows.ncols();
    let mean = rows.column_mean();
    let cov = rows.covariance();
    let shrink = |c: &DMatrix<f64>| {
        let diag = DMatrix::from_diagonal(&c.diagonal());
        c * (1.0 - QDA_SHRINKAGE) + diag * QDA_SHRINKAGE
    };
    if rows.nrows() < 5 * dim {
        return Gaussian::new(mean, shrink(&cov)).map_err(|e| singular(format!("covariance is singular ({e})")));
    }
    // windows of derived features can be exactly collinear; shrink then too
    match Gaussian::new(mean.clone(), cov.clone()) {
        Ok(g) => Ok(g),
        Err(_) => Gaussian::new(mean, shrink(&cov)).map_err(|e| singular(format!("covariance is singular ({e})"))),
    }
}

/// Recognition quality of one posterior series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub event_id: String,
    pub truth: Situation,
    pub final_correct: bool,
    pub final_true_probability: f64,
    /// First step after which the true-class probability stays above θ.
    pub earliest_step: Option<usize>,
    pub earliest_time_s: Option<f64>,
    /// Total variation of the true-class probability after its first
    /// θ-crossing; `None` when it never crosses.
    pub fluctuation: Option<f64>,
}

/// Aggregate over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionMetrics {
    pub model: String,
    pub theta: f64,
    pub n_events: usize,
    pub final_accuracy: f64,
    /// Mean over events that settle above θ.
    pub mean_earliest_step: Option<f64>,
    pub mean_earliest_time_s: Option<f64>,
    /// Events whose true-class probability never settles above θ.
    pub n_never_settled: usize,
    pub mean_fluctuation: Option<f64>,
    pub n_never_crossed: usize,
    pub events: Vec<EventMetrics>,
}

pub const DEFAULT_THETA: f64 = 0.7;

/// Metrics of one series against its true label.
pub fn event_metrics(id: &str, series: &PosteriorSeries, truth: Situation, theta: f64) -> Result<EventMetrics> {
    let j = series
        .labels
        .iter()
        .position(|l| l == truth.label())
        .ok_or_else(|| Error::invalid(format!("event {id}: no column for {truth}")))?;
    if series.is_empty() {
        return Err(Error::invalid(format!("event {id}: empty posterior series")));
    }
    let p = series.column(j);
    let final_correct = series.final_label_index() == Some(j);
    let mut settle = None;
    for i in (0..p.len()).rev() {
        if p[i] > theta {
            settle = Some(i);
        } else {
            break;
        }
    }
    let fluctuation = p
        .iter()
        .position(|&v| v > theta)
        .map(|c| p[c..].windows(2).map(|w| (w[1] - w[0]).abs()).sum());
    Ok(EventMetrics {
        event_id: id.to_string(),
        truth,
        final_correct,
        final_true_probability: p[p.len() - 1],
        earliest_step: settle.map(|i| series.steps[i]),
        earliest_time_s: settle.map(|i| series.times[i]),
        fluctuation,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates per-event metrics; `runs` pairs each event id with its series.
pub fn evaluate(
    model: &str,
    runs: &[(String, PosteriorSeries)],
    truth: &[Situation],
    theta: f64,
) -> Result<RecognitionMetrics> {
    if !(theta > 0.5 && theta < 1.0) {
        return Err(Error::invalid(format!("theta {theta} outside (0.5, 1)")));
    }
    if runs.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: runs.len(),
            got: truth.len(),
        });
    }
    let events = runs
        .iter()
        .zip(truth)
        .map(|((id, s), &t)| event_metrics(id, s, t, theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(model, theta, events))
}

pub fn summarize(model: &str, theta: f64, events: Vec<EventMetrics>) -> RecognitionMetrics {
    let n = events.len();
    let correct = events.iter().filter(|e| e.final_correct).count();
    RecognitionMetrics {
        model: model.to_string(),
        theta,
        n_events: n,
        final_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        mean_earliest_step: mean(events.iter().filter_map(|e| e.earliest_step.map(|s| s as f64))),
        mean_earliest_time_s: mean(events.iter().filter_map(|e| e.earliest_time_s)),
        n_never_settled: events.iter().filter(|e| e.earliest_step.is_none()).count(),
        mean_fluctuation: mean(events.iter().filter_map(|e| e.fluctuation)),
        n_never_crossed: events.iter().filter(|e| e.fluctuation.is_none()).count(),
        events,
    }
}

pub const METRICS_CSV_HEADER: [&str; 8] = [
    "model",
    "event_id",
    "truth",
    "final_correct",
    "final_true_probability",
    "earliest_step",
    "earliest_time_s",
    "fluctuation",
];

/// One row per (model, event); missing values are empty cells.
pub fn write_metrics_csv<W: Write>(metrics: &[RecognitionMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_CSV_HEADER)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for m in metrics {
        for e in &m.events {
            w.write_record([
                m.model.clone(),
                e.event_id.clone(),
                e.truth.label().to_string(),
                e.final_correct.to_string(),
                e.final_true_probability.to_string(),
                opt(e.earliest_step.map(|v| v.to_string())),
                opt(e.earliest_time_s.map(|v| v.to_string())),
                opt(e.fluctuation.map(|v| v.to_string())),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

/// Aggregate summary without the per-event rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub model: String,
    pub theta: f64,
    pub n_events: usize,
    pub final_accuracy: f64,
    pub mean_earliest_step: Option<f64>,
    pub mean_earliest_time_s: Option<f64>,
    pub n_never_settled: usize,
    pub mean_fluctuation: Option<f64>,
    pub n_never_crossed: usize,
}

impl From<&RecognitionMetrics> for MetricsSummary {
    fn from(m: &RecognitionMetrics) -> Self {
        Self {
            model: m.model.clone(),
            theta: m.theta,
            n_events: m.n_events,
            final_accuracy: m.final_accuracy,
            mean_earliest_step: m.mean_earliest_step,
            mean_earliest_time_s: m.mean_earliest_time_s,
            n_never_settled: m.n_never_settled,
            mean_fluctuation: m.mean_fluctuation,
            n_never_crossed: m.n_never_crossed,
        }
    }
}
