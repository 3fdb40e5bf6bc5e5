//! Two-layer HMM cascade.
//!
//! Layer 1 holds one HMM per (situation, stage) cell of the roster and turns a
//! raw feature stream into a stream of window log-likelihoods. Layer 2 holds
//! one HMM per situation over that meta-feature stream; a softmax over the
//! layer-2 window log-likelihoods gives the situation posterior.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{self, FitConfig, FitReport, HmmParams, ObservationSequence};
use crate::linalg::DataMatrix;
use crate::random::derive_seed;
use crate::scenario::{self, Event, Situation, Stage};

/// Shape of a meta-feature row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    /// One column per layer-1 model: the full-window log-likelihood.
    #[default]
    Vector,
    /// `T1` columns per layer-1 model: every trailing sub-window of length
    /// `T1, T1 - 1, ..., 1`.
    Matrix,
}

impl MetaMode {
    pub fn row_width(self, n_models: usize, t1: usize) -> usize {
        match self {
            MetaMode::Vector => n_models,
            MetaMode::Matrix => n_models * t1,
        }
    }
}

impl std::str::FromStr for MetaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vector" => Ok(MetaMode::Vector),
            "matrix" => Ok(MetaMode::Matrix),
            other => Err(Error::invalid(format!("unknown meta mode {other:?}"))),
        }
    }
}

/// A layer-1 roster cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub label: String,
    /// Situations whose segments feed this model.
    pub situations: Vec<Situation>,
    pub stage: Stage,
}

/// A layer-2 roster cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SituationEntry {
    pub label: String,
    pub situation: Situation,
}

/// Which models make up each layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub layer1: Vec<StageEntry>,
    pub layer2: Vec<SituationEntry>,
}

impl Roster {
    /// Seven stage models (a shared Ambiguity model plus three stages per
    /// situation) and two situation models.
    pub fn merging() -> Self {
        let both = vec![Situation::MainYields, Situation::MergeYields];
        let mut layer1 = vec![StageEntry {
            label: "HMM-1-1".into(),
            situations: both,
            stage: Stage::Ambiguity,
        }];
        let mut j = 2;
        for sit in Situation::ALL {
            for stage in [Stage::Preparation, Stage::Merging, Stage::CarFollowing] {
                layer1.push(StageEntry {
                    label: format!("HMM-1-{j}"),
                    situations: vec![sit],
                    stage,
                });
                j += 1;
            }
        }
        let layer2 = Situation::ALL
            .iter()
            .enumerate()
            .map(|(i, &situation)| SituationEntry {
                label: format!("HMM-2-{}", i + 1),
                situation,
            })
            .collect();
        Self { layer1, layer2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer1.is_empty() {
            return Err(Error::invalid("roster needs at least one layer-1 model"));
        }
        if self.layer2.len() < 2 {
            return Err(Error::invalid("roster needs at least two layer-2 models"));
        }
        let mut seen = BTreeSet::new();
        for label in self.layer1.iter().map(|e| &e.label).chain(self.layer2.iter().map(|e| &e.label)) {
            if !seen.insert(label.as_str()) {
                return Err(Error::Roster {
                    entry: label.clone(),
                    reason: "duplicate label".into(),
                });
            }
        }
        for e in &self.layer1 {
            if e.situations.is_empty() {
                return Err(Error::Roster {
                    entry: e.label.clone(),
                    reason: "no situations listed".into(),
                });
            }
        }
        let mut sits = BTreeSet::new();
        for e in &self.layer2 {
            if !sits.insert(e.situation) {
                return Err(Error::Roster {
                    entry: e.label.clone(),
                    reason: format!("situation {} already has a layer-2 model", e.situation),
                });
            }
        }
        Ok(())
    }

    pub fn situations(&self) -> Vec<Situation> {
        self.layer2.iter().map(|e| e.situation).collect()
    }
}

impl Default for Roster {
    fn default() -> Self {
        Self::merging()
    }
}

/// Extra per-step columns appended to every meta-feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct PassThrough {
    pub names: Vec<String>,
    /// One matrix per event, one row per raw step.
    pub values: Vec<DataMatrix>,
}

/// Layer-1 log-likelihood windows of one raw sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaFeatureSequence {
    pub values: DataMatrix,
    /// Raw step at which the first full window ends.
    pub origin_offset: usize,
}

impl MetaFeatureSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_observations(&self, dt: f64) -> Result<ObservationSequence> {
        ObservationSequence::new(self.values.clone(), dt)
    }
}

/// Length-normalized window log-likelihoods. Row `i` covers the raw window
/// ending at step `i + T1 - 1`.
pub fn build_meta_features(
    layer1: &[HmmParams],
    raw: &ObservationSequence,
    t1: usize,
    mode: MetaMode,
) -> Result<MetaFeatureSequence> {
    if layer1.is_empty() {
        return Err(Error::invalid("no layer-1 models"));
    }
    if t1 == 0 {
        return Err(Error::invalid("T1 must be at least 1"));
    }
    let dim = raw.feature_dim();
    if let Some(m) = layer1.iter().find(|m| m.feature_dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: m.feature_dim(),
            got: dim,
        });
    }
    if raw.len() < t1 {
        return Err(Error::TooShort {
            min: t1,
            got: raw.len(),
        });
    }
    let n_rows = raw.len() - t1 + 1;
    let width = mode.row_width(layer1.len(), t1);
    let data = raw.values().as_slice();
    let mut out = Vec::with_capacity(n_rows * width);
    for i in 0..n_rows {
        for model in layer1 {
            match mode {
                MetaMode::Vector => {
                    let w = &data[i * dim..(i + t1) * dim];
                    out.push(model.log_likelihood_rows(w) / t1 as f64);
                }
                MetaMode::Matrix => {
                    let end = i + t1;
                    for len in (1..=t1).rev() {
                        let w = &data[(end - len) * dim..end * dim];
                        out.push(model.log_likelihood_rows(w) / len as f64);
                    }
                }
            }
        }
    }
    let values = DataMatrix::from_flat(out, width)?;
    if !values.all_finite() {
        return Err(Error::Numerical("non-finite layer-1 log-likelihood".into()));
    }
    Ok(MetaFeatureSequence {
        values,
        origin_offset: t1 - 1,
    })
}

fn append_pass_through(meta: &MetaFeatureSequence, extras: &DataMatrix) -> Result<MetaFeatureSequence> {
    let n_raw = meta.origin_offset + meta.len();
    if extras.nrows() != n_raw {
        return Err(Error::DimensionMismatch {
            expected: n_raw,
            got: extras.nrows(),
        });
    }
    let mut values = DataMatrix::with_cols(meta.values.ncols() + extras.ncols())?;
    for (i, row) in meta.values.rows().enumerate() {
        let mut r = row.to_vec();
        r.extend_from_slice(extras.row(meta.origin_offset + i));
        values.push_row(&r)?;
    }
    Ok(MetaFeatureSequence {
        values,
        origin_offset: meta.origin_offset,
    })
}

/// `p_i ∝ prior_i · exp(L_i − max L)`. Non-finite log-likelihoods get zero
/// weight; if nothing has weight the prior is returned.
pub fn softmax_posterior(log_liks: &[f64], prior: &[f64]) -> Vec<f64> {
    assert_eq!(log_liks.len(), prior.len(), "log-likelihood and prior lengths differ");
    let scores: Vec<f64> = log_liks
        .iter()
        .zip(prior)
        .map(|(&l, &p)| {
            if l.is_finite() && p > 0.0 {
                l + p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return prior.to_vec();
    }
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Per-step situation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSeries {
    pub labels: Vec<String>,
    /// Raw step index at which each row's history ends.
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub probabilities: Vec<Vec<f64>>,
}

impl PosteriorSeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.probabilities.iter().map(|r| r[j]).collect()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.probabilities.last().map(|r| r.as_slice())
    }

    /// Index of the most probable label in the last row; ties go to the
    /// earlier label.
    pub fn final_label_index(&self) -> Option<usize> {
        let r = self.final_row()?;
        let mut best = 0;
        for (j, &p) in r.iter().enumerate() {
            if p > r[best] {
                best = j;
            }
        }
        Some(best)
    }

    /// CSV with columns `step,time_s,<labels...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "time_s".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for ((s, t), row) in self.steps.iter().zip(&self.times).zip(&self.probabilities) {
            let mut rec = vec![s.to_string(), t.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("posterior csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "step" || &header[1] != "time_s" {
            return Err(Error::invalid("posterior csv must start with step,time_s"));
        }
        let labels: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut out = PosteriorSeries {
            labels,
            steps: Vec::new(),
            times: Vec::new(),
            probabilities: Vec::new(),
        };
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number {s:?} in posterior csv")))
        };
        for rec in r.records() {
            let rec = rec?;
            out.steps.push(
                rec[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad step {:?}", &rec[0])))?,
            );
            out.times.push(num(&rec[1])?);
            out.probabilities
                .push(rec.iter().skip(2).map(num).collect::<Result<Vec<f64>>>()?);
        }
        Ok(out)
    }
}

/// Trained two-layer cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct TlhmmModel {
    pub roster: Roster,
    pub layer1: Vec<HmmParams>,
    pub layer2: Vec<HmmParams>,
    pub t1: usize,
    pub t2: usize,
    pub meta_mode: MetaMode,
    pub prior: Vec<f64>,
    /// Names of pass-through columns appended to meta-feature rows.
    pub pass_through: Vec<String>,
}

impl TlhmmModel {
    pub fn new(
        roster: Roster,
        layer1: Vec<HmmParams>,
        layer2: Vec<HmmParams>,
        t1: usize,
        t2: usize,
        meta_mode: MetaMode,
        prior: Vec<f64>,
        pass_through: Vec<String>,
    ) -> Result<Self> {
        let m = Self {
            roster,
            layer1,
            layer2,
            t1,
            t2,
            meta_mode,
            prior,
            pass_through,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.roster.validate()?;
        if self.layer1.len() != self.roster.layer1.len() || self.layer2.len() != self.roster.layer2.len() {
            return Err(Error::invalid("model counts do not match the roster"));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::invalid("T1 and T2 must be at least 1"));
        }
        let raw_dim = self.layer1[0].feature_dim();
        if self.layer1.iter().any(|m| m.feature_dim() != raw_dim) {
            return Err(Error::invalid("layer-1 models disagree on raw feature dimension"));
        }
        let meta = self.meta_dim();
        if let Some(m) = self.layer2.iter().find(|m| m.feature_dim() != meta) {
            return Err(Error::DimensionMismatch {
                expected: meta,
                got: m.feature_dim(),
            });
        }
        validate_prior(&self.prior, self.layer2.len())
    }

    pub fn raw_dim(&self) -> usize {
        self.layer1[0].feature_dim()
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_mode.row_width(self.layer1.len(), self.t1) + self.pass_through.len()
    }

    pub fn situations(&self) -> Vec<Situation> {
        self.roster.situations()
    }

    pub fn labels(&self) -> Vec<String> {
        self.situations().iter().map(|s| s.label().to_string()).collect()
    }

    /// Shortest raw sequence that yields one posterior row.
    pub fn min_length(&self) -> usize {
        self.t1 + self.t2 - 1
    }

    pub fn meta_features(&self, raw: &ObservationSequence, extras: Option<&DataMatrix>) -> Result<MetaFeatureSequence> {
        let meta = build_meta_features(&self.layer1, raw, self.t1, self.meta_mode)?;
        match (extras, self.pass_through.is_empty()) {
            (None, true) => Ok(meta),
            (Some(x), false) => {
                if x.ncols() != self.pass_through.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.pass_through.len(),
                        got: x.ncols(),
                    });
                }
                append_pass_through(&meta, x)
            }
            (None, false) => Err(Error::invalid("model expects pass-through columns")),
            (Some(_), true) => Err(Error::invalid("model has no pass-through columns")),
        }
    }

    /// Situation posterior for every full layer-2 window.
    pub fn infer(&self, raw: &ObservationSequence) -> Result<PosteriorSeries> {
        self.infer_with_extras(raw, None)
    }

    pub fn infer_with_extras(&self, raw: &ObservationSequence, extras: Option<&DataMatrix>) -> Result<PosteriorSeries> {
        if raw.len() < self.min_length() {
            return Err(Error::TooShort {
                min: self.min_length(),
                got: raw.len(),
            });
        }
        let meta = self.meta_features(raw, extras)?;
        let width = meta.values.ncols();
        let data = meta.values.as_slice();
        let n_out = meta.len() - self.t2 + 1;
        let mut out = PosteriorSeries {
            labels: self.labels(),
            steps: Vec::with_capacity(n_out),
            times: Vec::with_capacity(n_out),
            probabilities: Vec::with_capacity(n_out),
        };
        for j in 0..n_out {
            let w = &data[j * width..(j + self.t2) * width];
            let lls: Vec<f64> = self.layer2.iter().map(|m| m.window_log_likelihood(w)).collect();
            let step = j + self.min_length() - 1;
            out.steps.push(step);
            out.times.push(step as f64 * raw.dt());
            out.probabilities.push(softmax_posterior(&lls, &self.prior));
        }
        Ok(out)
    }

    /// Writes `manifest.json` plus one JSON file per HMM into `dir`.
    pub fn save_bundle(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut l1 = Vec::new();
        for (e, m) in self.roster.layer1.iter().zip(&self.layer1) {
            let file = format!("{}.json", e.label);
            m.save(&dir.join(&file))?;
            files.push(file.clone());
            l1.push(BundleEntry {
                label: e.label.clone(),
                situations: e.situations.clone(),
                stage: Some(e.stage),
                n_states: m.n_states(),
                file,
            });
        }
        let mut l2 = Vec::new();
        for (e, m) in self.roster.layer2.iter().zip(&self.layer2) {
            let file = format!("{}.json", e.label);
            m.save(&dir.join(&file))?;
            files.push(file.clone());
            l2.push(BundleEntry {
                label: e.label.clone(),
                situations: vec![e.situation],
                stage: None,
                n_states: m.n_states(),
                file,
            });
        }
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            t1: self.t1,
            t2: self.t2,
            meta_mode: self.meta_mode,
            prior: self.prior.clone(),
            situations: self.labels(),
            pass_through: self.pass_through.clone(),
            layer1: l1,
            layer2: l2,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        files.push("manifest.json".into());
        Ok(files)
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.format != BUNDLE_FORMAT {
            return Err(Error::invalid(format!("unsupported bundle format {:?}", m.format)));
        }
        let mut roster = Roster {
            layer1: Vec::new(),
            layer2: Vec::new(),
        };
        let mut layer1 = Vec::new();
        for e in &m.layer1 {
            let stage = e.stage.ok_or_else(|| Error::Roster {
                entry: e.label.clone(),
                reason: "layer-1 entry without a stage".into(),
            })?;
            roster.layer1.push(StageEntry {
                label: e.label.clone(),
                situations: e.situations.clone(),
                stage,
            });
            layer1.push(HmmParams::load(&dir.join(&e.file))?);
        }
        let mut layer2 = Vec::new();
        for e in &m.layer2 {
            let situation = match e.situations.as_slice() {
                [s] => *s,
                _ => {
                    return Err(Error::Roster {
                        entry: e.label.clone(),
                        reason: "layer-2 entry must name exactly one situation".into(),
                    })
                }
            };
            roster.layer2.push(SituationEntry {
                label: e.label.clone(),
                situation,
            });
            layer2.push(HmmParams::load(&dir.join(&e.file))?);
        }
        Self::new(roster, layer1, layer2, m.t1, m.t2, m.meta_mode, m.prior, m.pass_through)
    }
}

const BUNDLE_FORMAT: &str = "tlhmm-bundle-1";

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    t1: usize,
    t2: usize,
    meta_mode: MetaMode,
    prior: Vec<f64>,
    situations: Vec<String>,
    #[serde(default)]
    pass_through: Vec<String>,
    layer1: Vec<BundleEntry>,
    layer2: Vec<BundleEntry>,
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    label: String,
    situations: Vec<Situation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
    n_states: usize,
    file: String,
}

pub(crate) fn validate_prior(prior: &[f64], h: usize) -> Result<()> {
    if prior.len() != h {
        return Err(Error::DimensionMismatch {
            expected: h,
            got: prior.len(),
        });
    }
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("prior entries must be finite and non-negative"));
    }
    let s: f64 = prior.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("prior sums to {s}, not 1")));
    }
    Ok(())
}

/// Hidden-state count policy for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateCount {
    /// Fixed count; `None` selects by BIC over `min..=max`.
    pub fixed: Option<usize>,
    pub min: usize,
    pub max: usize,
}

impl Default for StateCount {
    fn default() -> Self {
        Self {
            fixed: None,
            min: 1,
            max: 4,
        }
    }
}

impl StateCount {
    fn choose(&self, seqs: &[ObservationSequence], fit: &FitConfig, seed: u64) -> Result<usize> {
        if let Some(k) = self.fixed {
            return Ok(k);
        }
        if self.min == 0 || self.min > self.max {
            return Err(Error::invalid("state-count range must satisfy 1 <= min <= max"));
        }
        let pooled = hmm::pool(seqs)?;
        let max = self.max.min(pooled.nrows()).max(self.min);
        hmm::select_state_count(&pooled, self.min..=max, fit, seed)
    }
}

/// Training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t1: usize,
    pub t2: usize,
    pub meta_mode: MetaMode,
    /// Uniform when absent.
    pub prior: Option<Vec<f64>>,
    pub layer1_states: StateCount,
    pub layer2_states: StateCount,
    pub fit: FitConfig,
    pub min_segments: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t1: 10,
            t2: 10,
            meta_mode: MetaMode::Vector,
            prior: None,
            layer1_states: StateCount::default(),
            layer2_states: StateCount::default(),
            fit: FitConfig::default(),
            min_segments: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::Config("t1 and t2 must be at least 1".into()));
        }
        if !(self.fit.tol >= 0.0 && self.fit.cov_floor > 0.0) {
            return Err(Error::Config("fit.tol must be >= 0 and fit.cov_floor > 0".into()));
        }
        if self.min_segments == 0 {
            return Err(Error::Config("min_segments must be at least 1".into()));
        }
        Ok(())
    }

    fn prior_for(&self, h: usize) -> Result<Vec<f64>> {
        let p = self.prior.clone().unwrap_or_else(|| vec![1.0 / h as f64; h]);
        validate_prior(&p, h)?;
        Ok(p)
    }
}

/// Fit summary of one constituent HMM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub n_states: usize,
    pub n_sequences: usize,
    pub fit: FitReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layer1: Vec<ModelReport>,
    pub layer2: Vec<ModelReport>,
}

impl TrainReport {
    /// Baum-Welch updates summed over layer 2.
    pub fn layer2_iterations(&self) -> usize {
        self.layer2.iter().map(|r| r.fit.iterations).sum()
    }

    /// All EM updates summed over layer 2, initializer included.
    pub fn layer2_total_iterations(&self) -> usize {
        self.layer2.iter().map(|r| r.fit.total_iterations()).sum()
    }
}

/// Raw feature sequences of each event, checked for a common width.
pub fn raw_sequences(events: &[Event]) -> Result<Vec<ObservationSequence>> {
    let seqs: Vec<ObservationSequence> = events
        .par_iter()
        .map(|e| scenario::extract_features(e).map(|f| f.raw))
        .collect::<Result<_>>()?;
    if let Some(first) = seqs.first() {
        if let Some(bad) = seqs.iter().position(|s| s.feature_dim() != first.feature_dim()) {
            return Err(Error::invalid(format!(
                "event {} has {} raw features, expected {}",
                events[bad].id,
                seqs[bad].feature_dim(),
                first.feature_dim()
            )));
        }
    }
    Ok(seqs)
}

fn stage_segments(
    entry: &StageEntry,
    events: &[Event],
    raw: &[ObservationSequence],
    min_segments: usize,
) -> Result<Vec<ObservationSequence>> {
    let mut segs = Vec::new();
    for (ev, seq) in events.iter().zip(raw) {
        if !entry.situations.contains(&ev.situation) {
            continue;
        }
        let (a, b) = ev.stage_range(entry.stage).ok_or_else(|| Error::Roster {
            entry: entry.label.clone(),
            reason: format!("event {} has no stage boundaries", ev.id),
        })?;
        if b > a {
            segs.push(seq.slice(a, b)?);
        }
    }
    if segs.len() < min_segments.max(1) {
        return Err(Error::Roster {
            entry: entry.label.clone(),
            reason: format!("{} training segments, need at least {}", segs.len(), min_segments.max(1)),
        });
    }
    Ok(segs)
}

fn fit_one(
    label: &str,
    seqs: &[ObservationSequence],
    states: &StateCount,
    fit: &FitConfig,
    seed: u64,
) -> Result<(HmmParams, ModelReport)> {
    let k = states.choose(seqs, fit, seed).map_err(|e| Error::Roster {
        entry: label.to_string(),
        reason: e.to_string(),
    })?;
    let (model, report) = hmm::baum_welch_fit(seqs, k, fit, seed).map_err(|e| Error::Roster {
        entry: label.to_string(),
        reason: e.to_string(),
    })?;
    debug!("{label}: {k} states, {} iterations", report.iterations);
    Ok((
        model,
        ModelReport {
            label: label.to_string(),
            n_states: k,
            n_sequences: seqs.len(),
            fit: report,
        },
    ))
}

fn train_layer1(
    events: &[Event],
    raw: &[ObservationSequence],
    roster: &Roster,
    config: &TrainConfig,
) -> Result<(Vec<HmmParams>, Vec<ModelReport>)> {
    let names = scenario::state_feature_names(raw.first().is_some_and(|s| s.feature_dim() > 7));
    let fitted: Vec<(HmmParams, ModelReport)> = roster
        .layer1
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let segs = stage_segments(entry, events, raw, config.min_segments)?;
            let (mut m, r) = fit_one(&entry.label, &segs, &config.layer1_states, &config.fit, derive_seed(config.seed, i as u64))?;
            if names.len() == m.feature_dim() {
                m.set_schema(names.clone())?;
            }
            Ok((m, r))
        })
        .collect::<Result<_>>()?;
    Ok(fitted.into_iter().unzip())
}

fn meta_schema(roster: &Roster, mode: MetaMode, t1: usize, pass_through: &[String]) -> Vec<String> {
    let mut names = Vec::new();
    for e in &roster.layer1 {
        match mode {
            MetaMode::Vector => names.push(e.label.clone()),
            MetaMode::Matrix => names.extend((1..=t1).rev().map(|len| format!("{}@{len}", e.label))),
        }
    }
    names.extend(pass_through.iter().cloned());
    names
}

/// Complete-event meta-feature sequences grouped by layer-2 entry.
fn layer2_training_sets(
    layer1: &[HmmParams],
    events: &[Event],
    raw: &[ObservationSequence],
    roster: &Roster,
    config: &TrainConfig,
    extras: Option<&PassThrough>,
) -> Result<Vec<Vec<ObservationSequence>>> {
    let metas: Vec<(Situation, ObservationSequence)> = events
        .par_iter()
        .zip(raw)
        .enumerate()
        .filter(|(_, (_, seq))| seq.len() >= config.t1 + config.t2 - 1)
        .map(|(i, (ev, seq))| {
            let mut meta = build_meta_features(layer1, seq, config.t1, config.meta_mode)?;
            if let Some(x) = extras {
                meta = append_pass_through(&meta, &x.values[i])?;
            }
            Ok((ev.situation, meta.to_observations(seq.dt())?))
        })
        .collect::<Result<_>>()?;
    roster
        .layer2
        .iter()
        .map(|entry| {
            let set: Vec<ObservationSequence> = metas
                .iter()
                .filter(|(s, _)| *s == entry.situation)
                .map(|(_, m)| m.clone())
                .collect();
            if set.len() < config.min_segments {
                return Err(Error::Roster {
                    entry: entry.label.clone(),
                    reason: format!("{} training events, need at least {}", set.len(), config.min_segments),
                });
            }
            Ok(set)
        })
        .collect()
}

fn layer2_seed(config: &TrainConfig, j: usize) -> u64 {
    derive_seed(config.seed, 1000 + j as u64)
}

fn train_layer2_scratch(
    sets: &[Vec<ObservationSequence>],
    roster: &Roster,
    config: &TrainConfig,
    schema: &[String],
) -> Result<(Vec<HmmParams>, Vec<ModelReport>)> {
    let fitted: Vec<(HmmParams, ModelReport)> = roster
        .layer2
        .par_iter()
        .zip(sets)
        .enumerate()
        .map(|(j, (entry, seqs))| {
            let (mut m, r) = fit_one(&entry.label, seqs, &config.layer2_states, &config.fit, layer2_seed(config, j))?;
            m.set_schema(schema.to_vec())?;
            Ok((m, r))
        })
        .collect::<Result<_>>()?;
    Ok(fitted.into_iter().unzip())
}

fn check_training_events(events: &[Event], extras: Option<&PassThrough>) -> Result<()> {
    if events.is_empty() {
        return Err(Error::invalid("no training events"));
    }
    for e in events {
        if e.stage_boundaries.is_none() {
            return Err(Error::invalid(format!("event {} lacks stage boundaries", e.id)));
        }
    }
    if let Some(x) = extras {
        if x.values.len() != events.len() {
            return Err(Error::DimensionMismatch {
                expected: events.len(),
                got: x.values.len(),
            });
        }
    }
    Ok(())
}

/// Trains both layers: stage models on stage-segmented raw slices, then
/// situation models on complete-event meta-feature sequences.
pub fn train(events: &[Event], roster: &Roster, config: &TrainConfig) -> Result<(TlhmmModel, TrainReport)> {
    train_with_extras(events, None, roster, config)
}

pub fn train_with_extras(
    events: &[Event],
    extras: Option<&PassThrough>,
    roster: &Roster,
    config: &TrainConfig,
) -> Result<(TlhmmModel, TrainReport)> {
    config.validate()?;
    roster.validate()?;
    check_training_events(events, extras)?;
    let raw = raw_sequences(events)?;
    let (layer1, r1) = train_layer1(events, &raw, roster, config)?;
    let pass: Vec<String> = extras.map(|x| x.names.clone()).unwrap_or_default();
    let sets = layer2_training_sets(&layer1, events, &raw, roster, config, extras)?;
    let schema = meta_schema(roster, config.meta_mode, config.t1, &pass);
    let (layer2, r2) = train_layer2_scratch(&sets, roster, config, &schema)?;
    info!(
        "trained {} layer-1 and {} layer-2 models on {} events",
        layer1.len(),
        layer2.len(),
        events.len()
    );
    let model = TlhmmModel::new(
        roster.clone(),
        layer1,
        layer2,
        config.t1,
        config.t2,
        config.meta_mode,
        config.prior_for(roster.layer2.len())?,
        pass,
    )?;
    Ok((
        model,
        TrainReport {
            layer1: r1,
            layer2: r2,
        },
    ))
}

/// How layer 2 is obtained on the target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Frozen,
    Finetune,
    Scratch,
}

impl TransferMode {
    pub const ALL: [TransferMode; 3] = [TransferMode::Frozen, TransferMode::Finetune, TransferMode::Scratch];

    pub fn label(self) -> &'static str {
        match self {
            TransferMode::Frozen => "frozen",
            TransferMode::Finetune => "finetune",
            TransferMode::Scratch => "scratch",
        }
    }
}

impl std::str::FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "frozen" => Ok(TransferMode::Frozen),
            "finetune" => Ok(TransferMode::Finetune),
            "scratch" => Ok(TransferMode::Scratch),
            other => Err(Error::invalid(format!("unknown transfer mode {other:?}"))),
        }
    }
}

/// Retrains layer 1 on the target events and obtains layer 2 per `mode`.
/// The roster, prior and pass-through names come from `pretrained`; window
/// lengths and meta mode come from `config`.
pub fn transfer(
    pretrained: &TlhmmModel,
    target: &[Event],
    mode: TransferMode,
    config: &TrainConfig,
) -> Result<(TlhmmModel, TrainReport)> {
    config.validate()?;
    if !pretrained.pass_through.is_empty() {
        return Err(Error::invalid("transfer of models with pass-through columns needs target extras"));
    }
    check_training_events(target, None)?;
    let roster = &pretrained.roster;
    let new_meta_dim = config.meta_mode.row_width(roster.layer1.len(), config.t1);
    if mode != TransferMode::Scratch && new_meta_dim != pretrained.meta_dim() {
        return Err(Error::invalid(format!(
            "{} transfer needs the pretrained meta-feature width {}, but the target settings give {} \
             (layer-1 count or meta mode or T1 changed)",
            mode.label(),
            pretrained.meta_dim(),
            new_meta_dim
        )));
    }
    let raw = raw_sequences(target)?;
    let (layer1, r1) = train_layer1(target, &raw, roster, config)?;
    let (layer2, r2) = match mode {
        TransferMode::Frozen => {
            let reports = roster
                .layer2
                .iter()
                .zip(&pretrained.layer2)
                .map(|(e, m)| ModelReport {
                    label: e.label.clone(),
                    n_states: m.n_states(),
                    n_sequences: 0,
                    fit: FitReport {
                        iterations: 0,
                        log_likelihood_trace: Vec::new(),
                        converged: true,
                        init_iterations: 0,
                    },
                })
                .collect();
            (pretrained.layer2.clone(), reports)
        }
        TransferMode::Finetune => {
            let sets = layer2_training_sets(&layer1, target, &raw, roster, config, None)?;
            let fitted: Vec<(HmmParams, ModelReport)> = roster
                .layer2
                .par_iter()
                .zip(&pretrained.layer2)
                .zip(&sets)
                .map(|((e, init), seqs)| {
                    let (m, fit) = hmm::baum_welch_from(seqs, init.clone(), &config.fit).map_err(|err| Error::Roster {
                        entry: e.label.clone(),
                        reason: err.to_string(),
                    })?;
                    Ok((
                        m,
                        ModelReport {
                            label: e.label.clone(),
                            n_states: init.n_states(),
                            n_sequences: seqs.len(),
                            fit,
                        },
                    ))
                })
                .collect::<Result<_>>()?;
            fitted.into_iter().unzip()
        }
        TransferMode::Scratch => {
            let sets = layer2_training_sets(&layer1, target, &raw, roster, config, None)?;
            let schema = meta_schema(roster, config.meta_mode, config.t1, &[]);
            train_layer2_scratch(&sets, roster, config, &schema)?
        }
    };
    let model = TlhmmModel::new(
        roster.clone(),
        layer1,
        layer2,
        config.t1,
        config.t2,
        config.meta_mode,
        pretrained.prior.clone(),
        Vec::new(),
    )?;
    Ok((
        model,
        TrainReport {
            layer1: r1,
            layer2: r2,
        },
    ))
}
