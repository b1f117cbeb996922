//! From raw subject ratings to mean opinion scores.
//!
//! Steps, each per metric channel:
//! 1. outlier screening of subjects (ITU-R BT.500 kurtosis/exceedance rule);
//! 2. per-subject z-normalization `Z = (S − μ) / σ` with the sample standard deviation;
//! 3. rescaling `Ẑ = clamp((Z + 3)·100/6, 0, 100)`;
//! 4. MOS as the mean of `Ẑ` over the retained subjects.
//!
//! A subject rejected in any channel is dropped from all channels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{plcc, srcc, CorrelationError};
use crate::head::Metric;

/// Minimum PLCC and SRCC a rater must exceed before formal annotation.
pub const RELIABILITY_THRESHOLD: f64 = 0.7;

/// Screening with fewer subjects than this is flagged as low-power.
pub const LOW_POWER_SUBJECTS: usize = 8;

#[derive(Debug, Error)]
pub enum SubjectiveError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: score {score} is outside [0, 100]")]
    ScoreOutOfRange { line: usize, score: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("subject {subject} gives constant {metric} scores; normalization is undefined")]
    DegenerateRater { subject: String, metric: Metric },
    #[error("no ratings for {metric} on triplets: {}", triplet_ids.join(", "))]
    MissingData {
        metric: Metric,
        triplet_ids: Vec<String>,
    },
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One subject's raw score for one triplet and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject_id: String,
    pub triplet_id: String,
    pub metric: Metric,
    pub raw_score: f64,
    #[serde(default)]
    pub timestamp: u64,
}

/// The three scores submitted together for one triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub subject_id: String,
    pub triplet_id: String,
    pub vmc: f64,
    pub vbd: f64,
    pub oq: f64,
    #[serde(default)]
    pub timestamp: u64,
}

impl RatingSubmission {
    pub fn records(&self) -> [RatingRecord; 3] {
        let rec = |metric, raw_score| RatingRecord {
            subject_id: self.subject_id.clone(),
            triplet_id: self.triplet_id.clone(),
            metric,
            raw_score,
            timestamp: self.timestamp,
        };
        [
            rec(Metric::Vmc, self.vmc),
            rec(Metric::Vbd, self.vbd),
            rec(Metric::Oq, self.oq),
        ]
    }
}

/// A line of the rating log: a single-metric record or a three-metric submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Record(RatingRecord),
    Submission(RatingSubmission),
}

type RatingKey = (String, String, Metric);

/// Ratings with at most one score per (subject, triplet, metric); later lines win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingLog {
    scores: BTreeMap<RatingKey, f64>,
}

impl RatingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: &RatingRecord) {
        self.scores.insert(
            (
                record.subject_id.clone(),
                record.triplet_id.clone(),
                record.metric,
            ),
            record.raw_score,
        );
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RatingRecord>) -> Self {
        let mut log = RatingLog::new();
        for r in records {
            log.insert(r);
        }
        log
    }

    /// Parses JSONL text. Blank lines are skipped; line numbers in errors are 1-based.
    pub fn parse_jsonl(text: &str) -> Result<Self, SubjectiveError> {
        let mut log = RatingLog::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine =
                serde_json::from_str(line).map_err(|e| SubjectiveError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let records: Vec<RatingRecord> = match parsed {
                LogLine::Record(r) => vec![r],
                LogLine::Submission(s) => s.records().to_vec(),
            };
            for r in &records {
                if !(0.0..=100.0).contains(&r.raw_score) {
                    return Err(SubjectiveError::ScoreOutOfRange {
                        line: line_no,
                        score: r.raw_score,
                    });
                }
                log.insert(r);
            }
        }
        Ok(log)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, subject: &str, triplet: &str, metric: Metric) -> Option<f64> {
        self.scores
            .get(&(subject.to_string(), triplet.to_string(), metric))
            .copied()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.scores.keys().map(|(s, _, _)| s.clone()).collect()
    }

    pub fn triplets(&self) -> BTreeSet<String> {
        self.scores.keys().map(|(_, t, _)| t.clone()).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &str, Metric, f64)> {
        self.scores
            .iter()
            .map(|((s, t, m), &v)| (s.as_str(), t.as_str(), *m, v))
    }

    /// Scores of one channel as subject → (triplet → score).
    pub fn channel(&self, metric: Metric) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for ((s, t, m), &v) in &self.scores {
            if *m == metric {
                out.entry(s.clone()).or_default().insert(t.clone(), v);
            }
        }
        out
    }

    /// Drops every rating of the given subjects.
    pub fn without_subjects(&self, rejected: &BTreeSet<String>) -> RatingLog {
        RatingLog {
            scores: self
                .scores
                .iter()
                .filter(|((s, _, _), _)| !rejected.contains(s))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Exceedance counts of one subject in one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScreening {
    pub subject_id: String,
    pub metric: Metric,
    /// Ratings above the upper bound.
    pub above: usize,
    /// Ratings below the lower bound.
    pub below: usize,
    pub images: usize,
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub kept: Vec<String>,
    pub rejected: Vec<String>,
    pub details: Vec<SubjectScreening>,
    /// Fewer than [`LOW_POWER_SUBJECTS`] subjects: the kurtosis test is weak.
    pub low_power: bool,
}

struct ImageStats {
    mean: f64,
    std: f64,
    kurtosis: f64,
}

fn image_stats(values: &[f64]) -> ImageStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) } else { 3.0 };
    ImageStats {
        mean,
        std,
        kurtosis,
    }
}

/// Screens one channel; returns per-subject exceedance counts.
fn screen_channel(log: &RatingLog, metric: Metric) -> Vec<SubjectScreening> {
    let channel = log.channel(metric);
    let mut by_image: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ratings in channel.values() {
        for (t, &v) in ratings {
            by_image.entry(t.as_str()).or_default().push(v);
        }
    }
    let bounds: BTreeMap<&str, (f64, f64)> = by_image
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&t, v)| {
            let s = image_stats(v);
            let width = if (2.0..=4.0).contains(&s.kurtosis) {
                2.0
            } else {
                20f64.sqrt()
            };
            (t, (s.mean - width * s.std, s.mean + width * s.std))
        })
        .collect();

    channel
        .iter()
        .map(|(subject, ratings)| {
            let (mut above, mut below) = (0, 0);
            for (t, &v) in ratings {
                if let Some(&(lo, hi)) = bounds.get(t.as_str()) {
                    if v > hi {
                        above += 1;
                    } else if v < lo {
                        below += 1;
                    }
                }
            }
            let images = ratings.len();
            let total = above + below;
            let rejected = total > 0
                && total as f64 / images as f64 > 0.05
                && (above as f64 - below as f64).abs() / (total as f64) < 0.3;
            SubjectScreening {
                subject_id: subject.clone(),
                metric,
                above,
                below,
                images,
                rejected,
            }
        })
        .collect()
}

/// BT.500 subject screening over all three channels.
pub fn screen_subjects(log: &RatingLog) -> Result<ScreeningReport, SubjectiveError> {
    let subjects = log.subjects();
    if subjects.len() < 2 {
        return Err(SubjectiveError::InsufficientData(format!(
            "screening needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    let triplets = log.triplets();
    if triplets.len() < 2 {
        return Err(SubjectiveError::InsufficientData(format!(
            "screening needs at least 2 images, found {}",
            triplets.len()
        )));
    }
    let details: Vec<SubjectScreening> = Metric::ALL
        .iter()
        .flat_map(|&m| screen_channel(log, m))
        .collect();
    let rejected: BTreeSet<String> = details
        .iter()
        .filter(|d| d.rejected)
        .map(|d| d.subject_id.clone())
        .collect();
    Ok(ScreeningReport {
        kept: subjects
            .iter()
            .filter(|s| !rejected.contains(*s))
            .cloned()
            .collect(),
        rejected: rejected.into_iter().collect(),
        details,
        low_power: subjects.len() < LOW_POWER_SUBJECTS,
    })
}

/// Mean and sample standard deviation of one subject in one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectStats {
    pub mean: f64,
    pub std: f64,
}

impl SubjectStats {
    /// `None` when fewer than two scores are given.
    pub fn of(scores: &[f64]) -> Option<Self> {
        if scores.len() < 2 {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(SubjectStats {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Z-scores of one subject's ratings. Constant raters are an error.
pub fn normalize_subject(scores: &[f64]) -> Option<Vec<f64>> {
    let stats = SubjectStats::of(scores)?;
    if stats.std <= 0.0 {
        return None;
    }
    Some(
        scores
            .iter()
            .map(|s| (s - stats.mean) / stats.std)
            .collect(),
    )
}

/// Maps a z-score onto `[0, 100]`, taking ±3σ to the ends of the range.
pub fn rescale(z: f64) -> f64 {
    ((z + 3.0) * 100.0 / 6.0).clamp(0.0, 100.0)
}

/// Per-triplet MOS for the three metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub triplet_id: String,
    pub mos_vmc: f64,
    pub mos_vbd: f64,
    pub mos_oq: f64,
    pub n_subjects: usize,
}

impl MosRecord {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Vmc => self.mos_vmc,
            Metric::Vbd => self.mos_vbd,
            Metric::Oq => self.mos_oq,
        }
    }
}

/// Rescaled scores `Ẑ` as subject → triplet → value, one map per metric.
pub type RescaledTable = [BTreeMap<String, BTreeMap<String, f64>>; 3];

/// Normalizes and rescales every subject of every channel.
pub fn rescaled_table(log: &RatingLog) -> Result<RescaledTable, SubjectiveError> {
    let mut out: RescaledTable = Default::default();
    for metric in Metric::ALL {
        for (subject, ratings) in log.channel(metric) {
            let values: Vec<f64> = ratings.values().copied().collect();
            let z = normalize_subject(&values).ok_or_else(|| SubjectiveError::DegenerateRater {
                subject: subject.clone(),
                metric,
            })?;
            let rescaled = ratings
                .keys()
                .cloned()
                .zip(z.into_iter().map(rescale))
                .collect();
            out[metric.index()].insert(subject, rescaled);
        }
    }
    Ok(out)
}

/// Averages `Ẑ` over subjects for every triplet that appears in any channel.
pub fn mos(table: &RescaledTable) -> Result<Vec<MosRecord>, SubjectiveError> {
    let triplets: BTreeSet<&String> = table
        .iter()
        .flat_map(|c| c.values().flat_map(|r| r.keys()))
        .collect();
    let mut sums: [BTreeMap<&str, (f64, usize)>; 3] = Default::default();
    let mut contributors: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for metric in Metric::ALL {
        for (subject, ratings) in &table[metric.index()] {
            for (t, &v) in ratings {
                let e = sums[metric.index()].entry(t.as_str()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
                contributors
                    .entry(t.as_str())
                    .or_default()
                    .insert(subject.as_str());
            }
        }
    }
    for metric in Metric::ALL {
        let missing: Vec<String> = triplets
            .iter()
            .filter(|t| !sums[metric.index()].contains_key(t.as_str()))
            .map(|t| t.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(SubjectiveError::MissingData {
                metric,
                triplet_ids: missing,
            });
        }
    }
    Ok(triplets
        .into_iter()
        .map(|t| {
            let m = |metric: Metric| {
                let (s, n) = sums[metric.index()][t.as_str()];
                s / n as f64
            };
            MosRecord {
                triplet_id: t.clone(),
                mos_vmc: m(Metric::Vmc),
                mos_vbd: m(Metric::Vbd),
                mos_oq: m(Metric::Oq),
                n_subjects: contributors[t.as_str()].len(),
            }
        })
        .collect())
}

/// Compares the record count with subjects × triplets × 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountCheck {
    pub subjects: usize,
    pub triplets: usize,
    pub expected: usize,
    pub actual: usize,
    /// Up to the first 20 missing (subject, triplet, metric) cells.
    pub gaps: Vec<(String, String, Metric)>,
}

impl CountCheck {
    pub fn complete(&self) -> bool {
        self.expected == self.actual
    }
}

pub fn count_check(log: &RatingLog) -> CountCheck {
    let subjects = log.subjects();
    let triplets = log.triplets();
    let mut gaps = Vec::new();
    'outer: for s in &subjects {
        for t in &triplets {
            for m in Metric::ALL {
                if log.get(s, t, m).is_none() {
                    gaps.push((s.clone(), t.clone(), m));
                    if gaps.len() == 20 {
                        break 'outer;
                    }
                }
            }
        }
    }
    CountCheck {
        subjects: subjects.len(),
        triplets: triplets.len(),
        expected: subjects.len() * triplets.len() * 3,
        actual: log.len(),
        gaps,
    }
}

/// Result of the full pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct MosOutcome {
    pub records: Vec<MosRecord>,
    pub screening: ScreeningReport,
    pub counts: CountCheck,
}

/// screen → normalize → rescale → MOS.
pub fn compute_mos(log: &RatingLog) -> Result<MosOutcome, SubjectiveError> {
    let counts = count_check(log);
    let screening = screen_subjects(log)?;
    let rejected: BTreeSet<String> = screening.rejected.iter().cloned().collect();
    let kept = log.without_subjects(&rejected);
    let table = rescaled_table(&kept)?;
    let records = mos(&table)?;
    Ok(MosOutcome {
        records,
        screening,
        counts,
    })
}

pub const MOS_CSV_HEADER: &str = "triplet_id,mos_vmc,mos_vbd,mos_oq,n_subjects";

/// Writes MOS records as CSV. Values use the shortest round-trip decimal form.
pub fn write_mos_csv<W: Write>(records: &[MosRecord], out: W) -> Result<(), SubjectiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MOS_CSV_HEADER.split(','))
        .map_err(|e| SubjectiveError::Io(e.into()))?;
    for r in records {
        w.write_record([
            r.triplet_id.clone(),
            r.mos_vmc.to_string(),
            r.mos_vbd.to_string(),
            r.mos_oq.to_string(),
            r.n_subjects.to_string(),
        ])
        .map_err(|e| SubjectiveError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of the calibration check of one rater.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub plcc: f64,
    pub srcc: f64,
    pub passed: bool,
}

/// Passes when both PLCC and SRCC against the reference exceed [`RELIABILITY_THRESHOLD`].
pub fn reliability_gate(rater: &[f64], reference: &[f64]) -> Result<GateResult, SubjectiveError> {
    if rater.len() < 3 {
        return Err(SubjectiveError::InsufficientData(format!(
            "reliability needs at least 3 paired scores, got {}",
            rater.len()
        )));
    }
    let p = plcc(rater, reference)?;
    let s = srcc(rater, reference)?;
    Ok(GateResult {
        plcc: p,
        srcc: s,
        passed: p > RELIABILITY_THRESHOLD && s > RELIABILITY_THRESHOLD,
    })
}
