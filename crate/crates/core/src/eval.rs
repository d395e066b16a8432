//! Verification scoring: mean cosine over 10×10 segment pairs, EER and
//! normalized minimum detection cost.
//!
//! A trial is accepted when its score is at least the threshold. Operating
//! points are taken at every distinct score plus a reject-all point above
//! the largest score.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{
    load_wav, log_mel, normalize_per_freq, sample_segments, MelSpectrogram, SegmentMode, EVAL_SEGMENTS,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { c_miss: 1.0, c_fa: 1.0, p_target: 0.05 }
    }
}

impl DcfParams {
    fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Parameter(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }

    /// Cost of the better trivial system.
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub target: bool,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub min_dcf_normalized: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let eer = compute_eer(&scores, &labels)?;
        let min_dcf_normalized = compute_min_dcf(&scores, &labels, &DcfParams::default())?;
        Ok(Self { eer, min_dcf_normalized, scores, labels })
    }

    /// `EER=… minDCF=…`
    pub fn summary(&self) -> String {
        format!("EER={:.6} minDCF={:.6}", self.eer, self.min_dcf_normalized)
    }

    /// One `trial_index\tscore\tlabel` line per trial.
    pub fn score_lines(&self) -> String {
        let mut out = String::new();
        for (i, (s, l)) in self.scores.iter().zip(&self.labels).enumerate() {
            writeln!(out, "{i}\t{s}\t{}", u8::from(*l)).expect("string write");
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::NumericGuard("cosine of a zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean of the 100 cosine similarities between two sets of 10 embeddings.
pub fn pair_score(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != EVAL_SEGMENTS || b.len() != EVAL_SEGMENTS {
        return Err(Error::Contract(format!(
            "pair scoring needs {EVAL_SEGMENTS} embeddings per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            if x.numel() != y.numel() {
                return Err(Error::Dimension("embedding sizes differ".into()));
            }
            sum += cosine(x.data(), y.data())?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// `(FAR, FRR)` at every distinct score in ascending order, then reject-all.
fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::Data(format!("need both classes, got {n_tar} targets and {n_non} nontargets")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        points.push(((n_non - non_below) as f64 / n_non as f64, tar_below as f64 / n_tar as f64));
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));
    Ok(points)
}

/// FAR = FRR crossing of the operating curve, linearly interpolated between
/// the two neighbouring operating points.
pub(crate) fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    let mut prev = points[0];
    for &(far, frr) in points {
        let d = frr - far;
        if d >= 0.0 {
            let d_prev = prev.1 - prev.0;
            if d == 0.0 || d_prev >= 0.0 {
                return far;
            }
            let lambda = d_prev / (d_prev - d);
            return prev.0 + lambda * (far - prev.0);
        }
        prev = (far, frr);
    }
    unreachable!("the reject-all point has FRR = 1 and FAR = 0")
}

pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_points(&operating_points(scores, labels)?))
}

/// Minimum normalized detection cost over all operating points.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let raw = operating_points(scores, labels)?
        .into_iter()
        .map(|(far, frr)| p.c_miss * frr * p.p_target + p.c_fa * far * (1.0 - p.p_target))
        .fold(f64::INFINITY, f64::min);
    Ok(raw / p.normalizer())
}

/// Reads `label path_a path_b` lines with label `1` (target) or `0`.
pub fn load_trial_list(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path)?;
    parse_trial_list(&text, path)
}

pub fn parse_trial_list(text: &str, path: &Path) -> Result<Vec<TrialRecord>> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let &[label, a, b] = fields.as_slice() else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
        };
        trials.push(TrialRecord { target, path_a: a.into(), path_b: b.into() });
    }
    Ok(trials)
}

/// Normalized log-mel features of the ten evaluation segments of `wav`.
pub fn eval_features(wav: &Path) -> Result<Vec<MelSpectrogram>> {
    let wave = load_wav(wav)?;
    sample_segments(&wave, SegmentMode::Eval, 0).iter().map(|seg| normalize_per_freq(&log_mel(seg)?)).collect()
}

/// The ten segment embeddings of one utterance.
pub fn segment_embeddings(model: &Model, wav: &Path) -> Result<Vec<Tensor>> {
    let feats = eval_features(wav)?;
    let refs: Vec<&MelSpectrogram> = feats.iter().collect();
    let batch = model.embed_batch(&refs)?;
    let d = batch.shape()[1];
    batch.data().chunks_exact(d).map(|row| Tensor::new([d], row.to_vec())).collect()
}

/// Scores every trial, resolving paths against `root`. Each distinct
/// utterance is embedded once.
pub fn evaluate(model: &Model, root: &Path, trials: &[TrialRecord]) -> Result<EvalReport> {
    let mut cache: HashMap<PathBuf, Vec<Tensor>> = HashMap::new();
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        for p in [&t.path_a, &t.path_b] {
            if !cache.contains_key(p) {
                let embs = segment_embeddings(model, &root.join(p))?;
                cache.insert(p.clone(), embs);
            }
        }
        scores.push(pair_score(&cache[&t.path_a], &cache[&t.path_b])?);
    }
    EvalReport::from_scores(scores, trials.iter().map(|t| t.target).collect())
}
