//! Phoneme-level analysis of attention weights.
//!
//! Time bins of every dynamic layer are labelled with the phoneme group of
//! the segment containing the bin's center sample, projected with PCA, and
//! scored with a Fisher-style dispersion ratio
//! `trace(S_between) / trace(S_within)`.
//!
//! Phone groups (TIMIT codes):
//!
//! | group | codes |
//! |---|---|
//! | vowels | iy ih eh ey ae aa aw ay ah ao oy ow uh uw ux er ax ix axr ax-h |
//! | semivowels_glides | l r w y hh hv el |
//! | nasals | m n ng em en eng nx |
//! | fricatives_affricates | s sh z zh f th v dh jh ch |
//! | stops | b d g p t k dx |
//! | closures | bcl dcl gcl pcl tcl kcl h# |
//! | other | pau epi q |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::audio::{load_wav, log_mel, normalize_per_freq, Corpus, FRAME_HOP};
use crate::dynconv::AttentionMap;
use crate::error::{Error, Result};
use crate::model::{embed_frames, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhonemeGroup {
    Vowels,
    SemivowelsGlides,
    Nasals,
    FricativesAffricates,
    Stops,
    Closures,
    Other,
}

impl PhonemeGroup {
    pub const ALL: [PhonemeGroup; 7] = [
        PhonemeGroup::Vowels,
        PhonemeGroup::SemivowelsGlides,
        PhonemeGroup::Nasals,
        PhonemeGroup::FricativesAffricates,
        PhonemeGroup::Stops,
        PhonemeGroup::Closures,
        PhonemeGroup::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhonemeGroup::Vowels => "vowels",
            PhonemeGroup::SemivowelsGlides => "semivowels_glides",
            PhonemeGroup::Nasals => "nasals",
            PhonemeGroup::FricativesAffricates => "fricatives_affricates",
            PhonemeGroup::Stops => "stops",
            PhonemeGroup::Closures => "closures",
            PhonemeGroup::Other => "other",
        }
    }
}

impl fmt::Display for PhonemeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const TABLE: &[(PhonemeGroup, &[&str])] = &[
    (
        PhonemeGroup::Vowels,
        &[
            "iy", "ih", "eh", "ey", "ae", "aa", "aw", "ay", "ah", "ao", "oy", "ow", "uh", "uw", "ux", "er", "ax", "ix",
            "axr", "ax-h",
        ],
    ),
    (PhonemeGroup::SemivowelsGlides, &["l", "r", "w", "y", "hh", "hv", "el"]),
    (PhonemeGroup::Nasals, &["m", "n", "ng", "em", "en", "eng", "nx"]),
    (PhonemeGroup::FricativesAffricates, &["s", "sh", "z", "zh", "f", "th", "v", "dh", "jh", "ch"]),
    (PhonemeGroup::Stops, &["b", "d", "g", "p", "t", "k", "dx"]),
    (PhonemeGroup::Closures, &["bcl", "dcl", "gcl", "pcl", "tcl", "kcl", "h#"]),
    (PhonemeGroup::Other, &["pau", "epi", "q"]),
];

/// All phone codes with a table entry.
pub fn known_phones() -> impl Iterator<Item = (&'static str, PhonemeGroup)> {
    TABLE.iter().flat_map(|(g, codes)| codes.iter().map(move |c| (*c, *g)))
}

/// Group of a phone code; unknown codes map to `Other` with a warning.
pub fn phoneme_group_of(label: &str) -> PhonemeGroup {
    match known_phones().find(|(c, _)| *c == label) {
        Some((_, g)) => g,
        None => {
            log::warn!("unknown phone code {label:?}, using group other");
            PhonemeGroup::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSegment {
    pub start_sample: usize,
    pub end_sample: usize,
    pub label: String,
    pub group: PhonemeGroup,
}

pub fn parse_phn(path: &Path) -> Result<Vec<PhonemeSegment>> {
    parse_phn_text(&fs::read_to_string(path)?, path)
}

/// Parses `start end label` lines; segments must be ordered and disjoint.
pub fn parse_phn_text(text: &str, path: &Path) -> Result<Vec<PhonemeSegment>> {
    let mut segments: Vec<PhonemeSegment> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let &[start, end, label] = fields.as_slice() else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let start: usize = start.parse().map_err(|_| err(format!("bad start {start:?}")))?;
        let end: usize = end.parse().map_err(|_| err(format!("bad end {end:?}")))?;
        if start >= end {
            return Err(err(format!("empty segment {start}..{end}")));
        }
        if let Some(prev) = segments.last() {
            if start < prev.end_sample {
                return Err(err(format!("segment starts at {start}, before the previous end {}", prev.end_sample)));
            }
        }
        segments.push(PhonemeSegment {
            start_sample: start,
            end_sample: end,
            label: label.to_string(),
            group: phoneme_group_of(label),
        });
    }
    Ok(segments)
}

/// Segment containing `sample`, with half-open `[start, end)` intervals.
fn segment_at(segments: &[PhonemeSegment], sample: usize) -> Option<&PhonemeSegment> {
    let i = segments.partition_point(|s| s.end_sample <= sample);
    segments.get(i).filter(|s| s.start_sample <= sample)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedAttention {
    pub layer_id: usize,
    pub time_bin: usize,
    pub attention: Vec<f64>,
    pub group: PhonemeGroup,
    pub speaker_id: String,
}

/// Labels bin `t` of a layer with cumulative stride `s` by the phoneme
/// containing the center of samples `[t·s·160, (t+1)·s·160)`. Bins whose
/// center falls outside every segment are dropped.
pub fn align_attention(
    maps: &BTreeMap<usize, AttentionMap>,
    segments: &[PhonemeSegment],
    strides: &BTreeMap<usize, usize>,
    frames: usize,
    speaker_id: &str,
) -> Result<Vec<AlignedAttention>> {
    let mut out = Vec::new();
    for (&layer, map) in maps {
        let &s = strides.get(&layer).ok_or_else(|| Error::Alignment(format!("no stride for layer {layer}")))?;
        if s == 0 || map.time_bins() != frames.div_ceil(s) {
            return Err(Error::Alignment(format!(
                "layer {layer}: {} bins, stride {s} over {frames} frames",
                map.time_bins()
            )));
        }
        for t in 0..map.time_bins() {
            let center = t * s * FRAME_HOP + s * FRAME_HOP / 2;
            if let Some(seg) = segment_at(segments, center) {
                out.push(AlignedAttention {
                    layer_id: layer,
                    time_bin: t,
                    attention: map.column(t),
                    group: seg.group,
                    speaker_id: speaker_id.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    /// Variance along the two components, largest first.
    pub explained: [f64; 2],
    pub total_variance: f64,
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// Projects onto the top two principal axes of the sample covariance.
/// Each axis is signed so that its largest-magnitude entry is positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<PcaProjection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 points, got {n}")));
    }
    let k = points[0].len();
    if k < 2 || points.iter().any(|p| p.len() != k) {
        return Err(Error::Dimension("PCA needs equal-length points with at least 2 coordinates".into()));
    }
    let mut mean = vec![0.0; k];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for p in points {
        for a in 0..k {
            let da = p[a] - mean[a];
            for b in 0..k {
                cov[(a, b)] += da * (p[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let total_variance = cov.trace();
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if !(total_variance > 1e-24 * scale) {
        return Err(Error::DegenerateData("all points coincide".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let component = |idx: usize| -> Vec<f64> {
        let v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let components = [component(order[0]), component(order[1])];
    let explained = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
    let projected = points
        .iter()
        .map(|p| {
            let proj = |c: &[f64]| p.iter().zip(&mean).zip(c).map(|((x, m), w)| (x - m) * w).sum();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(PcaProjection { points: projected, explained, total_variance, components, mean })
}

/// Minimum points for a group to enter the dispersion ratio.
pub const MIN_GROUP_POINTS: usize = 5;

/// Between-group over within-group scatter trace of the attention vectors of
/// `layer_id`. Groups with fewer than [`MIN_GROUP_POINTS`] points are left out;
/// at least two groups must remain.
pub fn group_dispersion(aligned: &[AlignedAttention], layer_id: usize) -> Result<f64> {
    let mut groups: BTreeMap<PhonemeGroup, Vec<&[f64]>> = BTreeMap::new();
    for a in aligned.iter().filter(|a| a.layer_id == layer_id) {
        groups.entry(a.group).or_default().push(&a.attention);
    }
    let counts: Vec<String> = groups.iter().map(|(g, v)| format!("{g}={}", v.len())).collect();
    groups.retain(|_, v| v.len() >= MIN_GROUP_POINTS);
    if groups.len() < 2 {
        return Err(Error::Data(format!(
            "layer {layer_id} needs 2 groups with at least {MIN_GROUP_POINTS} points, have [{}]",
            counts.join(", ")
        )));
    }
    let k = groups.values().next().expect("nonempty")[0].len();
    let mean_of = |pts: &[&[f64]]| -> Vec<f64> {
        let mut m = vec![0.0; k];
        for p in pts {
            for (a, v) in m.iter_mut().zip(p.iter()) {
                *a += v / pts.len() as f64;
            }
        }
        m
    };
    let all: Vec<&[f64]> = groups.values().flatten().copied().collect();
    let grand = mean_of(&all);
    let (mut between, mut within) = (0.0, 0.0);
    for pts in groups.values() {
        let mu = mean_of(pts);
        between += pts.len() as f64 * mu.iter().zip(&grand).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        for p in pts {
            within += p.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    if within <= 0.0 {
        return Err(Error::DegenerateData(format!("layer {layer_id} has no within-group scatter")));
    }
    Ok(between / within)
}

/// First, middle and last dynamic layer.
pub fn default_layers(model: &Model) -> Vec<usize> {
    let ids: Vec<usize> = model.dynamic_layers().iter().map(|l| l.layer_id).collect();
    if ids.is_empty() {
        return ids;
    }
    let picks: BTreeSet<usize> = [ids[0], ids[(ids.len() - 1) / 2], ids[ids.len() - 1]].into();
    picks.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub layers: Vec<usize>,
    /// Dispersion ratio per layer: pooled, or the mean over speakers when split.
    pub dispersion: BTreeMap<usize, f64>,
    /// `(layer, speaker)` ratios when split by speaker.
    pub speaker_dispersion: BTreeMap<(usize, String), f64>,
    /// Total attention variance per `(speaker, layer)`.
    pub speaker_variance: BTreeMap<(String, usize), f64>,
    pub files: Vec<PathBuf>,
}

fn phn_path(wav: &Path) -> PathBuf {
    wav.with_extension("phn")
}

fn join_f64(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn total_variance(rows: &[&AlignedAttention]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let k = rows[0].attention.len();
    let n = rows.len() as f64;
    (0..k)
        .map(|j| {
            let mean = rows.iter().map(|r| r.attention[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r.attention[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum()
}

/// Runs every labelled utterance of `corpus` through `model` and writes, into
/// `out_dir`:
///
/// - `attention_layer<L>.csv`: `speaker,group,time_bin,pi_1..pi_K,pc1,pc2`
/// - `frames/<speaker>_<utterance>.csv`: `time_bin,group,e_1..e_D`
/// - `dispersion.csv`: `layer,speaker,ratio`
/// - `speaker_variance.csv`: `speaker,layer,total_variance`
///
/// Everything is computed before the first file is written.
pub fn export_analysis(
    model: &Model,
    corpus: &Corpus,
    layers: &[usize],
    per_speaker: bool,
    out_dir: &Path,
) -> Result<AnalysisReport> {
    let dynamic = model.dynamic_layers();
    if dynamic.is_empty() {
        return Err(Error::UnsupportedMode("phoneme analysis needs a dy or tdy model".into()));
    }
    let strides: BTreeMap<usize, usize> = dynamic.iter().map(|l| (l.layer_id, l.time_stride)).collect();
    let layers: Vec<usize> = if layers.is_empty() { default_layers(model) } else { layers.to_vec() };
    if let Some(bad) = layers.iter().find(|l| !strides.contains_key(l)) {
        return Err(Error::Parameter(format!("layer {bad} is not a dynamic layer (have 0..{})", dynamic.len())));
    }
    let frame_stride = model.frame_stride();

    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let mut aligned = Vec::new();
    for spk in &corpus.speakers {
        for utt in &spk.utterances {
            let wav = corpus.resolve(utt);
            let segments = parse_phn(&phn_path(&wav))?;
            let mel = normalize_per_freq(&log_mel(&load_wav(&wav)?)?)?;
            let out = embed_frames(model, &mel)?;
            let maps: BTreeMap<usize, AttentionMap> =
                out.attention.into_iter().filter(|(id, _)| layers.contains(id)).collect();
            aligned.extend(align_attention(&maps, &segments, &strides, mel.frames(), &spk.id)?);

            let (d, t) = (out.frames.shape()[0], out.frames.shape()[1]);
            let mut csv = String::from("time_bin,group");
            for j in 1..=d {
                write!(csv, ",e_{j}").expect("string write");
            }
            csv.push('\n');
            for ti in 0..t {
                let center = ti * frame_stride * FRAME_HOP + frame_stride * FRAME_HOP / 2;
                let group = segment_at(&segments, center).map_or("none", |s| s.group.name());
                let row = join_f64((0..d).map(|di| out.frames.at(&[di, ti])));
                writeln!(csv, "{ti},{group},{row}").expect("string write");
            }
            let stem = utt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            files.push((PathBuf::from("frames").join(format!("{}_{stem}.csv", spk.id)), csv));
        }
    }

    let speakers: Vec<String> = corpus.speakers.iter().map(|s| s.id.clone()).collect();
    let mut dispersion = BTreeMap::new();
    let mut speaker_dispersion = BTreeMap::new();
    let mut speaker_variance = BTreeMap::new();
    let mut summary = String::from("layer,speaker,ratio\n");
    for &layer in &layers {
        let rows: Vec<&AlignedAttention> = aligned.iter().filter(|a| a.layer_id == layer).collect();
        let k = rows.first().map_or(0, |r| r.attention.len());
        let mut csv = String::from("speaker,group,time_bin");
        for j in 1..=k {
            write!(csv, ",pi_{j}").expect("string write");
        }
        csv.push_str(",pc1,pc2\n");
        let subsets: Vec<(String, Vec<&AlignedAttention>)> = if per_speaker {
            speakers
                .iter()
                .map(|s| (s.clone(), rows.iter().copied().filter(|r| &r.speaker_id == s).collect()))
                .collect()
        } else {
            vec![("all".to_string(), rows.clone())]
        };
        let mut ratios = Vec::new();
        for (who, subset) in &subsets {
            if subset.is_empty() {
                continue;
            }
            let pts: Vec<Vec<f64>> = subset.iter().map(|r| r.attention.clone()).collect();
            let projected = pca_project(&pts)?;
            for (r, pc) in subset.iter().zip(&projected.points) {
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    r.speaker_id,
                    r.group,
                    r.time_bin,
                    join_f64(r.attention.iter().copied()),
                    pc[0],
                    pc[1]
                )
                .expect("string write");
            }
            let owned: Vec<AlignedAttention> = subset.iter().map(|r| (*r).clone()).collect();
            match group_dispersion(&owned, layer) {
                Ok(ratio) => {
                    writeln!(summary, "{layer},{who},{ratio}").expect("string write");
                    ratios.push(ratio);
                    if per_speaker {
                        speaker_dispersion.insert((layer, who.clone()), ratio);
                    }
                }
                Err(Error::Data(msg)) => log::warn!("skipping {who} at layer {layer}: {msg}"),
                Err(e) => return Err(e),
            }
        }
        if ratios.is_empty() {
            return Err(Error::Data(format!("no speaker has enough labelled bins at layer {layer}")));
        }
        dispersion.insert(layer, ratios.iter().sum::<f64>() / ratios.len() as f64);
        files.push((PathBuf::from(format!("attention_layer{layer}.csv")), csv));
        for s in &speakers {
            let own: Vec<&AlignedAttention> = rows.iter().copied().filter(|r| &r.speaker_id == s).collect();
            speaker_variance.insert((s.clone(), layer), total_variance(&own));
        }
    }
    files.push(("dispersion.csv".into(), summary));
    let mut var_csv = String::from("speaker,layer,total_variance\n");
    for ((s, l), v) in &speaker_variance {
        writeln!(var_csv, "{s},{l},{v}").expect("string write");
    }
    files.push(("speaker_variance.csv".into(), var_csv));

    let written = write_all(out_dir, &files)?;
    Ok(AnalysisReport { layers, dispersion, speaker_dispersion, speaker_variance, files: written })
}

/// Writes every file or, on failure, removes the ones already written.
fn write_all(out_dir: &Path, files: &[(PathBuf, String)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (rel, text) in files {
        let path = out_dir.join(rel);
        let res = path.parent().map_or(Ok(()), fs::create_dir_all).and_then(|_| fs::write(&path, text));
        if let Err(e) = res {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(written)
}
