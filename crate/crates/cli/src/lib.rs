//! Command implementations behind the `tdycnn` binary.

pub mod synth;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdycnn::audio::Corpus;
use tdycnn::eval::{evaluate, load_trial_list, EvalReport};
use tdycnn::model::{build_model, load_checkpoint, save_checkpoint, ConvMode, Model, ModelConfig};
use tdycnn::phoneme::{export_analysis, AnalysisReport};
use tdycnn::train::{EpochSummary, TrainConfig, TrainData, Trainer};
use tdycnn::{Error, Result};

pub use synth::{cmd_synth, SynthSpec};

/// Sections `[model]`, `[train]` and `[synth]`; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Exit status for an error: 2 for I/O failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_io() {
        2
    } else {
        1
    }
}

/// Files and directories created by a command; removed on drop unless
/// [`OutputGuard::commit`] was called.
pub struct OutputGuard {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new(out: &Path) -> Result<Self> {
        let mut g = Self { files: Vec::new(), dirs: Vec::new(), committed: false };
        g.create_dir(out)?;
        Ok(g)
    }

    pub fn create_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir)?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn track(&mut self, file: &Path) {
        self.files.push(file.to_path_buf());
    }

    pub fn write(&mut self, file: &Path, bytes: &[u8]) -> Result<()> {
        self.track(file);
        fs::write(file, bytes)?;
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Training corpus: every utterance under `data` except those named in
/// `data/trials.txt`.
pub fn training_corpus(data: &Path) -> Result<Corpus> {
    let corpus = Corpus::scan(data)?;
    let trials = data.join("trials.txt");
    if !trials.exists() {
        return Ok(corpus);
    }
    let held: BTreeSet<PathBuf> = synth::trial_paths(&fs::read_to_string(trials)?).into_iter().collect();
    Ok(corpus.without(&held))
}

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }
}

/// Trains on `data` and writes `model.ckpt` and `train.log` into `out`.
pub fn cmd_train(cfg: &Config, data: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    let corpus = training_corpus(data)?;
    let train_data = TrainData::from_corpus(&corpus)?;
    let model = build_model(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), train_data)?;
    let mut guard = OutputGuard::new(out)?;
    let log = out.join("train.log");
    guard.track(&log);
    let mut writer = BufWriter::new(fs::File::create(&log)?);
    let epochs = trainer.train(&mut writer)?;
    drop(writer);
    let checkpoint = out.join("model.ckpt");
    guard.track(&checkpoint);
    save_checkpoint(&trainer.model, &checkpoint)?;
    guard.commit();
    Ok(TrainOutcome { model: trainer.model, epochs, checkpoint, log })
}

/// Scores a trial list (default `data/trials.txt`) and writes `scores.tsv`
/// and `report.txt` into `out`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, trials: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    eval_model(&model, data, trials, out)
}

pub fn eval_model(model: &Model, data: &Path, trials: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let default = data.join("trials.txt");
    let trials = load_trial_list(trials.unwrap_or(&default))?;
    let report = evaluate(model, data, &trials)?;
    let mut guard = OutputGuard::new(out)?;
    guard.write(&out.join("scores.tsv"), report.score_lines().as_bytes())?;
    guard.write(&out.join("report.txt"), format!("{}\n", report.summary()).as_bytes())?;
    guard.commit();
    Ok(report)
}

/// Attention and frame-embedding CSVs for every labelled utterance in `data`.
pub fn cmd_analyze(
    checkpoint: &Path,
    data: &Path,
    layers: &[usize],
    per_speaker: bool,
    out: &Path,
) -> Result<AnalysisReport> {
    let model = load_checkpoint(checkpoint)?;
    analyze_model(&model, data, layers, per_speaker, out)
}

pub fn analyze_model(
    model: &Model,
    data: &Path,
    layers: &[usize],
    per_speaker: bool,
    out: &Path,
) -> Result<AnalysisReport> {
    if model.dynamic_layers().is_empty() {
        return Err(Error::UnsupportedMode("phoneme analysis needs a dy or tdy model".into()));
    }
    let corpus = Corpus::scan(data)?;
    let guard = OutputGuard::new(out)?;
    let report = export_analysis(model, &corpus, layers, per_speaker, out)?;
    guard.commit();
    Ok(report)
}

/// Parameter counts of `cfg` under every convolution mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamsTable {
    pub count: usize,
    pub rows: Vec<(ConvMode, usize)>,
}

impl ParamsTable {
    pub fn ratio(&self, mode: ConvMode) -> f64 {
        let get = |m| self.rows.iter().find(|(r, _)| *r == m).map_or(f64::NAN, |r| r.1 as f64);
        get(mode) / get(ConvMode::Static)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{}\nmode\tparams\tratio_to_static\n", self.count);
        for (m, c) in &self.rows {
            writeln!(s, "{m}\t{c}\t{:.4}", self.ratio(*m)).expect("string write");
        }
        s
    }
}

pub fn cmd_params(cfg: &ModelConfig) -> Result<ParamsTable> {
    let count = cfg.count_parameters()?;
    let k = cfg.k.max(1);
    let rows = [ConvMode::Static, ConvMode::Dy, ConvMode::Tdy]
        .into_iter()
        .map(|m| Ok((m, ModelConfig { conv_mode: m, k, ..cfg.clone() }.count_parameters()?)))
        .collect::<Result<_>>()?;
    Ok(ParamsTable { count, rows })
}
