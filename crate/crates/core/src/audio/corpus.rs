use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Speaker {
    pub id: String,
    /// Paths relative to the corpus root, sorted.
    pub utterances: Vec<PathBuf>,
}

/// Audio corpus laid out as `<root>/<speaker_id>/**/*.wav`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub speakers: Vec<Speaker>,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

impl Corpus {
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut dirs: Vec<_> = fs::read_dir(&root)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
            .collect();
        dirs.sort_by_key(|e| e.file_name());
        let mut speakers = Vec::new();
        for dir in dirs {
            let mut wavs = Vec::new();
            collect_wavs(&dir.path(), &mut wavs)?;
            if wavs.is_empty() {
                continue;
            }
            let utterances = wavs
                .into_iter()
                .map(|p| p.strip_prefix(&root).map(Path::to_path_buf).expect("walked under root"))
                .collect();
            speakers.push(Speaker { id: dir.file_name().to_string_lossy().into_owned(), utterances });
        }
        if speakers.is_empty() {
            return Err(Error::Data(format!("no speakers with .wav files under {}", root.display())));
        }
        Ok(Self { root, speakers })
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers.iter().map(|s| s.utterances.len()).sum()
    }

    /// Drops the listed utterances (paths relative to the root).
    pub fn without(mut self, excluded: &std::collections::BTreeSet<PathBuf>) -> Self {
        for s in &mut self.speakers {
            s.utterances.retain(|u| !excluded.contains(u));
        }
        self.speakers.retain(|s| !s.utterances.is_empty());
        self
    }
}
