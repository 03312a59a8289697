use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::vocab::normalize_transcript;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// As written in the file; relative paths resolve against the manifest's directory.
    pub audio: PathBuf,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base: base.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base.join(&entry.audio)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.id, e.audio.display(), e.transcript).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses `id <TAB> audio_path <TAB> transcript` lines. Blank lines and
/// lines starting with `#` are skipped. Audio files must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(3, '\t').collect();
        let [id, audio, transcript] = fields[..] else {
            return Err(err(line, "expected id, audio path and transcript separated by tabs".into()));
        };
        let id = id.trim();
        if id.is_empty() {
            return Err(err(line, "empty utterance id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(line, format!("duplicate id {id:?}")));
        }
        let transcript = normalize_transcript(transcript);
        if transcript.is_empty() {
            return Err(err(line, format!("{id}: empty transcript")));
        }
        let audio = PathBuf::from(audio.trim());
        if !base.join(&audio).is_file() {
            return Err(err(line, format!("{id}: missing audio {}", audio.display())));
        }
        entries.push(ManifestEntry {
            id: id.to_string(),
            audio,
            transcript,
        });
    }
    Ok(Manifest { entries, base })
}
