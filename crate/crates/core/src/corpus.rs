//! Corpus manifests: one [`UtteranceRecord`] per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

/// The four emotion classes, in the fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "angry" | "ang" => Ok(Emotion::Angry),
            "happy" | "hap" => Ok(Emotion::Happy),
            "neutral" | "neu" => Ok(Emotion::Neutral),
            "sad" => Ok(Emotion::Sad),
            other => Err(Error::Data(format!("unknown emotion label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub path: PathBuf,
    pub speaker: String,
    pub emotion: Emotion,
    pub session: u32,
    /// Seconds.
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// Ordered collection of utterance records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id '{}'", r.utt_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::new(read_jsonl(path)?)?;
        // Relative audio paths are resolved against the manifest location.
        if let Some(dir) = path.parent() {
            for r in &mut m.records {
                if r.path.is_relative() {
                    r.path = dir.join(&r.path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            c[r.emotion.index()] += 1;
        }
        c
    }

    /// Record indices grouped by (speaker, emotion), in manifest order.
    pub fn cells(&self) -> BTreeMap<(String, Emotion), Vec<usize>> {
        let mut cells: BTreeMap<(String, Emotion), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            cells.entry((r.speaker.clone(), r.emotion)).or_default().push(i);
        }
        cells
    }

    pub fn sessions(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.records.iter().map(|r| r.session).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}
