//! Pool of reference recordings keyed by id.

use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::{self, AudioBuffer};
use crate::error::{Error, Result};
use crate::synth;

/// Default length of generated references: 2.5 s at 16 kHz.
pub const SYNTH_REFERENCE_LEN: usize = 40_000;

#[derive(Debug, Clone, Default)]
pub struct ReferencePool {
    entries: BTreeMap<String, AudioBuffer>,
}

impl ReferencePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// `n` speech-like references named `synth-000`, `synth-001`, ...
    pub fn synthetic(n: usize, seed: u64, len: usize) -> Self {
        let mut pool = Self::new();
        for i in 0..n {
            let buf = synth::speech_like(crate::dsp::derive_seed(seed, i as u64), len);
            pool.insert(format!("synth-{i:03}"), buf);
        }
        pool
    }

    /// Every `*.wav` in `dir`, keyed by file stem. Files must be at the
    /// canonical rate.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut pool = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let buf = audio::load_wav(&path)?;
            buf.ensure_canonical()?;
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::InvalidParameter(format!("bad file name {path:?}")))?;
            pool.insert(id, buf);
        }
        Ok(pool)
    }

    pub fn insert(&mut self, id: impl Into<String>, buf: AudioBuffer) {
        self.entries.insert(id.into(), buf);
    }

    pub fn get(&self, id: &str) -> Result<&AudioBuffer> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingReference(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
