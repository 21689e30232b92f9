//! Judgment corpus: an append-only JSONL event log, the session validation
//! rules, corpus statistics and triplet export.
//!
//! Corpus directory layout:
//!
//! ```text
//! <corpus>/log.jsonl        one LogEvent per line, replayed on open
//! <export>/ref/<id>.wav     rendered references (float32)
//! <export>/per/<key>.wav    rendered perturbed clips (float32)
//! <export>/manifest.jsonl   one TripletExport per line
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer, PadSide, WavEncoding};
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::jnd::{self, FitReport, PriorSpec, Trial};
use crate::metric::TrainPair;
use crate::perturb::{apply_axis, PerturbContext, PerturbationAxis};
use crate::reference::ReferencePool;

pub const BLOCKS: usize = 3;
pub const TRIALS_PER_BLOCK: usize = 10;
pub const SENTINELS_PER_BLOCK: usize = 2;
pub const TRIALS_PER_SESSION: usize = BLOCKS * TRIALS_PER_BLOCK;
pub const ADAPTIVE_PER_SESSION: usize = BLOCKS * (TRIALS_PER_BLOCK - SENTINELS_PER_BLOCK);
/// Consecutive clamped probes needed (with uniform answers) for a trend reject.
pub const TREND_CLAMP_RUN: usize = 3;
pub const LOG_FILE: &str = "log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SILENCE_PAD_SECONDS: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub session_id: String,
    pub block_index: u8,
    pub trial_index: u8,
    pub reference_id: String,
    pub axis: PerturbationAxis,
    pub rho: f64,
    pub h: u8,
    pub sentinel: bool,
    pub timestamp: u64,
}

impl JudgmentRecord {
    pub fn key(&self) -> (u8, u8) {
        (self.block_index, self.trial_index)
    }

    pub fn trial(&self) -> Trial {
        if self.sentinel {
            Trial::sentinel(self.rho, self.h)
        } else {
            Trial::new(self.rho, self.h)
        }
    }

    /// Sentinels sit at the ends of the strength range; the expected answer
    /// follows from which end.
    pub fn expected_sentinel_answer(&self) -> Option<u8> {
        self.sentinel.then_some((self.rho >= 50.0) as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    InProgress,
    Accepted,
    RejectedSentinel,
    RejectedAttention,
    RejectedTrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub fits: Vec<FitReport>,
    pub comments: String,
}

/// One line of the write-ahead log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Open {
        session_id: String,
        seed: u64,
    },
    Judgment {
        record: JudgmentRecord,
    },
    /// Opaque protocol step recorded by the service so it can replay stages.
    Stage {
        session_id: String,
        payload: serde_json::Value,
    },
    Finalized {
        summary: SessionSummary,
    },
}

impl LogEvent {
    pub fn session_id(&self) -> &str {
        match self {
            LogEvent::Open { session_id, .. } | LogEvent::Stage { session_id, .. } => session_id,
            LogEvent::Judgment { record } => &record.session_id,
            LogEvent::Finalized { summary } => &summary.session_id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    pub seed: u64,
    pub status: SessionStatus,
    pub records: BTreeMap<(u8, u8), JudgmentRecord>,
    pub events: Vec<LogEvent>,
    pub summary: Option<SessionSummary>,
}

impl SessionLog {
    pub fn block_trials(&self, block: u8) -> Vec<Trial> {
        self.records
            .range((block, 0)..=(block, u8::MAX))
            .map(|(_, r)| r.trial())
            .collect()
    }

    pub fn adaptive_trials(&self) -> Vec<Trial> {
        self.records
            .values()
            .filter(|r| !r.sentinel)
            .map(JudgmentRecord::trial)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub n_same: usize,
    pub n_diff: usize,
    pub fraction_same: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExportAugment {
    #[default]
    None,
    SilencePad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletExport {
    #[serde(rename = "ref")]
    pub ref_audio: PathBuf,
    #[serde(rename = "per")]
    pub per_audio: PathBuf,
    pub h: u8,
    pub session: String,
    pub rho: f64,
    pub axis: PerturbationAxis,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// In-memory view of the log, optionally backed by a file.
#[derive(Debug)]
pub struct Corpus {
    log_path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    prior: PriorSpec,
    order: Vec<String>,
    sessions: BTreeMap<String, SessionLog>,
}

impl Corpus {
    /// Corpus without a backing file.
    pub fn in_memory(prior: PriorSpec) -> Self {
        Self {
            log_path: None,
            writer: None,
            prior,
            order: Vec::new(),
            sessions: BTreeMap::new(),
        }
    }

    /// Opens (creating if needed) `dir/log.jsonl` and replays it.
    pub fn open(dir: impl AsRef<Path>, prior: PriorSpec) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut corpus = Self::in_memory(prior);
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent = serde_json::from_str(&line)?;
                corpus.apply(event)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        corpus.writer = Some(BufWriter::new(file));
        corpus.log_path = Some(path);
        Ok(corpus)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    fn persist(&mut self, event: &LogEvent) -> Result<()> {
        if let (Some(w), Some(path)) = (self.writer.as_mut(), self.log_path.as_ref()) {
            let line = serde_json::to_string(event)?;
            let res = writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .and_then(|_| w.get_ref().sync_data());
            res.map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Validates an event against the current state and applies it. Returns
    /// `false` when it is an idempotent repeat.
    fn apply(&mut self, event: LogEvent) -> Result<bool> {
        let id = event.session_id().to_string();
        match &event {
            LogEvent::Open { seed, .. } => {
                if let Some(existing) = self.sessions.get(&id) {
                    if existing.seed == *seed {
                        return Ok(false);
                    }
                    return Err(Error::DuplicateKey(format!("session {id}")));
                }
                self.order.push(id.clone());
                self.sessions.insert(
                    id,
                    SessionLog {
                        seed: *seed,
                        status: SessionStatus::InProgress,
                        records: BTreeMap::new(),
                        events: vec![event],
                        summary: None,
                    },
                );
                return Ok(true);
            }
            LogEvent::Judgment { record } => {
                let s = self
                    .sessions
                    .get(&id)
                    .ok_or_else(|| Error::UnknownSession(id.clone()))?;
                if let Some(prev) = s.records.get(&record.key()) {
                    if prev == record {
                        return Ok(false);
                    }
                    return Err(Error::DuplicateKey(format!(
                        "{id} block {} trial {}",
                        record.block_index, record.trial_index
                    )));
                }
                if s.status != SessionStatus::InProgress {
                    return Err(Error::SessionClosed(id));
                }
                if !(0.0..=100.0).contains(&record.rho) || record.h > 1 {
                    return Err(Error::InvalidParameter(format!(
                        "record rho {} h {}",
                        record.rho, record.h
                    )));
                }
                if record.block_index as usize >= BLOCKS
                    || record.trial_index as usize >= TRIALS_PER_BLOCK
                {
                    return Err(Error::InvalidParameter(format!(
                        "record key ({}, {})",
                        record.block_index, record.trial_index
                    )));
                }
            }
            LogEvent::Stage { .. } => {
                let s = self
                    .sessions
                    .get(&id)
                    .ok_or_else(|| Error::UnknownSession(id.clone()))?;
                if s.status != SessionStatus::InProgress {
                    return Err(Error::SessionClosed(id));
                }
            }
            LogEvent::Finalized { summary } => {
                let s = self
                    .sessions
                    .get(&id)
                    .ok_or_else(|| Error::UnknownSession(id.clone()))?;
                if s.summary.as_ref() == Some(summary) {
                    return Ok(false);
                }
                if s.status != SessionStatus::InProgress {
                    return Err(Error::SessionClosed(id));
                }
            }
        }
        let s = self.sessions.get_mut(&id).expect("checked above");
        match &event {
            LogEvent::Judgment { record } => {
                s.records.insert(record.key(), record.clone());
            }
            LogEvent::Finalized { summary } => {
                s.status = summary.status;
                s.summary = Some(summary.clone());
            }
            _ => {}
        }
        s.events.push(event);
        Ok(true)
    }

    fn commit(&mut self, event: LogEvent) -> Result<bool> {
        let fresh = self.apply(event.clone())?;
        if fresh {
            self.persist(&event)?;
        }
        Ok(fresh)
    }

    pub fn open_session(&mut self, session_id: &str, seed: u64) -> Result<()> {
        self.commit(LogEvent::Open {
            session_id: session_id.to_string(),
            seed,
        })
        .map(|_| ())
    }

    /// Appends a judgment. Repeating an identical record is a no-op.
    pub fn append(&mut self, record: JudgmentRecord) -> Result<()> {
        self.commit(LogEvent::Judgment { record }).map(|_| ())
    }

    pub fn record_stage(&mut self, session_id: &str, payload: serde_json::Value) -> Result<()> {
        self.commit(LogEvent::Stage {
            session_id: session_id.to_string(),
            payload,
        })
        .map(|_| ())
    }

    /// Closes a session with an explicit summary (used for attention rejects).
    pub fn close(&mut self, summary: SessionSummary) -> Result<()> {
        self.commit(LogEvent::Finalized { summary }).map(|_| ())
    }

    /// Validates a complete session, persists and returns its summary.
    pub fn finalize(&mut self, session_id: &str, comments: &str) -> Result<SessionSummary> {
        let summary = self.validate_session(session_id, comments)?;
        self.close(summary.clone())?;
        Ok(summary)
    }

    pub fn session(&self, session_id: &str) -> Result<&SessionLog> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    /// Session ids in creation order.
    pub fn session_ids(&self) -> &[String] {
        &self.order
    }

    pub fn record_count(&self) -> usize {
        self.sessions.values().map(|s| s.records.len()).sum()
    }

    fn block_fit(&self, log: &SessionLog, block: u8) -> FitReport {
        let trials = log.block_trials(block);
        let fit = jnd::fit(&trials, &self.prior);
        FitReport::new(&trials, &fit)
    }

    /// Pooled fit over all adaptive trials of a session.
    pub fn session_fit(&self, session_id: &str) -> Result<FitReport> {
        let log = self.session(session_id)?;
        let trials = log.adaptive_trials();
        let fit = jnd::fit(&trials, &self.prior);
        Ok(FitReport::new(&trials, &fit))
    }

    /// Applies the sentinel and trend rules to a session with all 30 trials.
    pub fn validate_session(&self, session_id: &str, comments: &str) -> Result<SessionSummary> {
        let log = self.session(session_id)?;
        if log.records.len() < TRIALS_PER_SESSION {
            return Err(Error::IncompleteSession {
                id: session_id.to_string(),
                have: log.records.len(),
                need: TRIALS_PER_SESSION,
            });
        }
        let fits = (0..BLOCKS as u8).map(|b| self.block_fit(log, b)).collect();
        let sentinel_wrong = log
            .records
            .values()
            .any(|r| r.expected_sentinel_answer().is_some_and(|e| e != r.h));
        let status = if sentinel_wrong {
            SessionStatus::RejectedSentinel
        } else if (0..BLOCKS as u8).any(|b| block_shows_trend(log, b)) {
            SessionStatus::RejectedTrend
        } else {
            SessionStatus::Accepted
        };
        Ok(SessionSummary {
            session_id: session_id.to_string(),
            status,
            fits,
            comments: comments.to_string(),
        })
    }

    pub fn accepted(&self) -> impl Iterator<Item = (&str, &SessionLog)> {
        self.order.iter().filter_map(|id| {
            let s = &self.sessions[id];
            (s.status == SessionStatus::Accepted).then_some((id.as_str(), s))
        })
    }

    /// Accepted non-sentinel records in session order.
    pub fn accepted_records(&self) -> Vec<&JudgmentRecord> {
        self.accepted()
            .flat_map(|(_, s)| s.records.values().filter(|r| !r.sentinel))
            .collect()
    }
}

/// Final adaptive answers of the block all identical, with the probe pinned
/// at 0 or 100 for at least three consecutive adaptive trials.
fn block_shows_trend(log: &SessionLog, block: u8) -> bool {
    let adaptive: Vec<&JudgmentRecord> = log
        .records
        .range((block, 0)..=(block, u8::MAX))
        .map(|(_, r)| r)
        .filter(|r| !r.sentinel)
        .collect();
    let tail = &adaptive[adaptive
        .len()
        .saturating_sub(TRIALS_PER_BLOCK - SENTINELS_PER_BLOCK)..];
    if tail.is_empty() || tail.iter().any(|r| r.h != tail[0].h) {
        return false;
    }
    let mut run = 0;
    for r in &adaptive {
        if r.rho <= jnd::RHO_MIN || r.rho >= jnd::RHO_MAX {
            run += 1;
            if run >= TREND_CLAMP_RUN {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// Same/different counts over accepted, non-sentinel records.
pub fn balance_stats(corpus: &Corpus) -> Result<BalanceStats> {
    let records = corpus.accepted_records();
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_diff = records.iter().filter(|r| r.h == 1).count();
    let n_same = records.len() - n_diff;
    Ok(BalanceStats {
        n_same,
        n_diff,
        fraction_same: n_same as f64 / records.len() as f64,
    })
}

/// Mean per-block consistency over accepted sessions.
pub fn corpus_consistency(corpus: &Corpus) -> Result<f64> {
    let mut values = Vec::new();
    for (_, log) in corpus.accepted() {
        for b in 0..BLOCKS as u8 {
            let trials = log.block_trials(b);
            let fit = jnd::fit(&trials, corpus.prior());
            if let Ok(c) = jnd::consistency(&trials, &fit) {
                values.push(c);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Renders every accepted non-sentinel record and writes WAVs plus a JSONL
/// manifest whose audio paths are relative to its directory. Returns the
/// manifest path.
pub fn export_triplets(
    corpus: &Corpus,
    references: &ReferencePool,
    ctx: &PerturbContext,
    out_dir: impl AsRef<Path>,
    augment: ExportAugment,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let ref_dir = out_dir.join("ref");
    let per_dir = out_dir.join("per");
    for d in [&ref_dir, &per_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut lines = Vec::new();
    for record in corpus.accepted_records() {
        let reference = references.get(&record.reference_id)?;
        let ref_path = ref_dir.join(format!("{}.wav", record.reference_id));
        if !ref_path.exists() {
            audio::save_wav(reference, &ref_path, WavEncoding::Float32)?;
        }
        let mut per = apply_axis(&record.axis, record.rho, reference, ctx)?;
        if augment == ExportAugment::SilencePad {
            let side_seed = derive_seed(
                record.axis.seed,
                ((record.block_index as u64) << 8) | record.trial_index as u64,
            );
            let side = if side_seed & 1 == 0 {
                PadSide::Front
            } else {
                PadSide::Back
            };
            per = audio::pad_silence(&per, SILENCE_PAD_SECONDS, side)?;
        }
        let per_path = per_dir.join(format!(
            "{}_{}_{}.wav",
            record.session_id, record.block_index, record.trial_index
        ));
        audio::save_wav(&per, &per_path, WavEncoding::Float32)?;
        let line = TripletExport {
            ref_audio: Path::new("ref").join(format!("{}.wav", record.reference_id)),
            per_audio: per_path
                .strip_prefix(out_dir)
                .unwrap_or(&per_path)
                .to_path_buf(),
            h: record.h,
            session: record.session_id.clone(),
            rho: record.rho,
            axis: record.axis.clone(),
            weight: 1.0,
        };
        lines.push(serde_json::to_string(&line)?);
    }
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a manifest, resolving relative audio paths against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TripletExport>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut t: TripletExport = serde_json::from_str(l)?;
            t.ref_audio = base.join(&t.ref_audio);
            t.per_audio = base.join(&t.per_audio);
            Ok(t)
        })
        .collect()
}

/// Training pairs for a manifest. Each audio file is loaded once, so pairs
/// naming the same reference share its buffer.
pub fn manifest_pairs(path: impl AsRef<Path>) -> Result<Vec<TrainPair>> {
    let mut cache: BTreeMap<PathBuf, Arc<AudioBuffer>> = BTreeMap::new();
    let mut load = |p: &Path| -> Result<Arc<AudioBuffer>> {
        if let Some(b) = cache.get(p) {
            return Ok(b.clone());
        }
        let b = Arc::new(audio::load_wav(p)?);
        cache.insert(p.to_path_buf(), b.clone());
        Ok(b)
    };
    read_manifest(path)?
        .into_iter()
        .map(|t| {
            Ok(TrainPair {
                reference: load(&t.ref_audio)?,
                perturbed: load(&t.per_audio)?,
                h: t.h,
            })
        })
        .collect()
}
