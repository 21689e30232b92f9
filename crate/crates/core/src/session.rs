//! Listening-test protocol: calibration, attention check, teaching, 30
//! adaptive/sentinel trials, comments. Transport-agnostic; the HTTP layer is a
//! thin wrapper around [`LabService`].
//!
//! Every mutation is written to the corpus log before it is applied, and a
//! service constructed over an existing corpus replays the log to rebuild all
//! sessions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, AudioBuffer, WavEncoding};
use crate::dataset::{
    Corpus, JudgmentRecord, LogEvent, SessionStatus, SessionSummary, BLOCKS, SENTINELS_PER_BLOCK,
    TRIALS_PER_BLOCK, TRIALS_PER_SESSION,
};
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::jnd::{self, JndSession, ProbePolicy, Trial};
use crate::perturb::{apply_axis, draw_axis_with, PerturbContext, PerturbationAxis};
use crate::reference::ReferencePool;

const SESSION_SEED_SALT: u64 = 0x5E55_1014;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Calibration,
    Attention,
    Teaching,
    Trials,
    Comments,
    Done,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Calibration => "calibration",
            Stage::Attention => "attention",
            Stage::Teaching => "teaching",
            Stage::Trials => "trials",
            Stage::Comments => "comments",
            Stage::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Same,
    Different,
}

impl Response {
    pub fn h(self) -> u8 {
        match self {
            Response::Same => 0,
            Response::Different => 1,
        }
    }

    pub fn from_h(h: u8) -> Self {
        if h == 0 {
            Response::Same
        } else {
            Response::Different
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StagePayload {
    Calibration { acknowledged: bool },
    Attention { word: String },
    Teaching { answers: Vec<Response> },
    Comments { text: String },
}

impl StagePayload {
    pub fn stage(&self) -> Stage {
        match self {
            StagePayload::Calibration { .. } => Stage::Calibration,
            StagePayload::Attention { .. } => Stage::Attention,
            StagePayload::Teaching { .. } => Stage::Teaching,
            StagePayload::Comments { .. } => Stage::Comments,
        }
    }
}

/// Attention-check material: a sentence clip and four candidate words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Reference played as the sentence; defaults to the first pool entry.
    pub reference_id: Option<String>,
    pub choices: Vec<String>,
    pub answer: String,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            reference_id: None,
            choices: ["river", "candle", "orange", "window"]
                .map(String::from)
                .to_vec(),
            answer: "candle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub seed: u64,
    pub policy: ProbePolicy,
    pub attention: AttentionConfig,
    /// Timestamps count trials instead of reading the wall clock, which keeps
    /// simulated corpora byte-reproducible.
    pub logical_clock: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: ProbePolicy::default(),
            attention: AttentionConfig::default(),
            logical_clock: false,
        }
    }
}

/// What a stimulus key renders to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub reference_id: String,
    pub axis: PerturbationAxis,
    pub rho: f64,
}

impl StimulusSpec {
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("stimulus spec serializes");
        let digest = Sha256::digest(&json);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn audio_url(key: &str) -> String {
    format!("/api/audio/{key}.wav")
}

/// Renders stimuli to PCM-16 WAV bytes, caching by key in memory and, when
/// configured, on disk.
#[derive(Debug)]
pub struct Renderer {
    references: ReferencePool,
    ctx: PerturbContext,
    cache_dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl Renderer {
    pub fn new(references: ReferencePool, ctx: PerturbContext, cache_dir: Option<PathBuf>) -> Self {
        Self {
            references,
            ctx,
            cache_dir,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn references(&self) -> &ReferencePool {
        &self.references
    }

    pub fn context(&self) -> &PerturbContext {
        &self.ctx
    }

    pub fn render_buffer(&self, spec: &StimulusSpec) -> Result<AudioBuffer> {
        let reference = self.references.get(&spec.reference_id)?;
        apply_axis(&spec.axis, spec.rho, reference, &self.ctx)
    }

    pub fn render(&self, spec: &StimulusSpec) -> Result<Arc<Vec<u8>>> {
        let key = spec.key();
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let path = self
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{key}.wav")));
        let bytes = match path.as_ref().filter(|p| p.exists()) {
            Some(p) => std::fs::read(p).map_err(|e| Error::io(p, e))?,
            None => {
                let bytes = audio::wav_bytes(&self.render_buffer(spec)?, WavEncoding::Pcm16)?;
                if let Some(p) = &path {
                    let dir = p.parent().expect("cache file has a parent");
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let tmp = p.with_extension(format!("tmp{}", std::process::id()));
                    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
                    std::fs::rename(&tmp, p).map_err(|e| Error::io(p, e))?;
                }
                bytes
            }
        };
        let bytes = Arc::new(bytes);
        self.memory
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| bytes.clone());
        Ok(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub reference_id: String,
    pub axis: PerturbationAxis,
    pub severe_axis: PerturbationAxis,
    pub same_axis: PerturbationAxis,
    pub jnd: JndSession,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentinelSlot {
    pub block: u8,
    pub trial: u8,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTrial {
    pub trial_id: u32,
    pub block: u8,
    pub trial: u8,
    pub sentinel: bool,
    pub reference: StimulusSpec,
    pub perturbed: StimulusSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDescriptor {
    pub trial_id: u32,
    pub audio_url_ref: String,
    pub audio_url_per: String,
    pub replay_allowed: bool,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionView {
    pub audio_url: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachingItem {
    pub audio_url_ref: String,
    pub audio_url_per: String,
    pub answer: Response,
}

/// Everything a client may see. Sentinel placement is never exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicState {
    pub session_id: String,
    pub stage: Stage,
    pub status: SessionStatus,
    pub progress: Progress,
    pub pending_trial: Option<TrialDescriptor>,
    pub attention: AttentionView,
    pub teaching: Vec<TeachingItem>,
    pub summary: Option<SessionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub stage: Stage,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub trial_id: u32,
    pub progress: Progress,
    pub stage: Stage,
}

/// Server-side state of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub seed: u64,
    pub stage: Stage,
    pub status: SessionStatus,
    pub blocks: Vec<Block>,
    pub cursor: usize,
    pub sentinel_plan: Vec<SentinelSlot>,
    pub pending: Option<PendingTrial>,
    pub attention_reference: String,
    pub comments: Option<String>,
    pub attention_failed: bool,
    pub summary: Option<SessionSummary>,
}

enum StageOutcome {
    Continue,
    RejectAttention,
    Finalize,
}

impl SessionState {
    /// Draws the three (reference, axis) blocks and the sentinel plan from
    /// the session seed.
    pub fn create(
        session_id: &str,
        seed: u64,
        renderer: &Renderer,
        config: &ServiceConfig,
    ) -> Result<Self> {
        let refs = renderer.references();
        let ids = refs.ids();
        if ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = renderer.context();
        let mut blocks = Vec::with_capacity(BLOCKS);
        for b in 0..BLOCKS as u64 {
            let reference_id = ids.choose(&mut rng).expect("non-empty").to_string();
            let axis = draw_axis_with(
                derive_seed(seed, 10 + b),
                &ctx.noise_bank,
                ctx.codec.is_some(),
            )?;
            blocks.push(Block {
                reference_id,
                axis,
                severe_axis: PerturbationAxis::severe(derive_seed(seed, 20 + b), &ctx.noise_bank)?,
                same_axis: PerturbationAxis::empty(derive_seed(seed, 30 + b)),
                jnd: JndSession::new(config.policy.clone()),
            });
        }

        let mut rhos = [0.0, 0.0, 0.0, 100.0, 100.0, 100.0];
        rhos.shuffle(&mut rng);
        let mut plan = Vec::with_capacity(BLOCKS * SENTINELS_PER_BLOCK);
        for b in 0..BLOCKS {
            let mut positions: Vec<u8> = (0..TRIALS_PER_BLOCK as u8).collect();
            positions.shuffle(&mut rng);
            let mut chosen = positions[..SENTINELS_PER_BLOCK].to_vec();
            chosen.sort_unstable();
            for (k, t) in chosen.into_iter().enumerate() {
                plan.push(SentinelSlot {
                    block: b as u8,
                    trial: t,
                    rho: rhos[b * SENTINELS_PER_BLOCK + k],
                });
            }
        }

        let attention_reference = match &config.attention.reference_id {
            Some(id) => {
                refs.get(id)?;
                id.clone()
            }
            None => ids[0].to_string(),
        };
        Ok(Self {
            session_id: session_id.to_string(),
            seed,
            stage: Stage::Calibration,
            status: SessionStatus::InProgress,
            blocks,
            cursor: 0,
            sentinel_plan: plan,
            pending: None,
            attention_reference,
            comments: None,
            attention_failed: false,
            summary: None,
        })
    }

    pub fn progress(&self) -> Progress {
        Progress {
            answered: self.cursor,
            total: TRIALS_PER_SESSION,
        }
    }

    fn sentinel_at(&self, block: u8, trial: u8) -> Option<SentinelSlot> {
        self.sentinel_plan
            .iter()
            .copied()
            .find(|s| s.block == block && s.trial == trial)
    }

    fn reference_spec(reference_id: &str) -> StimulusSpec {
        StimulusSpec {
            reference_id: reference_id.to_string(),
            axis: PerturbationAxis::empty(0),
            rho: 0.0,
        }
    }

    fn teaching_specs(&self) -> [(StimulusSpec, StimulusSpec, Response); 2] {
        let b = &self.blocks[0];
        let reference = Self::reference_spec(&b.reference_id);
        [
            (
                reference.clone(),
                StimulusSpec {
                    reference_id: b.reference_id.clone(),
                    axis: PerturbationAxis::empty(derive_seed(self.seed, 40)),
                    rho: 0.0,
                },
                Response::Same,
            ),
            (
                reference,
                StimulusSpec {
                    reference_id: b.reference_id.clone(),
                    axis: b.severe_axis.clone(),
                    rho: 100.0,
                },
                Response::Different,
            ),
        ]
    }

    fn stimuli(&self) -> Vec<StimulusSpec> {
        let mut out = vec![Self::reference_spec(&self.attention_reference)];
        for (r, p, _) in self.teaching_specs() {
            out.push(r);
            out.push(p);
        }
        if let Some(p) = &self.pending {
            out.push(p.reference.clone());
            out.push(p.perturbed.clone());
        }
        out
    }

    fn check_stage(&self, expected: Stage) -> Result<()> {
        if self.stage == Stage::Done {
            return Err(Error::SessionFinished);
        }
        if self.stage != expected {
            return Err(Error::StageMismatch {
                expected: expected.as_str().into(),
                actual: self.stage.as_str().into(),
            });
        }
        Ok(())
    }

    fn apply_stage(
        &mut self,
        payload: &StagePayload,
        config: &ServiceConfig,
    ) -> Result<StageOutcome> {
        self.check_stage(payload.stage())?;
        match payload {
            StagePayload::Calibration { acknowledged } => {
                if !acknowledged {
                    return Err(Error::InvalidParameter(
                        "calibration must be acknowledged".into(),
                    ));
                }
                self.stage = Stage::Attention;
                Ok(StageOutcome::Continue)
            }
            StagePayload::Attention { word } => {
                if word
                    .trim()
                    .eq_ignore_ascii_case(config.attention.answer.trim())
                {
                    self.stage = Stage::Teaching;
                    Ok(StageOutcome::Continue)
                } else {
                    self.stage = Stage::Done;
                    self.attention_failed = true;
                    Ok(StageOutcome::RejectAttention)
                }
            }
            StagePayload::Teaching { answers } => {
                if answers.len() != 2 {
                    return Err(Error::InvalidParameter(format!(
                        "teaching expects 2 answers, got {}",
                        answers.len()
                    )));
                }
                self.stage = Stage::Trials;
                Ok(StageOutcome::Continue)
            }
            StagePayload::Comments { text } => {
                self.stage = Stage::Done;
                self.comments = Some(text.clone());
                Ok(StageOutcome::Finalize)
            }
        }
    }

    fn issue_trial(&mut self) -> Result<&PendingTrial> {
        self.check_stage(Stage::Trials)?;
        if self.pending.is_some() {
            return Err(Error::AnswerPending);
        }
        let block = (self.cursor / TRIALS_PER_BLOCK) as u8;
        let trial = (self.cursor % TRIALS_PER_BLOCK) as u8;
        let b = &self.blocks[block as usize];
        let (axis, rho, sentinel) = match self.sentinel_at(block, trial) {
            Some(s) if s.rho >= 50.0 => (b.severe_axis.clone(), s.rho, true),
            Some(s) => (b.same_axis.clone(), s.rho, true),
            None => (b.axis.clone(), b.jnd.next_probe(), false),
        };
        self.pending = Some(PendingTrial {
            trial_id: self.cursor as u32,
            block,
            trial,
            sentinel,
            reference: Self::reference_spec(&b.reference_id),
            perturbed: StimulusSpec {
                reference_id: b.reference_id.clone(),
                axis,
                rho,
            },
        });
        Ok(self.pending.as_ref().expect("just set"))
    }

    fn build_record(&self, trial_id: u32, h: u8, timestamp: u64) -> Result<JudgmentRecord> {
        if self.stage == Stage::Done {
            return Err(Error::SessionFinished);
        }
        self.check_stage(Stage::Trials)?;
        let p = self
            .pending
            .as_ref()
            .filter(|p| p.trial_id == trial_id)
            .ok_or_else(|| Error::StaleTrial(trial_id.to_string()))?;
        Ok(JudgmentRecord {
            session_id: self.session_id.clone(),
            block_index: p.block,
            trial_index: p.trial,
            reference_id: p.perturbed.reference_id.clone(),
            axis: p.perturbed.axis.clone(),
            rho: p.perturbed.rho,
            h,
            sentinel: p.sentinel,
            timestamp,
        })
    }

    fn accept_record(&mut self, record: &JudgmentRecord) {
        let trial = if record.sentinel {
            Trial::sentinel(record.rho, record.h)
        } else {
            Trial::new(record.rho, record.h)
        };
        self.blocks[record.block_index as usize].jnd.record(trial);
        self.pending = None;
        self.cursor += 1;
        if self.cursor == TRIALS_PER_SESSION {
            self.stage = Stage::Comments;
        }
    }

    fn finish(&mut self, summary: SessionSummary) {
        self.stage = Stage::Done;
        self.status = summary.status;
        self.summary = Some(summary);
    }

    fn public(&self, config: &ServiceConfig) -> PublicState {
        PublicState {
            session_id: self.session_id.clone(),
            stage: self.stage,
            status: self.status,
            progress: self.progress(),
            pending_trial: self.pending.as_ref().map(|p| self.descriptor(p)),
            attention: AttentionView {
                audio_url: audio_url(&Self::reference_spec(&self.attention_reference).key()),
                choices: config.attention.choices.clone(),
            },
            teaching: self
                .teaching_specs()
                .into_iter()
                .map(|(r, p, answer)| TeachingItem {
                    audio_url_ref: audio_url(&r.key()),
                    audio_url_per: audio_url(&p.key()),
                    answer,
                })
                .collect(),
            summary: self.summary.clone(),
        }
    }

    fn descriptor(&self, p: &PendingTrial) -> TrialDescriptor {
        TrialDescriptor {
            trial_id: p.trial_id,
            audio_url_ref: audio_url(&p.reference.key()),
            audio_url_per: audio_url(&p.perturbed.key()),
            replay_allowed: true,
            progress: self.progress(),
        }
    }
}

/// All sessions plus the corpus they write to.
#[derive(Debug)]
pub struct LabService {
    config: ServiceConfig,
    renderer: Arc<Renderer>,
    corpus: Corpus,
    sessions: HashMap<String, SessionState>,
    stimuli: HashMap<String, StimulusSpec>,
}

impl LabService {
    /// Builds the service and replays any sessions already in the corpus.
    pub fn new(config: ServiceConfig, renderer: Renderer, corpus: Corpus) -> Result<Self> {
        let mut service = Self {
            config,
            renderer: Arc::new(renderer),
            corpus,
            sessions: HashMap::new(),
            stimuli: HashMap::new(),
        };
        service.replay()?;
        Ok(service)
    }

    fn replay(&mut self) -> Result<()> {
        let ids: Vec<String> = self.corpus.session_ids().to_vec();
        for id in ids {
            let log = self.corpus.session(&id)?;
            let events = log.events.clone();
            let mut state = SessionState::create(&id, log.seed, &self.renderer, &self.config)?;
            for event in &events {
                match event {
                    LogEvent::Open { .. } => {}
                    LogEvent::Stage { payload, .. } => {
                        let payload: StagePayload = serde_json::from_value(payload.clone())?;
                        state.apply_stage(&payload, &self.config)?;
                    }
                    LogEvent::Judgment { record } => {
                        state.issue_trial()?;
                        let expected =
                            state.build_record(state.cursor as u32, record.h, record.timestamp)?;
                        if &expected != record {
                            return Err(Error::InvalidParameter(format!(
                                "log replay diverged for session {id} at trial {}",
                                state.cursor
                            )));
                        }
                        state.accept_record(record);
                    }
                    LogEvent::Finalized { summary } => state.finish(summary.clone()),
                }
            }
            // a crash between logging the last stage and the summary
            if state.stage == Stage::Done && state.summary.is_none() {
                let summary = self.close_summary(&state)?;
                state.finish(summary);
            }
            self.register(&state);
            self.sessions.insert(id, state);
        }
        Ok(())
    }

    fn close_summary(&mut self, state: &SessionState) -> Result<SessionSummary> {
        if state.attention_failed {
            let summary = SessionSummary {
                session_id: state.session_id.clone(),
                status: SessionStatus::RejectedAttention,
                fits: Vec::new(),
                comments: String::new(),
            };
            self.corpus.close(summary.clone())?;
            Ok(summary)
        } else {
            let comments = state.comments.clone().unwrap_or_default();
            self.corpus.finalize(&state.session_id, &comments)
        }
    }

    fn register(&mut self, state: &SessionState) {
        for spec in state.stimuli() {
            self.stimuli.entry(spec.key()).or_insert(spec);
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn renderer(&self) -> Arc<Renderer> {
        self.renderer.clone()
    }

    fn state(&self, id: &str) -> Result<&SessionState> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn create_session(&mut self) -> Result<CreatedSession> {
        let n = self.corpus.session_ids().len() as u64;
        let id = format!("{:016x}", derive_seed(self.config.seed, n));
        let seed = derive_seed(self.config.seed ^ SESSION_SEED_SALT, n);
        let state = SessionState::create(&id, seed, &self.renderer, &self.config)?;
        self.corpus.open_session(&id, seed)?;
        self.register(&state);
        let created = CreatedSession {
            session_id: id.clone(),
            stage: state.stage,
        };
        self.sessions.insert(id, state);
        Ok(created)
    }

    pub fn public_state(&self, id: &str) -> Result<PublicState> {
        Ok(self.state(id)?.public(&self.config))
    }

    pub fn submit_stage(&mut self, id: &str, payload: StagePayload) -> Result<SessionInfo> {
        let mut next = self.state(id)?.clone();
        let outcome = next.apply_stage(&payload, &self.config)?;
        self.corpus
            .record_stage(id, serde_json::to_value(&payload)?)?;
        match outcome {
            StageOutcome::Continue => {}
            StageOutcome::RejectAttention | StageOutcome::Finalize => {
                let summary = self.close_summary(&next)?;
                next.finish(summary);
            }
        }
        let info = SessionInfo {
            stage: next.stage,
            status: next.status,
        };
        self.sessions.insert(id.to_string(), next);
        Ok(info)
    }

    pub fn next_trial(&mut self, id: &str) -> Result<TrialDescriptor> {
        let state = self
            .sessions
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))?;
        state.issue_trial()?;
        let state = state.clone();
        self.register(&state);
        let pending = state.pending.as_ref().expect("issued");
        Ok(state.descriptor(pending))
    }

    pub fn submit_answer(
        &mut self,
        id: &str,
        trial_id: u32,
        response: Response,
    ) -> Result<AnswerAck> {
        let state = self.state(id)?;
        let timestamp = if self.config.logical_clock {
            state.cursor as u64
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        };
        let record = state.build_record(trial_id, response.h(), timestamp)?;
        self.corpus.append(record.clone())?;
        let state = self.sessions.get_mut(id).expect("checked");
        state.accept_record(&record);
        Ok(AnswerAck {
            trial_id,
            progress: state.progress(),
            stage: state.stage,
        })
    }

    /// Strength of the outstanding trial. Only simulated listeners use this.
    pub fn pending_rho(&self, id: &str) -> Result<Option<f64>> {
        Ok(self.state(id)?.pending.as_ref().map(|p| p.perturbed.rho))
    }

    pub fn session_state(&self, id: &str) -> Result<&SessionState> {
        self.state(id)
    }

    pub fn stimulus(&self, key: &str) -> Option<StimulusSpec> {
        self.stimuli.get(key).cloned()
    }

    /// Convenience for callers that do not need to release a lock while
    /// rendering.
    pub fn audio(&self, key: &str) -> Result<Arc<Vec<u8>>> {
        let spec = self
            .stimulus(key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown audio key {key}")))?;
        self.renderer.render(&spec)
    }
}

/// Parameters of a simulated listener.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedListener {
    pub mu: f64,
    pub sigma: f64,
    pub lapse: f64,
}

/// Drives one full session through the protocol with a simulated listener
/// that passes the attention check and answers every trial from its
/// psychometric function.
pub fn run_simulated_session<R: Rng + ?Sized>(
    service: &mut LabService,
    listener: SimulatedListener,
    rng: &mut R,
) -> Result<SessionSummary> {
    let id = service.create_session()?.session_id;
    service.submit_stage(&id, StagePayload::Calibration { acknowledged: true })?;
    let word = service.config().attention.answer.clone();
    service.submit_stage(&id, StagePayload::Attention { word })?;
    service.submit_stage(
        &id,
        StagePayload::Teaching {
            answers: vec![Response::Same, Response::Different],
        },
    )?;
    for _ in 0..TRIALS_PER_SESSION {
        let trial = service.next_trial(&id)?;
        let rho = service.pending_rho(&id)?.expect("trial issued");
        let h = jnd::simulate_listener(listener.mu, listener.sigma, listener.lapse, rho, rng);
        service.submit_answer(&id, trial.trial_id, Response::from_h(h))?;
    }
    service.submit_stage(
        &id,
        StagePayload::Comments {
            text: String::new(),
        },
    )?;
    service
        .state(&id)?
        .summary
        .clone()
        .ok_or_else(|| Error::InvalidParameter("session not finalized".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jnd::PriorSpec;

    fn service() -> LabService {
        let renderer = Renderer::new(
            ReferencePool::synthetic(3, 1, 8000),
            PerturbContext::builtin(),
            None,
        );
        LabService::new(
            ServiceConfig {
                logical_clock: true,
                ..Default::default()
            },
            renderer,
            Corpus::in_memory(PriorSpec::default()),
        )
        .unwrap()
    }

    fn to_trials(s: &mut LabService, id: &str) {
        s.submit_stage(id, StagePayload::Calibration { acknowledged: true })
            .unwrap();
        s.submit_stage(
            id,
            StagePayload::Attention {
                word: "candle".into(),
            },
        )
        .unwrap();
        s.submit_stage(
            id,
            StagePayload::Teaching {
                answers: vec![Response::Same, Response::Same],
            },
        )
        .unwrap();
    }

    #[test]
    fn creation_shape() {
        let mut s = service();
        let a = s.create_session().unwrap();
        let b = s.create_session().unwrap();
        assert_eq!(a.stage, Stage::Calibration);
        assert_ne!(a.session_id, b.session_id);
        let sa = s.session_state(&a.session_id).unwrap();
        let sb = s.session_state(&b.session_id).unwrap();
        assert_ne!(sa.seed, sb.seed);
        assert_eq!(sa.blocks.len(), 3);
        assert_eq!(sa.sentinel_plan.len(), 6);
        for blk in 0..3u8 {
            assert_eq!(
                sa.sentinel_plan.iter().filter(|p| p.block == blk).count(),
                2
            );
        }
        assert_eq!(sa.sentinel_plan.iter().filter(|p| p.rho == 0.0).count(), 3);
    }

    #[test]
    fn illegal_transitions_leave_state_unchanged() {
        let mut s = service();
        let id = s.create_session().unwrap().session_id;
        let before = s.session_state(&id).unwrap().clone();
        assert!(matches!(
            s.submit_stage(&id, StagePayload::Teaching { answers: vec![] }),
            Err(Error::StageMismatch { .. })
        ));
        assert!(s.next_trial(&id).is_err());
        assert!(s.submit_answer(&id, 0, Response::Same).is_err());
        assert_eq!(s.session_state(&id).unwrap(), &before);
    }

    #[test]
    fn first_adaptive_probe_and_pending_rule() {
        let mut s = service();
        let id = s.create_session().unwrap().session_id;
        to_trials(&mut s, &id);
        let first_adaptive = (0..10u8)
            .find(|t| s.session_state(&id).unwrap().sentinel_at(0, *t).is_none())
            .unwrap();
        for _ in 0..first_adaptive {
            let t = s.next_trial(&id).unwrap();
            let rho = s.pending_rho(&id).unwrap().unwrap();
            assert!(rho == 0.0 || rho == 100.0);
            s.submit_answer(&id, t.trial_id, Response::from_h((rho > 50.0) as u8))
                .unwrap();
        }
        let t = s.next_trial(&id).unwrap();
        assert_eq!(
            s.pending_rho(&id).unwrap(),
            Some(ProbePolicy::default().exploration_schedule[0])
        );
        assert!(matches!(s.next_trial(&id), Err(Error::AnswerPending)));
        assert!(matches!(
            s.submit_answer(&id, t.trial_id + 1, Response::Same),
            Err(Error::StaleTrial(_))
        ));
        assert!(s.audio(&t.audio_url_per[11..43]).is_ok());
    }

    #[test]
    fn simulated_session_completes() {
        let mut s = service();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let listener = SimulatedListener {
            mu: 50.0,
            sigma: 8.0,
            lapse: 0.0,
        };
        let summary = run_simulated_session(&mut s, listener, &mut rng).unwrap();
        assert_eq!(summary.status, SessionStatus::Accepted);
        assert_eq!(summary.fits.len(), 3);
        let id = summary.session_id.clone();
        assert!(matches!(
            s.submit_answer(&id, 30, Response::Same),
            Err(Error::SessionFinished)
        ));
        assert_eq!(s.corpus().session(&id).unwrap().records.len(), 30);
    }

    #[test]
    fn wrong_attention_word_rejects() {
        let mut s = service();
        let id = s.create_session().unwrap().session_id;
        s.submit_stage(&id, StagePayload::Calibration { acknowledged: true })
            .unwrap();
        let info = s
            .submit_stage(
                &id,
                StagePayload::Attention {
                    word: "river".into(),
                },
            )
            .unwrap();
        assert_eq!(info.status, SessionStatus::RejectedAttention);
        assert_eq!(info.stage, Stage::Done);
    }

    #[test]
    fn replay_restores_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let make = || {
            LabService::new(
                ServiceConfig {
                    logical_clock: true,
                    ..Default::default()
                },
                Renderer::new(
                    ReferencePool::synthetic(3, 1, 8000),
                    PerturbContext::builtin(),
                    None,
                ),
                Corpus::open(dir.path(), PriorSpec::default()).unwrap(),
            )
            .unwrap()
        };
        let (id, snapshot) = {
            let mut s = make();
            let id = s.create_session().unwrap().session_id;
            to_trials(&mut s, &id);
            for _ in 0..13 {
                let t = s.next_trial(&id).unwrap();
                s.submit_answer(&id, t.trial_id, Response::Different)
                    .unwrap();
            }
            (id.clone(), s.session_state(&id).unwrap().clone())
        };
        let s = make();
        assert_eq!(s.session_state(&id).unwrap(), &snapshot);
    }
}
