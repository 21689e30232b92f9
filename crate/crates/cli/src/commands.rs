//! Subcommand implementations. Each returns the JSON document printed on
//! stdout.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use jnd_core::audio::{load_wav, measured_snr, save_wav};
use jnd_core::dataset::{
    balance_stats, corpus_consistency, export_triplets, manifest_pairs, Corpus, ExportAugment,
    SessionStatus,
};
use jnd_core::dsp::derive_seed;
use jnd_core::eval::{load_2afc_csv, load_mos_csv, mos_correlation, two_afc_accuracy};
use jnd_core::metric::{
    invert_demo, load_checkpoint, pretrain_surrogate_with_head, save_checkpoint, surrogate_corpus,
    EpochStats, MetricModel, NetConfig, TrainConfig, TrainMode, Trainer,
};
use jnd_core::perturb::{apply_axis, draw_axis, PerturbContext, PerturbationAxis};
use jnd_core::reference::{ReferencePool, SYNTH_REFERENCE_LEN};
use jnd_core::session::{
    run_simulated_session, LabService, Renderer, ServiceConfig, SimulatedListener,
};
use jnd_core::toy::{train_config as toy_train_config, ToyCorpus, ToySpec};
use jnd_core::{PriorSpec, WavEncoding};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::server::{router, AppState};

/// Where reference recordings come from: a directory of WAVs, or a
/// deterministic synthetic pool.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RefArgs {
    /// Directory of reference WAVs (16 kHz)
    #[arg(long, env = "JND_REFERENCES")]
    pub references: Option<PathBuf>,
    /// Size of the synthetic pool used when no directory is given
    #[arg(long, env = "JND_N_REFS")]
    pub n_refs: Option<usize>,
    #[arg(long, env = "JND_REF_SEED")]
    pub ref_seed: Option<u64>,
}

impl RefArgs {
    pub fn pool(&self) -> Result<ReferencePool> {
        let pool = match &self.references {
            Some(dir) => ReferencePool::load_dir(dir)?,
            None => ReferencePool::synthetic(
                self.n_refs.unwrap_or(8),
                self.ref_seed.unwrap_or(0),
                SYNTH_REFERENCE_LEN,
            ),
        };
        ensure!(!pool.is_empty(), "reference pool is empty");
        Ok(pool)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PerturbArgs {
    #[arg(long = "in", env = "JND_IN")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "JND_AXIS_SEED", conflicts_with = "axis_file")]
    pub axis_seed: Option<u64>,
    #[arg(long, env = "JND_AXIS_FILE")]
    pub axis_file: Option<PathBuf>,
    #[arg(long, env = "JND_RHO")]
    pub rho: Option<f64>,
    #[arg(long, env = "JND_OUT")]
    pub out: Option<PathBuf>,
    /// pcm16 or float32
    #[arg(long, env = "JND_ENCODING")]
    pub encoding: Option<String>,
}

fn encoding(name: Option<&str>) -> Result<WavEncoding> {
    match name.unwrap_or("float32") {
        "pcm16" => Ok(WavEncoding::Pcm16),
        "float32" => Ok(WavEncoding::Float32),
        other => bail!("unknown encoding {other:?}"),
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().with_context(|| format!("missing --{flag}"))
}

pub fn perturb(a: &PerturbArgs) -> Result<Value> {
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let rho = required(&a.rho, "rho")?;
    let ctx = PerturbContext::builtin();
    let axis = match (&a.axis_file, a.axis_seed) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PerturbationAxis>(&text)?
        }
        (None, Some(seed)) => draw_axis(seed, &ctx.noise_bank)?,
        (None, None) => bail!("one of --axis-seed or --axis-file is required"),
    };
    axis.validate()?;
    let x = load_wav(&input)?;
    ensure!((0.0..=100.0).contains(&rho), "rho {rho} outside [0, 100]");
    if axis.steps.is_empty() {
        std::fs::copy(&input, &out).with_context(|| format!("copying to {}", out.display()))?;
    } else {
        let y = apply_axis(&axis, rho, &x, &ctx)?;
        save_wav(&y, &out, encoding(a.encoding.as_deref())?)?;
    }
    Ok(serde_json::to_value(&axis)?)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateArgs {
    #[arg(long, env = "JND_SESSIONS")]
    pub sessions: Option<usize>,
    #[arg(long, env = "JND_MU")]
    pub mu: Option<f64>,
    #[arg(long, env = "JND_SIGMA")]
    pub sigma: Option<f64>,
    #[arg(long, env = "JND_LAPSE")]
    pub lapse: Option<f64>,
    #[arg(long, env = "JND_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "JND_CORPUS_DIR")]
    pub corpus_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub refs: RefArgs,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn simulate(a: &SimulateArgs) -> Result<Value> {
    let dir = required(&a.corpus_dir, "corpus-dir")?;
    let seed = a.seed.unwrap_or(0);
    let listener = SimulatedListener {
        mu: a.mu.unwrap_or(50.0),
        sigma: a.sigma.unwrap_or(8.0),
        lapse: a.lapse.unwrap_or(0.02),
    };
    ensure!(
        listener.sigma > 0.0 && (0.0..=1.0).contains(&listener.lapse),
        "sigma must be positive and lapse in [0, 1]"
    );
    let renderer = Renderer::new(a.refs.pool()?, PerturbContext::builtin(), None);
    let corpus = Corpus::open(&dir, PriorSpec::default())?;
    let config = ServiceConfig {
        seed: derive_seed(seed, 1),
        logical_clock: true,
        ..Default::default()
    };
    let mut service = LabService::new(config, renderer, corpus)?;
    let mut rng =
        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(seed, 2));
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    let mut errors = Vec::new();
    for _ in 0..a.sessions.unwrap_or(100) {
        let summary = run_simulated_session(&mut service, listener, &mut rng)?;
        let status = serde_json::to_value(summary.status)?;
        *counts
            .entry(status.as_str().unwrap_or("?").to_string())
            .or_default() += 1;
        if summary.status == SessionStatus::Accepted {
            let fit = service.corpus().session_fit(&summary.session_id)?;
            errors.push((fit.mu - listener.mu).abs());
        }
    }
    let log = service
        .corpus()
        .log_path()
        .context("corpus has no log file")?
        .to_path_buf();
    drop(service);
    let corpus = Corpus::open(&dir, PriorSpec::default())?;
    let mean_abs_error = if errors.is_empty() {
        Value::Null
    } else {
        json!(errors.iter().sum::<f64>() / errors.len() as f64)
    };
    Ok(json!({
        "status_counts": counts,
        "accepted": errors.len(),
        "mean_abs_mu_error": mean_abs_error,
        "balance": balance_stats(&corpus).ok(),
        "consistency": corpus_consistency(&corpus).ok(),
        "log_sha256": file_sha256(&log)?,
    }))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FitArgs {
    #[arg(long, env = "JND_CORPUS_DIR")]
    pub corpus_dir: Option<PathBuf>,
    /// Session id; all sessions when omitted
    #[arg(long, env = "JND_SESSION")]
    pub session: Option<String>,
}

pub fn fit_jnd(a: &FitArgs) -> Result<Value> {
    let dir = required(&a.corpus_dir, "corpus-dir")?;
    ensure!(
        dir.join(jnd_core::dataset::LOG_FILE).exists(),
        "no corpus log in {}",
        dir.display()
    );
    let corpus = Corpus::open(&dir, PriorSpec::default())?;
    match &a.session {
        Some(id) => Ok(serde_json::to_value(corpus.session_fit(id)?)?),
        None => {
            let mut all = serde_json::Map::new();
            for id in corpus.session_ids() {
                all.insert(id.clone(), serde_json::to_value(corpus.session_fit(id)?)?);
            }
            Ok(Value::Object(all))
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Triplet manifest from export-triplets
    #[arg(long, env = "JND_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Train on the built-in synthetic toy corpus instead of a manifest
    #[arg(long, env = "JND_TOY", num_args = 0..=1, default_missing_value = "true")]
    pub toy: Option<bool>,
    /// pre | lin | fin | scratch
    #[arg(long, env = "JND_MODE")]
    pub mode: Option<TrainMode>,
    #[arg(long, env = "JND_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "JND_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "JND_CKPT_OUT")]
    pub ckpt_out: Option<PathBuf>,
    /// Starting checkpoint (for lin/fin after pre)
    #[arg(long, env = "JND_INIT_CKPT")]
    pub init_ckpt: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<ckpt-out>.loss.csv`
    #[arg(long, env = "JND_LOSS_CSV")]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, env = "JND_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "JND_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "JND_AUGMENT", num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    #[arg(long, env = "JND_REFS_PER_BATCH")]
    pub refs_per_batch: Option<usize>,
    /// Surrogate clips generated for pre mode
    #[arg(long, env = "JND_CLIPS")]
    pub clips: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub refs: RefArgs,
}

fn write_loss_csv(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "epoch,mean_loss")?;
    for s in stats {
        writeln!(f, "{},{}", s.epoch, s.mean_loss)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let ckpt_out = required(&a.ckpt_out, "ckpt-out")?;
    let seed = a.seed.unwrap_or(0);
    let mode = a.mode.unwrap_or(TrainMode::Scratch);
    let toy = a.toy.unwrap_or(false);
    let defaults = if toy {
        toy_train_config(TrainConfig::default().epochs, 0)
    } else {
        TrainConfig::default()
    };
    let config = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: derive_seed(seed, 3),
        mode,
        augment_silence: a.augment.unwrap_or(defaults.augment_silence),
        refs_per_batch: a.refs_per_batch.or(defaults.refs_per_batch),
    };
    config.validate()?;
    let model: MetricModel<f32> = match &a.init_ckpt {
        Some(path) => load_checkpoint::<f64>(path)?.cast(),
        None => MetricModel::init(NetConfig::default(), derive_seed(seed, 4))?,
    };
    let mut stats = Vec::new();
    let log_epoch = |s: &EpochStats| log::info!("epoch {} mean loss {:.5}", s.epoch, s.mean_loss);
    let model = if mode == TrainMode::Pre {
        let ctx = PerturbContext::builtin();
        let clips = surrogate_corpus(
            &a.refs.pool()?,
            &ctx,
            a.clips.unwrap_or(500),
            derive_seed(seed, 5),
        )?;
        let (model, _) = pretrain_surrogate_with_head(model, &clips, &config, |s| {
            log_epoch(s);
            stats.push(*s);
        })?;
        model
    } else {
        let pairs = if toy {
            ensure!(a.manifest.is_none(), "--toy and --manifest are exclusive");
            ToyCorpus::generate(&ToySpec::default(), &PerturbContext::builtin())?.train_pairs()
        } else {
            manifest_pairs(required(&a.manifest, "manifest")?)?
        };
        ensure!(!pairs.is_empty(), "no training pairs");
        let mut trainer = Trainer::new(model, config.clone())?;
        stats = trainer.fit(&pairs, log_epoch)?;
        trainer.into_model()
    };
    save_checkpoint(&model, &ckpt_out)?;
    let loss_csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| ckpt_out.with_extension("loss.csv"));
    write_loss_csv(&loss_csv, &stats)?;
    Ok(json!({
        "mode": mode,
        "epochs": config.epochs,
        "first_epoch_loss": stats.first().map(|s| s.mean_loss),
        "final_epoch_loss": stats.last().map(|s| s.mean_loss),
        "checksum": model.checksum(),
        "backbone_checksum": model.backbone_checksum(),
        "checkpoint": ckpt_out,
        "loss_csv": loss_csv,
    }))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long, env = "JND_CKPT")]
    pub ckpt: Option<PathBuf>,
    /// CSV with header speaker,condition,mos,ref,deg
    #[arg(long, env = "JND_MOS", conflicts_with = "two_afc")]
    pub mos: Option<PathBuf>,
    /// CSV with header ref,a,b,choice
    #[arg(long = "2afc", env = "JND_2AFC")]
    #[serde(rename = "2afc")]
    pub two_afc: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<Value> {
    let model: MetricModel<f64> = load_checkpoint(required(&a.ckpt, "ckpt")?)?;
    match (&a.mos, &a.two_afc) {
        (Some(csv), _) => Ok(serde_json::to_value(mos_correlation(
            &model,
            &load_mos_csv(csv)?,
        )?)?),
        (None, Some(csv)) => {
            let records = load_2afc_csv(csv)?;
            Ok(json!({
                "accuracy": two_afc_accuracy(&model, &records)?,
                "records": records.len(),
            }))
        }
        (None, None) => bail!("one of --mos or --2afc is required"),
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradDemoArgs {
    #[arg(long, env = "JND_CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = "JND_CLEAN")]
    pub clean: Option<PathBuf>,
    #[arg(long, env = "JND_NOISY")]
    pub noisy: Option<PathBuf>,
    #[arg(long, env = "JND_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "JND_STEP_SIZE")]
    pub step_size: Option<f64>,
    #[arg(long, env = "JND_OUT")]
    pub out: Option<PathBuf>,
    /// Distance trace CSV; defaults to `<out>.trace.csv`
    #[arg(long, env = "JND_TRACE")]
    pub trace: Option<PathBuf>,
}

pub fn grad_demo(a: &GradDemoArgs) -> Result<Value> {
    let model: MetricModel<f64> = load_checkpoint(required(&a.ckpt, "ckpt")?)?;
    let clean = load_wav(required(&a.clean, "clean")?)?;
    let noisy = load_wav(required(&a.noisy, "noisy")?)?;
    let out = required(&a.out, "out")?;
    let result = invert_demo(
        &model,
        &clean,
        &noisy,
        a.steps.unwrap_or(100),
        a.step_size.unwrap_or(1e-3),
    )?;
    save_wav(&result.output, &out, WavEncoding::Float32)?;
    let trace = a
        .trace
        .clone()
        .unwrap_or_else(|| out.with_extension("trace.csv"));
    let mut f = File::create(&trace).with_context(|| format!("creating {}", trace.display()))?;
    writeln!(f, "step,distance")?;
    for (k, d) in result.trace.iter().enumerate() {
        writeln!(f, "{k},{d}")?;
    }
    let snr = |y| measured_snr(&clean, y).ok();
    Ok(json!({
        "initial_distance": result.trace.first(),
        "final_distance": result.trace.last(),
        "snr_db_before": snr(&noisy),
        "snr_db_after": snr(&result.output),
        "out": out,
        "trace": trace,
    }))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ServeArgs {
    #[arg(long, env = "JND_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "JND_CORPUS_DIR")]
    pub corpus_dir: Option<PathBuf>,
    /// Rendered-stimulus cache directory
    #[arg(long, env = "JND_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, env = "JND_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub refs: RefArgs,
}

pub fn build_service(a: &ServeArgs) -> Result<LabService> {
    let dir = a
        .corpus_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("corpus"));
    let renderer = Renderer::new(
        a.refs.pool()?,
        PerturbContext::builtin(),
        a.cache_dir.clone(),
    );
    let corpus = Corpus::open(&dir, PriorSpec::default())?;
    let config = ServiceConfig {
        seed: a.seed.unwrap_or(0),
        ..Default::default()
    };
    Ok(LabService::new(config, renderer, corpus)?)
}

pub fn serve(a: &ServeArgs) -> Result<Value> {
    let service = build_service(a)?;
    let listen = a.listen.clone().unwrap_or_else(|| "127.0.0.1:8080".into());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(AppState::new(service)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(json!({ "stopped": true }))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExportArgs {
    #[arg(long, env = "JND_CORPUS_DIR")]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long, env = "JND_OUT")]
    pub out: Option<PathBuf>,
    /// none | silence_pad
    #[arg(long, env = "JND_AUGMENT_EXPORT")]
    pub augment: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub refs: RefArgs,
}

pub fn export(a: &ExportArgs) -> Result<Value> {
    let dir = required(&a.corpus_dir, "corpus-dir")?;
    ensure!(
        dir.join(jnd_core::dataset::LOG_FILE).exists(),
        "no corpus log in {}",
        dir.display()
    );
    let corpus = Corpus::open(&dir, PriorSpec::default())?;
    let out = required(&a.out, "out")?;
    let manifest = export_triplets(
        &corpus,
        &a.refs.pool()?,
        &PerturbContext::builtin(),
        &out,
        match a.augment.as_deref() {
            None | Some("none") => ExportAugment::None,
            Some("silence_pad") => ExportAugment::SilencePad,
            Some(other) => bail!("unknown export augmentation {other:?}"),
        },
    )?;
    let count = jnd_core::dataset::read_manifest(&manifest)?.len();
    Ok(json!({ "manifest": manifest, "triplets": count }))
}
