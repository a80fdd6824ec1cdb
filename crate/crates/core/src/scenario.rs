//! Synthetic domain-shift task: clean speech-like source, a target domain
//! made by one fixed FIR coloration plus additive noise, and held-out
//! degraded/clean pairs for scoring the adapted enhancement model.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Serialize;

use crate::audio::{AudioClip, DomainTag};
use crate::config::Config;
use crate::encoders::{
    pretrain_channel_encoder, pretrain_noise_encoder_stage1, pretrain_noise_encoder_stage2, ChannelTrainConfig,
    DomainEncoder, EmbeddingKind, FinetuneConfig,
};
use crate::enhance::{adapt_downstream, AdaptReport, AdaptSettings, EvalItem, Hooks, SeModel};
use crate::error::Result;
use crate::layers::{self, derive_seed};
use crate::pipeline::{simulate_dataset, train_gan, EmbeddingUse, SimulatedPair, TrainOutcome, TrainOutputs};
use crate::spectral::Stft;
use crate::synth::{self, Coloration, Condition, NoiseClass};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpec {
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub seconds: f64,
    pub snr_db: f64,
    pub noise_class: NoiseClass,
    pub fir_taps: usize,
    /// Utterances per noise class for the first noise-encoder stage.
    pub noise_clips_per_class: usize,
    /// Parallel corpus for the channel encoder.
    pub parallel_utterances: usize,
    pub parallel_channels: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_source: 40,
            n_target: 40,
            n_eval: 12,
            seconds: 1.5,
            snr_db: 5.0,
            noise_class: NoiseClass::Pink,
            fir_taps: 16,
            noise_clips_per_class: 6,
            parallel_utterances: 12,
            parallel_channels: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub condition: Condition,
    /// Clean source-domain utterances.
    pub source: Vec<AudioClip>,
    /// Degraded target-domain utterances (disjoint speech from `source`).
    pub target: Vec<AudioClip>,
    pub eval: Vec<EvalItem>,
    pub noise_set: Vec<(AudioClip, String)>,
    pub parallel: Vec<AudioClip>,
}

impl SyntheticTask {
    pub fn build(spec: TaskSpec, seed: u64) -> Self {
        let condition = Condition {
            channel_id: "target".into(),
            coloration: Coloration::random(derive_seed(seed, "target_fir"), spec.fir_taps),
            noise_class: spec.noise_class,
            snr_db: spec.snr_db,
        };
        let speech = |prefix: &str, i: usize| synth::speech_like(&format!("{prefix}{i:03}"), spec.seconds, seed);
        let source = (0..spec.n_source).map(|i| speech("src", i)).collect();
        let target = (0..spec.n_target)
            .map(|i| condition.render(&speech("tgt", i), seed))
            .collect();
        let eval = (0..spec.n_eval)
            .map(|i| {
                let clean = speech("eval", i);
                EvalItem {
                    degraded: condition.render(&clean, seed),
                    clean,
                    text: None,
                }
            })
            .collect();
        let mut noise_set = Vec::new();
        let mut rng = layers::rng(derive_seed(seed, "noise_set"));
        for class in NoiseClass::ALL {
            for i in 0..spec.noise_clips_per_class {
                let clean = speech(&format!("noise_{}_", class.name()), i);
                let n = synth::noise(class, clean.samples.len(), derive_seed(seed, &clean.utterance_id));
                let snr = rand::Rng::random_range(&mut rng, 0.0..15.0);
                let mut clip = AudioClip::new(
                    clean.utterance_id.clone(),
                    DomainTag::Target,
                    synth::mix_at_snr(&clean.samples, &n, snr),
                );
                clip.noise_class = Some(class.name().to_string());
                noise_set.push((clip, class.name().to_string()));
            }
        }
        let parallel = synth::parallel_corpus(
            spec.parallel_utterances,
            spec.parallel_channels,
            spec.seconds,
            derive_seed(seed, "parallel"),
        );
        Self {
            spec,
            condition,
            source,
            target,
            eval,
            noise_set,
            parallel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub noise: DomainEncoder,
    pub channel: DomainEncoder,
}

/// Both stand-in encoders trained on the task's auxiliary corpora.
pub fn pretrain_encoders(task: &SyntheticTask, cfg: &Config, seed: u64) -> Result<Encoders> {
    let ft = FinetuneConfig {
        epochs: cfg.encoder.epochs,
        encoder_lr: cfg.encoder.lr,
        head_lr_ratio: cfg.encoder.head_lr_ratio,
        batch_size: cfg.encoder.batch_size,
        seed: derive_seed(seed, "noise_encoder"),
    };
    let mut noise = DomainEncoder::standin(
        EmbeddingKind::Noise,
        cfg.encoder.standin.clone(),
        &mut layers::rng(derive_seed(seed, "noise_init")),
    );
    pretrain_noise_encoder_stage1(&mut noise, &task.noise_set, &ft)?;
    pretrain_noise_encoder_stage2(&mut noise, &task.target, &ft)?;
    let mut channel = DomainEncoder::standin(
        EmbeddingKind::Channel,
        cfg.encoder.standin.clone(),
        &mut layers::rng(derive_seed(seed, "channel_init")),
    );
    let held_out: BTreeSet<String> = cfg.encoder.held_out_channels.iter().cloned().collect();
    pretrain_channel_encoder(
        &mut channel,
        &task.parallel,
        &held_out,
        &ChannelTrainConfig {
            finetune: FinetuneConfig {
                seed: derive_seed(seed, "channel_encoder"),
                ..ft
            },
            val_fraction: cfg.encoder.val_fraction,
            checkpoint_dir: None,
        },
    )?;
    Ok(Encoders { noise, channel })
}

pub fn embedding_use(cfg: &Config) -> EmbeddingUse {
    EmbeddingUse {
        noise: cfg.use_noise_embedding,
        channel: cfg.use_channel_embedding,
    }
}

fn adapt_settings(cfg: &Config, seed: u64) -> AdaptSettings {
    AdaptSettings {
        epochs: cfg.adapt.epochs,
        lr: cfg.adapt.lr,
        batch_size: 4,
        log_floor: cfg.log_floor,
        seed: derive_seed(seed, "adapt"),
    }
}

pub fn base_se_model(cfg: &Config, seed: u64) -> SeModel {
    SeModel::new(cfg.adapt.base_channels, derive_seed(seed, "se_model"))
}

/// Simulate pairs from the source set and adapt a fresh enhancement model.
pub fn simulate_and_adapt(
    task: &SyntheticTask,
    encoders: &Encoders,
    generator: &crate::generator::Generator,
    cfg: &Config,
    seed: u64,
) -> Result<(Vec<SimulatedPair>, AdaptReport)> {
    let pairs = simulate_dataset(
        generator,
        &encoders.noise,
        &encoders.channel,
        &task.source,
        &task.target,
        &cfg.sim,
        embedding_use(cfg),
        cfg.log_floor,
        derive_seed(seed, "simulate"),
    )?;
    let (_, report) = adapt_downstream(
        &base_se_model(cfg, seed),
        &pairs,
        &task.eval,
        &adapt_settings(cfg, seed),
        &Hooks::default(),
    )?;
    Ok((pairs, report))
}

/// Adaptation on clean sources paired with themselves.
pub fn naive_adapt(task: &SyntheticTask, cfg: &Config, seed: u64) -> Result<AdaptReport> {
    let stft = Stft::new(cfg.log_floor);
    let pairs = task
        .source
        .iter()
        .map(|clip| {
            let spec = stft.analyze(clip)?;
            Ok(SimulatedPair {
                clean: spec.clone(),
                simulated: spec,
                source_utterance: clip.utterance_id.clone(),
                target_reference: clip.utterance_id.clone(),
                sigma_used: 0.0,
                source_len: clip.samples.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, report) = adapt_downstream(
        &base_se_model(cfg, seed),
        &pairs,
        &task.eval,
        &adapt_settings(cfg, seed),
        &Hooks::default(),
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub training: TrainOutcome,
    pub pairs: Vec<SimulatedPair>,
    pub adapt: AdaptReport,
}

/// GAN training, simulation and adaptation with fixed encoders.
pub fn run(
    task: &SyntheticTask,
    encoders: &Encoders,
    cfg: &Config,
    seed: u64,
    checkpoint_dir: Option<PathBuf>,
) -> Result<RunResult> {
    let training = train_gan(
        &task.source,
        &task.target,
        &encoders.noise,
        &encoders.channel,
        cfg,
        derive_seed(seed, "gan"),
        &TrainOutputs {
            checkpoint_dir,
            log_path: None,
        },
    )?;
    let (pairs, adapt) = simulate_and_adapt(task, encoders, &training.gan.generator, cfg, seed)?;
    Ok(RunResult { training, pairs, adapt })
}
