use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use domsim_core::analysis::{self, Alpha, ScoreTable, SweepInputs, Variant};
use domsim_core::audio::{self, AudioClip, ManifestEntry};
use domsim_core::config::Config;
use domsim_core::encoders::{
    self, ChannelTrainConfig, DomainEncoder, EmbeddingKind, FinetuneConfig,
};
use domsim_core::enhance::{self, AdaptSettings, EvalItem, Hooks, SeModel};
use domsim_core::layers::{self, derive_seed};
use domsim_core::pipeline::{self, Gan, TrainOutputs};
use domsim_core::scenario::{self, Encoders, SyntheticTask, TaskSpec};
use domsim_core::spectral::{self, Stft};
use domsim_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "domsim", version, about = "Simulate target-domain speech from clean recordings")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the config file, e.g. --set gan.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{kv}` is not KEY=VALUE")))?;
            if k.trim() == "preset" {
                cfg.apply_str(kv)?;
            } else {
                cfg.set(k.trim(), v.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).map_err(Error::from)?;
        Ok(&self.out_dir)
    }
}

#[derive(Args, Clone)]
struct EncoderDirs {
    #[arg(long)]
    noise_encoder: Option<PathBuf>,
    #[arg(long)]
    channel_encoder: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Validate a manifest and cache spectrograms, or write the synthetic task.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "synthetic")]
        manifest: Option<PathBuf>,
        /// Write the synthetic domain-shift task instead.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 40)]
        n_utts: usize,
        #[arg(long, default_value_t = 12)]
        n_eval: usize,
        #[arg(long, default_value_t = 1.5)]
        seconds: f64,
    },
    /// Two-stage noise-encoder training.
    PretrainNoise {
        #[command(flatten)]
        common: Common,
        /// Clips labelled with `noise_class`.
        #[arg(long)]
        manifest: PathBuf,
        /// Target-domain clips for the per-utterance stage.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Channel-encoder training on parallel recordings.
    PretrainChannel {
        #[command(flatten)]
        common: Common,
        /// Clips labelled with `channel_id`, the same utterances on each.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Adversarial training on unpaired source and target clips.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        encoders: EncoderDirs,
    },
    /// Translate source clips into simulated target-domain pairs.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        encoders: EncoderDirs,
    },
    /// Fine-tune the enhancement model on simulated pairs.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// `pairs.jsonl` from `simulate`.
        #[arg(long)]
        pairs: PathBuf,
        /// Held-out `pairs.jsonl` whose `sim_path` is the degraded recording.
        #[arg(long)]
        eval: PathBuf,
        /// Start from this model instead of a fresh one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Validation loss and embedding divergence across encoder checkpoints.
    Divergence {
        #[command(flatten)]
        common: Common,
        /// Directory holding `epoch_*` checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Parallel validation clips.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Simulate and adapt once per perturbation scale.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[command(flatten)]
        encoders: EncoderDirs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0])]
        sigmas: Vec<f64>,
    },
    /// Run configuration ablations on the synthetic task.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::STANDARD.map(String::from).to_vec())]
        variants: Vec<String>,
        #[arg(long, default_value_t = 40)]
        n_utts: usize,
        #[arg(long, default_value_t = 12)]
        n_eval: usize,
        #[arg(long, default_value_t = 1.5)]
        seconds: f64,
    },
    /// Friedman test and Nemenyi critical difference over per-item scores.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Long-format CSV with header `item,system,score`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "0.05")]
        alpha: String,
        /// Treat smaller scores as better.
        #[arg(long)]
        lower_is_better: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Validation) => 2,
        Some(ErrorClass::Io) => 3,
        Some(ErrorClass::CheckpointVersion) => 4,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => 3,
        None => 2,
    }
}

fn load_clips(manifest: &Path) -> Result<Vec<AudioClip>> {
    let entries = audio::read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyManifest(manifest.display().to_string()).into());
    }
    entries
        .iter()
        .map(|e| audio::load_audio(&e.audio_path, e).with_context(|| format!("loading {}", e.audio_path.display())))
        .collect()
}

fn eval_items(manifest: &Path) -> Result<Vec<EvalItem>> {
    Ok(pipeline::read_pairs(manifest)?
        .into_iter()
        .map(|(_, clean, degraded)| EvalItem {
            degraded,
            clean,
            text: None,
        })
        .collect())
}

fn load_encoder(kind: EmbeddingKind, dir: Option<&Path>, cmd: Option<&str>, dim: usize) -> Result<DomainEncoder> {
    let enc = match (cmd, dir) {
        (Some(cmd), _) => DomainEncoder::external(kind, cmd, dim),
        (None, Some(dir)) => DomainEncoder::load(dir)?,
        (None, None) => {
            let flag = match kind {
                EmbeddingKind::Noise => "--noise-encoder",
                EmbeddingKind::Channel => "--channel-encoder",
            };
            return Err(Error::InvalidConfig(format!("{flag} is required without an external command")).into());
        }
    };
    enc.check_dim(dim)?;
    Ok(enc)
}

fn load_encoders(cfg: &Config, dirs: &EncoderDirs) -> Result<Encoders> {
    let dim = cfg.generator.embedding_dim;
    Ok(Encoders {
        noise: load_encoder(
            EmbeddingKind::Noise,
            dirs.noise_encoder.as_deref(),
            cfg.encoder.noise_cmd.as_deref(),
            dim,
        )?,
        channel: load_encoder(
            EmbeddingKind::Channel,
            dirs.channel_encoder.as_deref(),
            cfg.encoder.channel_cmd.as_deref(),
            dim,
        )?,
    })
}

fn finetune(cfg: &Config, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: cfg.encoder.epochs,
        encoder_lr: cfg.encoder.lr,
        head_lr_ratio: cfg.encoder.head_lr_ratio,
        batch_size: cfg.encoder.batch_size,
        seed,
    }
}

fn hooks(cfg: &Config, out: &Path) -> Hooks {
    Hooks {
        metric_cmd: cfg.adapt.metric_cmd.clone(),
        asr_cmd: cfg.adapt.asr_cmd.clone(),
        work_dir: Some(out.join("hook_wavs")),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).map_err(Error::from)?;
    Ok(())
}

fn write_clips(dir: &Path, clips: &[AudioClip], manifest: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let name = match &c.channel_id {
            Some(ch) => format!("{}.{ch}.wav", c.utterance_id),
            None => format!("{}.wav", c.utterance_id),
        };
        audio::write_wav(&dir.join(&name), c)?;
        let rel = dir.strip_prefix(manifest.parent().unwrap_or(Path::new(""))).unwrap_or(dir);
        entries.push(ManifestEntry {
            audio_path: rel.join(name),
            domain: c.domain_tag,
            utterance_id: c.utterance_id.clone(),
            channel_id: c.channel_id.clone(),
            noise_class: c.noise_class.clone(),
            text: None,
        });
    }
    audio::write_manifest(manifest, &entries)?;
    Ok(())
}

fn run(verb: Verb) -> Result<Value> {
    match verb {
        Verb::Prepare {
            common,
            manifest,
            synthetic,
            n_utts,
            n_eval,
            seconds,
        } => {
            let cfg = common.config()?;
            let out = common.out()?;
            if synthetic {
                let spec = TaskSpec {
                    n_source: n_utts,
                    n_target: n_utts,
                    n_eval,
                    seconds,
                    ..TaskSpec::default()
                };
                let task = SyntheticTask::build(spec, common.seed);
                write_clips(&out.join("source"), &task.source, &out.join("source.jsonl"))?;
                write_clips(&out.join("target"), &task.target, &out.join("target.jsonl"))?;
                write_clips(&out.join("parallel"), &task.parallel, &out.join("parallel.jsonl"))?;
                let noise: Vec<AudioClip> = task.noise_set.iter().map(|(c, _)| c.clone()).collect();
                write_clips(&out.join("noise"), &noise, &out.join("noise.jsonl"))?;
                let eval_dir = out.join("eval");
                fs::create_dir_all(&eval_dir).map_err(Error::from)?;
                let mut lines = String::new();
                for e in &task.eval {
                    let id = &e.clean.utterance_id;
                    let rec = pipeline::PairRecord {
                        utterance_id: id.clone(),
                        clean_path: format!("{id}.clean.wav"),
                        sim_path: format!("{id}.sim.wav"),
                        target_reference: id.clone(),
                        sigma_used: 0.0,
                    };
                    audio::write_wav(&eval_dir.join(&rec.clean_path), &e.clean)?;
                    audio::write_wav(&eval_dir.join(&rec.sim_path), &e.degraded)?;
                    lines.push_str(&serde_json::to_string(&rec)?);
                    lines.push('\n');
                }
                fs::write(eval_dir.join("pairs.jsonl"), lines).map_err(Error::from)?;
                return Ok(json!({
                    "verb": "prepare",
                    "synthetic": true,
                    "source": task.source.len(),
                    "target": task.target.len(),
                    "eval": task.eval.len(),
                    "noise": task.noise_set.len(),
                    "parallel": task.parallel.len(),
                    "out_dir": out,
                }));
            }
            let manifest = manifest.expect("clap enforces --manifest");
            let clips = load_clips(&manifest)?;
            let stft = Stft::new(cfg.log_floor);
            let cache = out.join("cache");
            fs::create_dir_all(&cache).map_err(Error::from)?;
            let mut patches = 0;
            let mut seconds_total = 0.0;
            for c in &clips {
                let spec = stft.analyze(c)?;
                patches += spectral::segment_patches(&spec, stft.floor())?.len();
                seconds_total += c.duration_secs();
                let name = match &c.channel_id {
                    Some(ch) => format!("{}.{ch}.spec", c.utterance_id),
                    None => format!("{}.spec", c.utterance_id),
                };
                spectral::write_cache(&cache.join(name), &spec)?;
            }
            Ok(json!({
                "verb": "prepare",
                "clips": clips.len(),
                "patches": patches,
                "seconds": seconds_total,
                "cache_dir": cache,
            }))
        }
        Verb::PretrainNoise {
            common,
            manifest,
            targets,
        } => {
            let cfg = common.config()?;
            let out = common.out()?;
            let clips = load_clips(&manifest)?;
            let labelled = clips
                .into_iter()
                .map(|c| {
                    let label = c.noise_class.clone().ok_or_else(|| Error::Manifest {
                        line: 0,
                        reason: format!("{} has no noise_class", c.utterance_id),
                    })?;
                    Ok((c, label))
                })
                .collect::<domsim_core::Result<Vec<_>>>()?;
            let mut enc = DomainEncoder::standin(
                EmbeddingKind::Noise,
                cfg.encoder.standin.clone(),
                &mut layers::rng(derive_seed(common.seed, "noise_init")),
            );
            let ft = finetune(&cfg, derive_seed(common.seed, "noise_encoder"));
            let (head, stage1) = encoders::pretrain_noise_encoder_stage1(&mut enc, &labelled, &ft)?;
            let mut summary = json!({
                "verb": "pretrain-noise",
                "classes": head.labels,
                "stage1": stage1.last(),
            });
            if let Some(t) = targets {
                let tclips = load_clips(&t)?;
                let (_, stage2) = encoders::pretrain_noise_encoder_stage2(&mut enc, &tclips, &ft)?;
                summary["stage2"] = json!(stage2.last());
            }
            let dir = out.join("noise_encoder");
            enc.save(&dir)?;
            head.save(&dir)?;
            summary["encoder"] = json!(dir);
            write_json(&out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Verb::PretrainChannel { common, manifest } => {
            let cfg = common.config()?;
            let out = common.out()?;
            let clips = load_clips(&manifest)?;
            let mut enc = DomainEncoder::standin(
                EmbeddingKind::Channel,
                cfg.encoder.standin.clone(),
                &mut layers::rng(derive_seed(common.seed, "channel_init")),
            );
            let held_out: BTreeSet<String> = cfg.encoder.held_out_channels.iter().cloned().collect();
            let report = encoders::pretrain_channel_encoder(
                &mut enc,
                &clips,
                &held_out,
                &ChannelTrainConfig {
                    finetune: finetune(&cfg, derive_seed(common.seed, "channel_encoder")),
                    val_fraction: cfg.encoder.val_fraction,
                    checkpoint_dir: Some(out.join("epochs")),
                },
            )?;
            let dir = out.join("channel_encoder");
            enc.save(&dir)?;
            report.head.save(&dir)?;
            analysis::write_rows_csv(&out.join("training.csv"), &report.epochs)?;
            let curve: Vec<analysis::CurvePoint> = report
                .epochs
                .iter()
                .map(|e| analysis::CurvePoint {
                    epoch: e.epoch,
                    val_loss: e.val_loss,
                    divergence: e.divergence,
                })
                .collect();
            fs::write(out.join("training.svg"), analysis::curve_svg(&curve)).map_err(Error::from)?;
            let summary = json!({
                "verb": "pretrain-channel",
                "train_channels": report.train_channels,
                "train_utterances": report.train_utterances.len(),
                "val_utterances": report.val_utterances.len(),
                "last_epoch": report.epochs.last(),
                "encoder": dir,
                "checkpoints": out.join("epochs"),
            });
            write_json(&out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Verb::TrainGan {
            common,
            source,
            target,
            encoders: dirs,
        } => {
            let cfg = common.config()?;
            let out = common.out()?;
            let enc = load_encoders(&cfg, &dirs)?;
            let src = load_clips(&source)?;
            let tgt = load_clips(&target)?;
            let outputs = TrainOutputs {
                checkpoint_dir: Some(out.join("checkpoints")),
                log_path: Some(out.join("losses.jsonl")),
            };
            let outcome = pipeline::train_gan(&src, &tgt, &enc.noise, &enc.channel, &cfg, common.seed, &outputs)?;
            let summary = json!({
                "verb": "train-gan",
                "steps": outcome.reports.len(),
                "final": outcome.reports.last(),
                "checkpoints": outcome.checkpoints,
                "log": out.join("losses.jsonl"),
            });
            write_json(&out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Verb::Simulate {
            common,
            checkpoint,
            source,
            target,
            encoders: dirs,
        } => {
            let mut cfg = common.config()?;
            let gan = Gan::load(&checkpoint, cfg.loss.n_layers)?;
            cfg.generator = gan.generator.config.clone();
            let out = common.out()?;
            let enc = load_encoders(&cfg, &dirs)?;
            let src = load_clips(&source)?;
            let tgt = load_clips(&target)?;
            let pairs = pipeline::simulate_dataset(
                &gan.generator,
                &enc.noise,
                &enc.channel,
                &src,
                &tgt,
                &cfg.sim,
                scenario::embedding_use(&cfg),
                cfg.log_floor,
                common.seed,
            )?;
            let manifest = pipeline::write_simulated(out, &pairs, cfg.log_floor)?;
            let summary = json!({
                "verb": "simulate",
                "pairs": pairs.len(),
                "sigma": cfg.sim.sigma,
                "manifest": manifest,
            });
            Ok(summary)
        }
        Verb::Adapt {
            common,
            pairs,
            eval,
            model,
        } => {
            let cfg = common.config()?;
            let out = common.out()?;
            let clips = pipeline::read_pairs(&pairs)?;
            let sim_pairs = pipeline::pairs_from_clips(&clips, cfg.log_floor)?;
            let eval = eval_items(&eval)?;
            let base = match model {
                Some(dir) => SeModel::load(&dir)?,
                None => scenario::base_se_model(&cfg, common.seed),
            };
            let settings = AdaptSettings {
                epochs: cfg.adapt.epochs,
                lr: cfg.adapt.lr,
                batch_size: 4,
                log_floor: cfg.log_floor,
                seed: derive_seed(common.seed, "adapt"),
            };
            let (adapted, report) =
                enhance::adapt_downstream(&base, &sim_pairs, &eval, &settings, &hooks(&cfg, out))?;
            adapted.save(&out.join("se_model"))?;
            let summary = json!({
                "verb": "adapt",
                "pairs": sim_pairs.len(),
                "report": report,
                "model": out.join("se_model"),
            });
            write_json(&out.join("report.json"), &summary)?;
            Ok(summary)
        }
        Verb::Divergence {
            common,
            checkpoints,
            manifest,
        } => {
            let _cfg = common.config()?;
            let out = common.out()?;
            let dirs = analysis::list_checkpoints(&checkpoints)?;
            let clips = load_clips(&manifest)?;
            let curve = analysis::divergence_curve(&dirs, &clips)?;
            analysis::write_rows_csv(&out.join("divergence.csv"), &curve)?;
            fs::write(out.join("divergence.svg"), analysis::curve_svg(&curve)).map_err(Error::from)?;
            let last = DomainEncoder::load(dirs.last().expect("at least two checkpoints"))?;
            analysis::write_embeddings_csv(&out.join("embeddings.csv"), &last, &clips)?;
            let epochs: Vec<f64> = curve.iter().map(|p| p.epoch as f64).collect();
            let d: Vec<f64> = curve.iter().map(|p| p.divergence).collect();
            Ok(json!({
                "verb": "divergence",
                "checkpoints": dirs.len(),
                "epoch_divergence_correlation": analysis::pearson(&epochs, &d),
                "curve": curve,
                "csv": out.join("divergence.csv"),
            }))
        }
        Verb::Sweep {
            common,
            checkpoint,
            source,
            target,
            eval,
            encoders: dirs,
            sigmas,
        } => {
            let mut cfg = common.config()?;
            let gan = Gan::load(&checkpoint, cfg.loss.n_layers)?;
            cfg.generator = gan.generator.config.clone();
            let out = common.out()?;
            let enc = load_encoders(&cfg, &dirs)?;
            let src = load_clips(&source)?;
            let tgt = load_clips(&target)?;
            let eval = eval_items(&eval)?;
            let inputs = SweepInputs {
                generator: &gan.generator,
                encoders: &enc,
                sources: &src,
                targets: &tgt,
                eval: &eval,
            };
            let rows = analysis::perturbation_sweep(&inputs, &cfg, &sigmas, common.seed)?;
            analysis::write_rows_csv(&out.join("sweep.csv"), &rows)?;
            fs::write(out.join("sweep.svg"), analysis::sweep_svg(&rows)).map_err(Error::from)?;
            Ok(json!({ "verb": "sweep", "rows": rows, "csv": out.join("sweep.csv") }))
        }
        Verb::Ablate {
            common,
            variants,
            n_utts,
            n_eval,
            seconds,
        } => {
            let mut cfg = common.config()?;
            cfg.train.n_source = cfg.train.n_source.min(n_utts);
            cfg.train.n_target = cfg.train.n_source;
            let out = common.out()?;
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            let list = Variant::parse_list(&names, cfg.generator.fusion_strategy)?;
            let task = SyntheticTask::build(
                TaskSpec {
                    n_source: n_utts,
                    n_target: n_utts,
                    n_eval,
                    seconds,
                    ..TaskSpec::default()
                },
                common.seed,
            );
            let enc = scenario::pretrain_encoders(&task, &cfg, common.seed)?;
            let rows = analysis::ablation_driver(&list, &task, &enc, &cfg, common.seed)?;
            analysis::write_rows_csv(&out.join("ablation.csv"), &rows)?;
            fs::write(out.join("ablation.svg"), analysis::ablation_svg(&rows)).map_err(Error::from)?;
            let table = analysis::ablation_table(&rows);
            fs::write(out.join("ablation.txt"), &table).map_err(Error::from)?;
            eprint!("{table}");
            Ok(json!({ "verb": "ablate", "rows": rows, "csv": out.join("ablation.csv") }))
        }
        Verb::Stats {
            common,
            scores,
            alpha,
            lower_is_better,
        } => {
            let _cfg = common.config()?;
            let out = common.out()?;
            let alpha = Alpha::parse(&alpha)?;
            let file = fs::File::open(&scores).map_err(|e| Error::UnreadableFile {
                path: scores.clone(),
                reason: e.to_string(),
            })?;
            let mut table = ScoreTable::from_csv(file)?;
            if lower_is_better {
                table = table.flipped();
            }
            let fr = analysis::friedman_test(&table)?;
            let cd = analysis::nemenyi_cd(fr.k, fr.n, alpha)?;
            let pairs = analysis::nemenyi_pairs(&table.systems, &fr.ranks, cd);
            let ranks: Vec<Value> = table
                .systems
                .iter()
                .zip(&fr.ranks)
                .map(|(s, r)| json!({ "system": s, "mean_rank": r }))
                .collect();
            let bars: Vec<(String, f64)> = table.systems.iter().cloned().zip(fr.ranks.iter().copied()).collect();
            fs::write(out.join("ranks.svg"), analysis::bar_chart_svg("mean rank (1 = best)", &bars))
                .map_err(Error::from)?;
            let summary = json!({
                "verb": "stats",
                "items": fr.n,
                "systems": fr.k,
                "chi2": fr.chi2,
                "df": fr.df,
                "alpha": alpha.value(),
                "critical_difference": cd,
                "ranks": ranks,
                "pairs": pairs,
            });
            write_json(&out.join("stats.json"), &summary)?;
            Ok(summary)
        }
    }
}
