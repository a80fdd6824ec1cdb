//! GAN training and paired-data simulation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use domsim_nn::{Adam, Graph, NodeId, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, DomainTag};
use crate::config::{Config, SimConfig, TrainConfig};
use crate::discriminator::Discriminator;
use crate::encoders::{patches_tensor, perturb_embedding, DomainEmbedding, DomainEncoder, EmbeddingKind};
use crate::error::{Error, Result};
use crate::generator::{Conditioning, Generator};
use crate::layers::{self, derive_seed};
use crate::objectives::{
    adv_d_from_logits, adv_g_from_logits, embedding_l1_graph, pcl_loss_graph, sample_patch_pairs,
    total_generator_loss, LossParts, LossReport, LossWeights, ProjectionHeads,
};
use crate::spectral::{self, SpectroPatch, Spectrogram, Stft};

pub const GAN_CHECKPOINT_VERSION: u32 = 1;

/// Generator, discriminator and contrastive projection heads.
#[derive(Clone, Debug)]
pub struct Gan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: ProjectionHeads,
}

#[derive(Serialize, Deserialize)]
struct GanState {
    version: u32,
    epoch: usize,
    step: u64,
}

impl Gan {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let generator = Generator::new(cfg.generator.clone(), derive_seed(seed, "generator"))?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), derive_seed(seed, "discriminator"))?;
        let heads = ProjectionHeads::new(&tap_channels(&generator, cfg.loss.n_layers)?, derive_seed(seed, "heads"));
        Ok(Self {
            generator,
            discriminator,
            heads,
        })
    }

    pub fn save(&self, dir: &Path, epoch: usize, step: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.generator.save(&dir.join("generator"))?;
        self.discriminator.save(&dir.join("discriminator"))?;
        let mut buf = Vec::new();
        self.heads.store.write_to(&mut buf)?;
        fs::write(dir.join("heads.bin"), buf)?;
        let state = GanState {
            version: GAN_CHECKPOINT_VERSION,
            epoch,
            step,
        };
        fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Gan::save`]. `n_layers` sizes the
    /// projection heads.
    pub fn load(dir: &Path, n_layers: usize) -> Result<Self> {
        let state_path = dir.join("state.json");
        let raw = fs::read(&state_path).map_err(|e| Error::UnreadableFile {
            path: state_path.clone(),
            reason: e.to_string(),
        })?;
        let state: GanState = serde_json::from_slice(&raw)?;
        if state.version != GAN_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: state.version,
                expected: GAN_CHECKPOINT_VERSION,
            });
        }
        let generator = Generator::load(&dir.join("generator"))?;
        let discriminator = Discriminator::load(&dir.join("discriminator"))?;
        let mut heads = ProjectionHeads::new(&tap_channels(&generator, n_layers)?, 0);
        heads.store.read_from(fs::read(dir.join("heads.bin"))?.as_slice())?;
        Ok(Self {
            generator,
            discriminator,
            heads,
        })
    }
}

/// Channel counts of the first `n_layers` generator taps.
pub fn tap_channels(generator: &Generator, n_layers: usize) -> Result<Vec<usize>> {
    let cfg = &generator.config;
    let available = 2 + cfg.n_resblocks;
    if n_layers > available {
        return Err(Error::LayerMismatch {
            expected: n_layers,
            found: available,
        });
    }
    let widths: Vec<usize> = [cfg.base_channels * 2, cfg.trunk_channels()]
        .into_iter()
        .chain(std::iter::repeat(cfg.trunk_channels()).take(cfg.n_resblocks))
        .take(n_layers)
        .collect();
    Ok(widths)
}

/// A target patch with its (frozen) embeddings.
#[derive(Clone, Debug)]
pub struct TargetItem {
    pub patch: SpectroPatch,
    pub noise: DomainEmbedding,
    pub channel: DomainEmbedding,
}

/// Per-step outcome beyond the loss report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub d_real: f64,
    pub d_fake: f64,
    /// Fraction of the (real, fake) decisions the discriminator got right.
    pub d_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub gan: Gan,
    pub reports: Vec<LossReport>,
    pub stats: Vec<StepStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Optimiser state for one GAN run.
pub struct GanTrainer<'a> {
    pub gan: Gan,
    cfg: &'a Config,
    noise_encoder: &'a DomainEncoder,
    channel_encoder: &'a DomainEncoder,
    g_opt: Adam,
    d_opt: Adam,
    h_opt: Adam,
    dropout_rng: layers::Rng,
    seed: u64,
    pub step: u64,
}

impl<'a> GanTrainer<'a> {
    pub fn new(
        gan: Gan,
        cfg: &'a Config,
        noise_encoder: &'a DomainEncoder,
        channel_encoder: &'a DomainEncoder,
        seed: u64,
    ) -> Result<Self> {
        cfg.loss.validate()?;
        let d = gan.generator.embedding_dim();
        for enc in [noise_encoder, channel_encoder] {
            if enc.dim() != d {
                return Err(Error::EncoderDimMismatch {
                    expected: d,
                    found: enc.dim(),
                });
            }
        }
        let t = &cfg.train;
        Ok(Self {
            gan,
            cfg,
            noise_encoder,
            channel_encoder,
            g_opt: Adam::new(t.lr, t.adam_beta1, t.adam_beta2),
            d_opt: Adam::new(t.lr, t.adam_beta1, t.adam_beta2),
            h_opt: Adam::new(t.lr, t.adam_beta1, t.adam_beta2),
            dropout_rng: layers::rng(derive_seed(seed, "dropout")),
            seed,
            step: 0,
        })
    }

    fn conditioning_tensors(&self, targets: &[&TargetItem]) -> (Tensor, Tensor) {
        let d = self.gan.generator.embedding_dim();
        let n = targets.len();
        let pick = |use_it: bool, f: &dyn Fn(&TargetItem) -> &DomainEmbedding| {
            if use_it {
                Tensor::new(&[n, d], targets.iter().flat_map(|t| f(t).vector.clone()).collect())
            } else {
                Tensor::zeros(&[n, d])
            }
        };
        (
            pick(self.cfg.use_noise_embedding, &|t| &t.noise),
            pick(self.cfg.use_channel_embedding, &|t| &t.channel),
        )
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, sources: &[&SpectroPatch], targets: &[&TargetItem]) -> Result<(LossReport, StepStats)> {
        if sources.is_empty() || targets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let w: &LossWeights = &self.cfg.loss;
        let step = self.step + 1;
        let gen = &self.gan.generator;
        let d = gen.embedding_dim();
        let n = sources.len();

        let (n_cond, c_cond) = self.conditioning_tensors(targets);
        let n_true = Tensor::new(&[n, d], targets.iter().flat_map(|t| t.noise.vector.clone()).collect());
        let c_true = Tensor::new(&[n, d], targets.iter().flat_map(|t| t.channel.vector.clone()).collect());
        let x_s_t = patches_tensor(&sources.iter().map(|p| (*p).clone()).collect::<Vec<_>>());
        let x_t_t = patches_tensor(&targets.iter().map(|t| t.patch.clone()).collect::<Vec<_>>());

        // generator forward on the source batch
        let mut g = Graph::new();
        g.freeze(&self.gan.discriminator.store);
        if let Some(net) = self.noise_encoder.standin_net() {
            g.freeze(&net.store);
        }
        if let Some(net) = self.channel_encoder.standin_net() {
            g.freeze(&net.store);
        }
        let x_s = g.constant(x_s_t.clone());
        let x_t = g.constant(x_t_t.clone());
        let nn = g.constant(n_cond);
        let cc = g.constant(c_cond);
        let cond = Conditioning::Embeddings { noise: nn, channel: cc };
        let fwd_s = gen.forward(&mut g, x_s, cond, Some(&mut self.dropout_rng))?;
        let x_g = fwd_s.output;
        let fake_value = g.value(x_g).clone();

        // discriminator update
        self.gan.discriminator.power_step();
        let disc = &self.gan.discriminator;
        let mut gd = Graph::new();
        let real_in = gd.constant(x_t_t.clone());
        let fake_in = gd.constant(fake_value);
        let real_logit = disc.logits(&mut gd, real_in)?;
        let fake_logit = disc.logits(&mut gd, fake_in)?;
        let adv_d = adv_d_from_logits(&mut gd, real_logit, fake_logit);
        let adv_d_value = gd.value(adv_d).item();
        let real_p: Vec<f64> = gd.value(real_logit).data().iter().map(|&l| domsim_nn::graph::sigmoid(l)).collect();
        let fake_p: Vec<f64> = gd.value(fake_logit).data().iter().map(|&l| domsim_nn::graph::sigmoid(l)).collect();
        let mut d_grads = gd.backward(adv_d).for_store(&disc.store);
        drop(gd);
        let real_patches: Vec<SpectroPatch> = targets.iter().map(|t| t.patch.clone()).collect();
        let gp_value = if w.gp_gamma > 0.0 {
            let (gp, gp_grads) = disc.gradient_penalty_with_grad(&real_patches, w.gp_gamma)?;
            for (slot, extra) in d_grads.iter_mut().zip(gp_grads) {
                if let Some(e) = extra {
                    match slot {
                        Some(t) => t.add_assign(&e),
                        None => *slot = Some(e),
                    }
                }
            }
            gp
        } else {
            disc.gradient_penalty(&real_patches)?
        };
        self.d_opt.step(&mut self.gan.discriminator.store, &d_grads);

        // generator losses against the updated discriminator
        let gen = &self.gan.generator;
        let disc = &self.gan.discriminator;
        let fake_logit = disc.logits(&mut g, x_g)?;
        let adv_g = adv_g_from_logits(&mut g, fake_logit, w.non_saturating);

        let l = w.n_layers;
        let src_taps = fwd_s.taps[..l].to_vec();
        let gen_taps = gen.features(&mut g, x_g, cond, Some(&mut self.dropout_rng), l)?;
        let shapes = |g: &Graph, taps: &[NodeId]| taps.iter().map(|&t| g.shape(t)[1..].to_vec()).collect::<Vec<_>>();
        let samples = sample_patch_pairs(
            &shapes(&g, &src_taps),
            &shapes(&g, &gen_taps),
            l,
            w.n_queries,
            derive_seed(self.seed, &format!("pcl_src/{step}")),
        )?;
        let src_keys = detach(&mut g, &src_taps);
        let pcl_src = pcl_loss_graph(&mut g, &self.gan.heads, &gen_taps, &src_keys, &samples, w.tau)?;

        let fwd_t = gen.forward(&mut g, x_t, cond, Some(&mut self.dropout_rng))?;
        let tgt_taps = fwd_t.taps[..l].to_vec();
        let regen_taps = gen.features(&mut g, fwd_t.output, cond, Some(&mut self.dropout_rng), l)?;
        let samples_t = sample_patch_pairs(
            &shapes(&g, &tgt_taps),
            &shapes(&g, &regen_taps),
            l,
            w.n_queries,
            derive_seed(self.seed, &format!("pcl_tgt/{step}")),
        )?;
        let tgt_keys = detach(&mut g, &tgt_taps);
        let pcl_tgt = pcl_loss_graph(&mut g, &self.gan.heads, &regen_taps, &tgt_keys, &samples_t, w.tau)?;

        let nr = self.embedding_term(&mut g, self.noise_encoder, x_g, n_true)?;
        let cc = self.embedding_term(&mut g, self.channel_encoder, x_g, c_true)?;

        let mut total = g.add(adv_g, pcl_src);
        total = g.add(total, pcl_tgt);
        for (term, lambda) in [(nr, w.lambda_nr), (cc, w.lambda_cc)] {
            if let (Some(t), true) = (term, lambda > 0.0) {
                let s = g.scale(t, lambda);
                total = g.add(total, s);
            }
        }
        let value = |g: &Graph, id: Option<NodeId>| id.map(|i| g.value(i).item()).unwrap_or(0.0);
        let parts = LossParts {
            adv_d: adv_d_value,
            adv_g: g.value(adv_g).item(),
            pcl_src: g.value(pcl_src).item(),
            pcl_tgt: g.value(pcl_tgt).item(),
            nr: value(&g, nr),
            cc: value(&g, cc),
            gp: gp_value,
        };
        let grads = g.backward(total);
        let g_grads = grads.for_store(&gen.store);
        let h_grads = grads.for_store(&self.gan.heads.store);
        drop(grads);
        drop(g);
        self.g_opt.step(&mut self.gan.generator.store, &g_grads);
        self.h_opt.step(&mut self.gan.heads.store, &h_grads);

        self.step = step;
        let report = total_generator_loss(step, parts, w);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let correct = real_p.iter().filter(|&&p| p > 0.5).count() + fake_p.iter().filter(|&&p| p < 0.5).count();
        let stats = StepStats {
            d_real: mean(&real_p),
            d_fake: mean(&fake_p),
            d_accuracy: correct as f64 / (real_p.len() + fake_p.len()) as f64,
        };
        Ok((report, stats))
    }

    /// Embedding of the generated batch by a frozen encoder, compared with
    /// the target embedding. External encoders give no term.
    fn embedding_term(
        &self,
        g: &mut Graph,
        encoder: &DomainEncoder,
        x_g: NodeId,
        target: Tensor,
    ) -> Result<Option<NodeId>> {
        if encoder.standin_net().is_none() {
            return Ok(None);
        }
        let e = encoder.forward(g, x_g)?;
        let t = g.constant(target);
        Ok(Some(embedding_l1_graph(g, t, e, self.cfg.loss.l1_reduction)?))
    }
}

fn detach(g: &mut Graph, nodes: &[NodeId]) -> Vec<NodeId> {
    nodes.iter().map(|&n| {
        let v = g.value(n).clone();
        g.constant(v)
    }).collect()
}

/// Patch-level target items with embeddings from frozen encoders.
pub fn target_items(
    targets: &[AudioClip],
    noise_encoder: &DomainEncoder,
    channel_encoder: &DomainEncoder,
    stft: &Stft,
) -> Result<Vec<TargetItem>> {
    let mut items = Vec::new();
    for clip in targets {
        let spec = stft.analyze(clip)?;
        let patches = spectral::segment_patches(&spec, stft.floor())?;
        let noise = noise_encoder.embed_batch(&patches)?;
        let channel = channel_encoder.embed_batch(&patches)?;
        for ((patch, n), c) in patches.into_iter().zip(noise).zip(channel) {
            items.push(TargetItem {
                patch,
                noise: n,
                channel: c,
            });
        }
    }
    Ok(items)
}

/// Pick up to `n` clips uniformly at random, keeping manifest order.
pub fn select_subset(clips: &[AudioClip], n: usize, seed: u64) -> Vec<AudioClip> {
    if clips.len() <= n {
        return clips.to_vec();
    }
    let mut rng = layers::rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, clips.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| clips[i].clone()).collect()
}

/// Where [`train_gan`] writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// Adversarial training on unpaired source and target utterances. Each
/// step consumes one source batch and one target batch; an epoch cycles the
/// larger patch pool once, so both sides are consumed equally.
pub fn train_gan(
    source: &[AudioClip],
    target: &[AudioClip],
    noise_encoder: &DomainEncoder,
    channel_encoder: &DomainEncoder,
    cfg: &Config,
    seed: u64,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    if source.is_empty() {
        return Err(Error::EmptyManifest("source".into()));
    }
    if target.is_empty() {
        return Err(Error::EmptyManifest("target".into()));
    }
    cfg.train.validate()?;
    let tc: &TrainConfig = &cfg.train;
    let source = select_subset(source, tc.n_source, derive_seed(seed, "source_subset"));
    let target = select_subset(target, tc.n_target, derive_seed(seed, "target_subset"));
    let stft = Stft::new(cfg.log_floor);
    let mut src_patches = Vec::new();
    for clip in &source {
        let spec = stft.analyze(clip)?;
        src_patches.extend(spectral::segment_patches(&spec, stft.floor())?);
    }
    let tgt_items = target_items(&target, noise_encoder, channel_encoder, &stft)?;
    train_gan_on_patches(&src_patches, &tgt_items, noise_encoder, channel_encoder, cfg, seed, outputs)
}

/// [`train_gan`] on pre-extracted patches.
pub fn train_gan_on_patches(
    src_patches: &[SpectroPatch],
    tgt_items: &[TargetItem],
    noise_encoder: &DomainEncoder,
    channel_encoder: &DomainEncoder,
    cfg: &Config,
    seed: u64,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    if src_patches.is_empty() {
        return Err(Error::EmptyManifest("source".into()));
    }
    if tgt_items.is_empty() {
        return Err(Error::EmptyManifest("target".into()));
    }
    let tc = &cfg.train;
    tc.validate()?;
    let gan = Gan::new(cfg, seed)?;
    let mut trainer = GanTrainer::new(gan, cfg, noise_encoder, channel_encoder, seed)?;
    let mut log = match &outputs.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    let mut order_rng = layers::rng(derive_seed(seed, "order"));
    let steps_per_epoch = src_patches.len().max(tgt_items.len()).div_ceil(tc.batch_size);
    let mut reports = Vec::new();
    let mut stats = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 1..=tc.epochs {
        let mut s_order: Vec<usize> = (0..src_patches.len()).collect();
        let mut t_order: Vec<usize> = (0..tgt_items.len()).collect();
        s_order.shuffle(&mut order_rng);
        t_order.shuffle(&mut order_rng);
        for k in 0..steps_per_epoch {
            let srcs: Vec<&SpectroPatch> = (0..tc.batch_size)
                .map(|b| &src_patches[s_order[(k * tc.batch_size + b) % s_order.len()]])
                .collect();
            let tgts: Vec<&TargetItem> = (0..tc.batch_size)
                .map(|b| &tgt_items[t_order[(k * tc.batch_size + b) % t_order.len()]])
                .collect();
            let (report, st) = trainer.step(&srcs, &tgts)?;
            if let Some(w) = log.as_mut() {
                report.write_jsonl(&mut *w)?;
            }
            reports.push(report);
            stats.push(st);
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if epoch % tc.checkpoint_every.max(1) == 0 || epoch == tc.epochs {
                let d = dir.join(format!("epoch_{epoch:03}"));
                trainer.gan.save(&d, epoch, trainer.step)?;
                checkpoints.push(d);
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(TrainOutcome {
        gan: trainer.gan,
        reports,
        stats,
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// simulation

/// Anything that maps source patches to target-domain patches under given
/// embeddings.
pub trait PatchTranslator {
    fn embedding_dim(&self) -> usize;
    fn translate(
        &self,
        patches: &[SpectroPatch],
        noise: &DomainEmbedding,
        channel: &DomainEmbedding,
    ) -> Result<Vec<SpectroPatch>>;
}

impl PatchTranslator for Generator {
    fn embedding_dim(&self) -> usize {
        Generator::embedding_dim(self)
    }

    fn translate(
        &self,
        patches: &[SpectroPatch],
        noise: &DomainEmbedding,
        channel: &DomainEmbedding,
    ) -> Result<Vec<SpectroPatch>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(4) {
            out.extend(self.generate_batch(chunk, noise, channel, None)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPair {
    pub clean: Spectrogram,
    pub simulated: Spectrogram,
    pub source_utterance: String,
    pub target_reference: String,
    pub sigma_used: f64,
    /// Sample count of the source clip, for waveform reconstruction.
    pub source_len: usize,
}

/// Which embeddings reach the generator during simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingUse {
    pub noise: bool,
    pub channel: bool,
}

impl Default for EmbeddingUse {
    fn default() -> Self {
        Self {
            noise: true,
            channel: true,
        }
    }
}

/// Utterance-level embeddings of each target clip.
pub fn target_embeddings(
    targets: &[AudioClip],
    noise_encoder: &DomainEncoder,
    channel_encoder: &DomainEncoder,
    stft: &Stft,
) -> Result<Vec<(String, DomainEmbedding, DomainEmbedding)>> {
    targets
        .iter()
        .map(|clip| {
            let spec = stft.analyze(clip)?;
            let patches = spectral::segment_patches(&spec, stft.floor())?;
            Ok((
                clip.utterance_id.clone(),
                noise_encoder.embed_utterance(&patches)?,
                channel_encoder.embed_utterance(&patches)?,
            ))
        })
        .collect()
}

/// Translate every source utterance toward a randomly chosen target
/// utterance's (perturbed) embeddings.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dataset(
    translator: &dyn PatchTranslator,
    noise_encoder: &DomainEncoder,
    channel_encoder: &DomainEncoder,
    sources: &[AudioClip],
    targets: &[AudioClip],
    sim: &SimConfig,
    use_embeddings: EmbeddingUse,
    log_floor: f64,
    seed: u64,
) -> Result<Vec<SimulatedPair>> {
    if sim.sigma < 0.0 || sim.sigma.is_nan() {
        return Err(Error::NegativeSigma(sim.sigma));
    }
    if targets.is_empty() {
        return Err(Error::EmptyManifest("target".into()));
    }
    let d = translator.embedding_dim();
    for enc in [noise_encoder, channel_encoder] {
        if enc.dim() != d {
            return Err(Error::EncoderDimMismatch {
                expected: d,
                found: enc.dim(),
            });
        }
    }
    let stft = Stft::new(log_floor);
    let table = target_embeddings(targets, noise_encoder, channel_encoder, &stft)?;
    let mut pairs = Vec::with_capacity(sources.len());
    for clip in sources {
        let utt_seed = derive_seed(seed, &clip.utterance_id);
        let mut rng = layers::rng(utt_seed);
        let pick = rng.random_range(0..table.len());
        let (target_id, n_t, c_t) = &table[pick];
        let sigma_for = |on: bool| if on { sim.sigma } else { 0.0 };
        let n = perturb_embedding(n_t, sigma_for(sim.perturb_noise), derive_seed(utt_seed, "noise"))?;
        let c = perturb_embedding(c_t, sigma_for(sim.perturb_channel), derive_seed(utt_seed, "channel"))?;
        let n = if use_embeddings.noise { n } else { DomainEmbedding::zeros(d, EmbeddingKind::Noise) };
        let c = if use_embeddings.channel { c } else { DomainEmbedding::zeros(d, EmbeddingKind::Channel) };
        let spec = stft.analyze(clip)?;
        let patches = spectral::segment_patches(&spec, stft.floor())?;
        let generated = translator.translate(&patches, &n, &c)?;
        let simulated = spectral::reassemble(&generated, &spec)?;
        pairs.push(SimulatedPair {
            clean: spec,
            simulated,
            source_utterance: clip.utterance_id.clone(),
            target_reference: target_id.clone(),
            sigma_used: sim.sigma,
            source_len: clip.samples.len(),
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub utterance_id: String,
    pub clean_path: String,
    pub sim_path: String,
    pub target_reference: String,
    pub sigma_used: f64,
}

/// Write `{utt}.clean.wav`, `{utt}.sim.wav` and `pairs.jsonl` under `dir`.
/// Waveforms reuse the clean spectrogram's phase.
pub fn write_simulated(dir: &Path, pairs: &[SimulatedPair], log_floor: f64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stft = Stft::new(log_floor);
    let manifest = dir.join("pairs.jsonl");
    let mut w = BufWriter::new(File::create(&manifest)?);
    for p in pairs {
        let clean_name = format!("{}.clean.wav", p.source_utterance);
        let sim_name = format!("{}.sim.wav", p.source_utterance);
        let mut clean = stft.synthesize_len(&p.clean, p.source_len)?;
        clean.domain_tag = DomainTag::Source;
        let mut simulated = stft.synthesize_len(&p.simulated, p.source_len)?;
        simulated.domain_tag = DomainTag::Target;
        audio::write_wav(&dir.join(&clean_name), &clean)?;
        audio::write_wav(&dir.join(&sim_name), &simulated)?;
        serde_json::to_writer(
            &mut w,
            &PairRecord {
                utterance_id: p.source_utterance.clone(),
                clean_path: clean_name,
                sim_path: sim_name,
                target_reference: p.target_reference.clone(),
                sigma_used: p.sigma_used,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Clips named by a `pairs.jsonl` manifest: `(record, clean, simulated)`.
/// Paths resolve against the manifest's directory.
pub fn read_pairs(manifest: &Path) -> Result<Vec<(PairRecord, AudioClip, AudioClip)>> {
    let raw = fs::read_to_string(manifest).map_err(|e| Error::UnreadableFile {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let load = |name: &str, tag: DomainTag| {
            let entry = audio::ManifestEntry {
                audio_path: base.join(name),
                domain: tag,
                utterance_id: rec.utterance_id.clone(),
                channel_id: None,
                noise_class: None,
                text: None,
            };
            audio::load_audio(&entry.audio_path, &entry)
        };
        let clean = load(&rec.clean_path, DomainTag::Source)?;
        let sim = load(&rec.sim_path, DomainTag::Target)?;
        out.push((rec, clean, sim));
    }
    if out.is_empty() {
        return Err(Error::EmptyPairs);
    }
    Ok(out)
}

/// Spectrogram pairs from loaded clips, trimmed to a common length.
pub fn pairs_from_clips(clips: &[(PairRecord, AudioClip, AudioClip)], log_floor: f64) -> Result<Vec<SimulatedPair>> {
    let stft = Stft::new(log_floor);
    clips
        .iter()
        .map(|(rec, clean, sim)| {
            let len = clean.samples.len().min(sim.samples.len());
            let trim = |c: &AudioClip| AudioClip {
                samples: c.samples[..len].to_vec(),
                ..c.clone()
            };
            Ok(SimulatedPair {
                clean: stft.analyze(&trim(clean))?,
                simulated: stft.analyze(&trim(sim))?,
                source_utterance: rec.utterance_id.clone(),
                target_reference: rec.target_reference.clone(),
                sigma_used: rec.sigma_used,
                source_len: len,
            })
        })
        .collect()
}
