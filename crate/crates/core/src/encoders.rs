//! Noise and channel embedding extractors.
//!
//! Both encoders share one contract: a spectrogram patch goes in, a fixed
//! width [`DomainEmbedding`] comes out. The in-repo stand-in is a stack of
//! strided 3×3 convolutions whose frame-level features are mean-pooled over
//! time and linearly projected to the shared embedding width. Pre-trained
//! backbones plug in through an external command instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use domsim_nn::{Adam, Graph, NodeId, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, Init, Linear, Rng};
use crate::spectral::{self, SpectroPatch, Stft, FREQ_BINS, PATCH_FRAMES};

pub const ENCODER_CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Noise,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    StandinConv,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameAggregation {
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EmbeddingKind,
    pub backbone: Backbone,
    pub native_dim: usize,
    pub projected_dim: usize,
    pub frame_aggregation: FrameAggregation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainEmbedding {
    pub vector: Vec<f64>,
    pub kind: EmbeddingKind,
    pub source_utterance: String,
}

impl DomainEmbedding {
    pub fn new(vector: Vec<f64>, kind: EmbeddingKind, source_utterance: impl Into<String>) -> Self {
        Self {
            vector,
            kind,
            source_utterance: source_utterance.into(),
        }
    }

    pub fn zeros(dim: usize, kind: EmbeddingKind) -> Self {
        Self::new(vec![0.0; dim], kind, "")
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Element-wise mean of several embeddings of the same kind.
    pub fn mean_of(items: &[DomainEmbedding], source_utterance: impl Into<String>) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let d = first.dim();
        let mut acc = vec![0.0; d];
        for e in items {
            if e.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
            for (a, v) in acc.iter_mut().zip(&e.vector) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= items.len() as f64);
        Ok(Self::new(acc, first.kind, source_utterance))
    }
}

/// Architecture of the in-repo convolutional stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandinConfig {
    /// Output channels of each stride-2 convolution.
    pub channels: Vec<usize>,
    pub projected_dim: usize,
    /// Input is mapped to `(x + input_shift) * input_scale` first.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for StandinConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 32],
            projected_dim: 256,
            input_shift: 5.0,
            input_scale: 0.25,
        }
    }
}

impl StandinConfig {
    /// Frequency rows left after the stride-2 stack.
    pub fn pooled_freq_rows(&self) -> usize {
        self.channels
            .iter()
            .fold(FREQ_BINS, |h, _| (h + 2 - 3) / 2 + 1)
    }

    pub fn native_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(1) * self.pooled_freq_rows()
    }
}

/// Convolution stack + projection over a private [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StandinNet {
    pub config: StandinConfig,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    projection: Linear,
}

impl StandinNet {
    pub fn new(config: StandinConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &format!("conv{i}"),
                c_in,
                c,
                3,
                2,
                1,
                true,
                Init::Kaiming,
                rng,
            ));
            c_in = c;
        }
        let projection = Linear::new(
            &mut store,
            "proj",
            config.native_dim(),
            config.projected_dim,
            Init::Normal((1.0 / config.native_dim() as f64).sqrt()),
            rng,
        );
        Self {
            config,
            store,
            convs,
            projection,
        }
    }

    pub fn projection(&self) -> Linear {
        self.projection
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// `x: [N, 1, 129, 128]` -> `[N, D]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = g.shift(x, self.config.input_shift);
        h = g.scale(h, self.config.input_scale);
        for conv in &self.convs {
            h = conv.forward(g, &self.store, h);
            h = g.relu(h);
        }
        // frame-level features: channels × remaining frequency rows
        let (n, c, f, _) = g.value(h).dims4();
        let pooled = g.mean_last_axis(h);
        let flat = g.reshape(pooled, &[n, c * f]);
        self.projection.forward(g, &self.store, flat)
    }
}

/// Contract for an external embedding extractor: invoked as
/// `cmd <input.spec> <output.f32>`, it reads a spectrogram cache file and
/// writes `projected_dim` little-endian f32 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalBackbone {
    pub command: String,
}

impl ExternalBackbone {
    pub fn embed(&self, patch: &SpectroPatch, dim: usize, work_dir: &Path) -> Result<Vec<f64>> {
        let spec = patch_as_spectrogram(patch);
        let stem = format!("{}_{}", sanitize(&patch.parent_utterance), patch.origin_frame);
        let input = work_dir.join(format!("{stem}.spec"));
        let output = work_dir.join(format!("{stem}.f32"));
        spectral::write_cache(&input, &spec)?;
        let status = Command::new(&self.command)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| Error::ExternalTool(format!("{}: {e}", self.command)))?;
        if !status.success() {
            return Err(Error::ExternalTool(format!("{} exited with {status}", self.command)));
        }
        let bytes = fs::read(&output)?;
        let vector: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if vector.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: vector.len(),
            });
        }
        Ok(vector)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn patch_as_spectrogram(patch: &SpectroPatch) -> spectral::Spectrogram {
    spectral::Spectrogram {
        log_mag: patch.values.clone(),
        phase: vec![0.0; patch.values.len()],
        frames: PATCH_FRAMES,
        frame_hop: spectral::HOP,
        fft_size: spectral::FFT_SIZE,
        utterance_id: patch.parent_utterance.clone(),
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Standin(StandinNet),
    External(ExternalBackbone),
}

/// A noise encoder or a channel encoder.
#[derive(Clone, Debug)]
pub struct DomainEncoder {
    pub spec: EncoderSpec,
    pub body: EncoderBody,
}

#[derive(Serialize, Deserialize)]
struct EncoderCheckpointMeta {
    version: u32,
    spec: EncoderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standin: Option<StandinConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    external: Option<ExternalBackbone>,
}

impl DomainEncoder {
    pub fn standin(kind: EmbeddingKind, config: StandinConfig, rng: &mut Rng) -> Self {
        let spec = EncoderSpec {
            kind,
            backbone: Backbone::StandinConv,
            native_dim: config.native_dim(),
            projected_dim: config.projected_dim,
            frame_aggregation: FrameAggregation::MeanPool,
        };
        Self {
            spec,
            body: EncoderBody::Standin(StandinNet::new(config, rng)),
        }
    }

    pub fn external(kind: EmbeddingKind, command: impl Into<String>, dim: usize) -> Self {
        Self {
            spec: EncoderSpec {
                kind,
                backbone: Backbone::External,
                native_dim: dim,
                projected_dim: dim,
                frame_aggregation: FrameAggregation::MeanPool,
            },
            body: EncoderBody::External(ExternalBackbone {
                command: command.into(),
            }),
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.spec.kind
    }

    pub fn dim(&self) -> usize {
        self.spec.projected_dim
    }

    pub fn standin_net(&self) -> Option<&StandinNet> {
        match &self.body {
            EncoderBody::Standin(n) => Some(n),
            EncoderBody::External(_) => None,
        }
    }

    pub fn standin_net_mut(&mut self) -> Option<&mut StandinNet> {
        match &mut self.body {
            EncoderBody::Standin(n) => Some(n),
            EncoderBody::External(_) => None,
        }
    }

    /// Error unless this encoder emits `expected`-wide embeddings.
    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimMismatch {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }

    /// Differentiable forward on `[N, 1, 129, 128]`. Only stand-in encoders
    /// can take part in a graph.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match &self.body {
            EncoderBody::Standin(net) => Ok(net.forward(g, x)),
            EncoderBody::External(_) => Err(Error::InvalidConfig(
                "external encoders cannot be differentiated through".into(),
            )),
        }
    }

    pub fn embed(&self, patch: &SpectroPatch) -> Result<DomainEmbedding> {
        Ok(self.embed_batch(std::slice::from_ref(patch))?.remove(0))
    }

    pub fn embed_batch(&self, patches: &[SpectroPatch]) -> Result<Vec<DomainEmbedding>> {
        for p in patches {
            p.validate()?;
        }
        match &self.body {
            EncoderBody::Standin(net) => {
                let mut g = Graph::new();
                let x = g.constant(patches_tensor(patches));
                let y = net.forward(&mut g, x);
                let d = self.dim();
                Ok(g.value(y)
                    .data()
                    .chunks(d)
                    .zip(patches)
                    .map(|(v, p)| DomainEmbedding::new(v.to_vec(), self.kind(), &p.parent_utterance))
                    .collect())
            }
            EncoderBody::External(ext) => {
                let dir = std::env::temp_dir().join(format!("domsim-ext-{}", std::process::id()));
                fs::create_dir_all(&dir)?;
                patches
                    .iter()
                    .map(|p| {
                        let v = ext.embed(p, self.dim(), &dir)?;
                        Ok(DomainEmbedding::new(v, self.kind(), &p.parent_utterance))
                    })
                    .collect()
            }
        }
    }

    /// Utterance-level embedding: mean over the utterance's patch embeddings.
    pub fn embed_utterance(&self, patches: &[SpectroPatch]) -> Result<DomainEmbedding> {
        let items = self.embed_batch(patches)?;
        let id = patches.first().map(|p| p.parent_utterance.clone()).unwrap_or_default();
        DomainEmbedding::mean_of(&items, id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (standin, external) = match &self.body {
            EncoderBody::Standin(n) => (Some(n.config.clone()), None),
            EncoderBody::External(e) => (None, Some(e.clone())),
        };
        let meta = EncoderCheckpointMeta {
            version: ENCODER_CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            standin,
            external,
        };
        fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::new();
        if let EncoderBody::Standin(n) = &self.body {
            n.store.write_to(&mut buf)?;
        }
        fs::write(dir.join("params.bin"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("spec.json");
        let raw = fs::read(&meta_path).map_err(|e| Error::UnreadableFile {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
        let meta: EncoderCheckpointMeta = serde_json::from_slice(&raw)?;
        if meta.version != ENCODER_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: meta.version,
                expected: ENCODER_CHECKPOINT_VERSION,
            });
        }
        match (meta.spec.backbone, meta.standin, meta.external) {
            (Backbone::StandinConv, Some(cfg), _) => {
                let mut net = StandinNet::new(cfg, &mut layers::rng(0));
                let bytes = fs::read(dir.join("params.bin"))?;
                net.store.read_from(bytes.as_slice())?;
                Ok(Self {
                    spec: meta.spec,
                    body: EncoderBody::Standin(net),
                })
            }
            (Backbone::External, _, Some(ext)) => Ok(Self {
                spec: meta.spec,
                body: EncoderBody::External(ext),
            }),
            _ => Err(Error::InvalidConfig(format!(
                "{} does not describe its backbone",
                meta_path.display()
            ))),
        }
    }
}

/// Stack patches into a `[N, 1, 129, 128]` tensor.
pub fn patches_tensor(patches: &[SpectroPatch]) -> Tensor {
    let mut data = Vec::with_capacity(patches.len() * FREQ_BINS * PATCH_FRAMES);
    for p in patches {
        data.extend_from_slice(&p.values);
    }
    Tensor::new(&[patches.len(), 1, FREQ_BINS, PATCH_FRAMES], data)
}

// ---------------------------------------------------------------------------
// classification fine-tuning

/// Linear classification head `[num_classes × D]`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub store: ParamStore,
    pub layer: Linear,
    pub labels: Vec<String>,
}

impl ClassifierHead {
    pub fn new(dim: usize, labels: Vec<String>, rng: &mut Rng) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::SingleClassDataset);
        }
        let mut store = ParamStore::new();
        let layer = Linear::new(
            &mut store,
            "head",
            dim,
            labels.len(),
            Init::Normal((1.0 / dim as f64).sqrt()),
            rng,
        );
        Ok(Self {
            store,
            layer,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("head_labels.json"), serde_json::to_vec(&self.labels)?)?;
        let mut buf = Vec::new();
        self.store.write_to(&mut buf)?;
        fs::write(dir.join("head.bin"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path, dim: usize) -> Result<Self> {
        let labels: Vec<String> = serde_json::from_slice(&fs::read(dir.join("head_labels.json"))?)?;
        let mut head = Self::new(dim, labels, &mut layers::rng(0))?;
        head.store.read_from(fs::read(dir.join("head.bin"))?.as_slice())?;
        Ok(head)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Encoder learning rate; the head uses `head_lr_ratio` times this.
    pub encoder_lr: f64,
    pub head_lr_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            encoder_lr: 1e-4,
            head_lr_ratio: 10.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy on the training set, evaluated after the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

/// A labelled patch for classification training.
#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub patch: SpectroPatch,
    pub label: usize,
}

fn logits_graph(
    encoder: &DomainEncoder,
    head: &ClassifierHead,
    g: &mut Graph,
    patches: &[&SpectroPatch],
) -> Result<NodeId> {
    let owned: Vec<SpectroPatch> = patches.iter().map(|p| (*p).clone()).collect();
    let x = g.constant(patches_tensor(&owned));
    let e = encoder.forward(g, x)?;
    Ok(head.layer.forward(g, &head.store, e))
}

/// Mean cross-entropy and accuracy of `encoder`+`head` on `data`.
pub fn evaluate_classifier(
    encoder: &DomainEncoder,
    head: &ClassifierHead,
    data: &[LabeledPatch],
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(16) {
        let mut g = Graph::new();
        let refs: Vec<&SpectroPatch> = chunk.iter().map(|d| &d.patch).collect();
        let logits = logits_graph(encoder, head, &mut g, &refs)?;
        let targets: Vec<usize> = chunk.iter().map(|d| d.label).collect();
        let l = g.cross_entropy(logits, &targets);
        loss += g.value(l).item() * chunk.len() as f64;
        let k = head.num_classes();
        for (row, &t) in g.value(logits).data().chunks(k).zip(&targets) {
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            correct += usize::from(best == t);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Cross-entropy fine-tuning of encoder + head with the encoder on a
/// smaller learning rate. `after_epoch` sees the state after every epoch.
pub fn train_classifier(
    encoder: &mut DomainEncoder,
    head: &mut ClassifierHead,
    data: &[LabeledPatch],
    cfg: &FinetuneConfig,
    mut after_epoch: impl FnMut(usize, &DomainEncoder, &ClassifierHead) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes: BTreeSet<usize> = data.iter().map(|d| d.label).collect();
    if classes.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    if encoder.standin_net().is_none() {
        return Err(Error::InvalidConfig("only stand-in encoders can be fine-tuned in-repo".into()));
    }
    let mut enc_opt = Adam::new(cfg.encoder_lr, 0.9, 0.999);
    let mut head_opt = Adam::new(cfg.encoder_lr * cfg.head_lr_ratio, 0.9, 0.999);
    let mut rng = layers::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let refs: Vec<&SpectroPatch> = batch.iter().map(|&i| &data[i].patch).collect();
            let logits = logits_graph(encoder, head, &mut g, &refs)?;
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
            let loss = g.cross_entropy(logits, &targets);
            let grads = g.backward(loss);
            let net = encoder.standin_net_mut().expect("checked above");
            let enc_grads = grads.for_store(&net.store);
            let head_grads = grads.for_store(&head.store);
            drop(g);
            enc_opt.step(&mut net.store, &enc_grads);
            head_opt.step(&mut head.store, &head_grads);
        }
        let (loss, accuracy) = evaluate_classifier(encoder, head, data)?;
        stats.push(EpochStats {
            epoch: epoch + 1,
            loss,
            accuracy,
        });
        after_epoch(epoch + 1, encoder, head)?;
    }
    Ok(stats)
}

fn clip_patches(stft: &Stft, clip: &AudioClip) -> Result<Vec<SpectroPatch>> {
    let spec = stft.analyze(clip)?;
    spectral::segment_patches(&spec, stft.floor())
}

/// First noise-encoder stage: classification over labelled noise clips.
/// Returns the trained head and per-epoch training statistics.
pub fn pretrain_noise_encoder_stage1(
    encoder: &mut DomainEncoder,
    dataset: &[(AudioClip, String)],
    cfg: &FinetuneConfig,
) -> Result<(ClassifierHead, Vec<EpochStats>)> {
    let labels: Vec<String> = dataset
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    let stft = Stft::default();
    let mut data = Vec::new();
    for (clip, label) in dataset {
        let idx = labels.binary_search(label).expect("label collected above");
        for patch in clip_patches(&stft, clip)? {
            data.push(LabeledPatch { patch, label: idx });
        }
    }
    let mut head = ClassifierHead::new(encoder.dim(), labels, &mut layers::rng(cfg.seed ^ 0x51))?;
    let stats = train_classifier(encoder, &mut head, &data, cfg, |_, _, _| Ok(()))?;
    Ok((head, stats))
}

/// Second noise-encoder stage: every target utterance is its own class,
/// trained with a fresh head.
pub fn pretrain_noise_encoder_stage2(
    encoder: &mut DomainEncoder,
    target_utterances: &[AudioClip],
    cfg: &FinetuneConfig,
) -> Result<(ClassifierHead, Vec<EpochStats>)> {
    if target_utterances.len() < 2 {
        return Err(Error::TooFewUtterances(target_utterances.len()));
    }
    let stft = Stft::default();
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(target_utterances.len());
    for (i, clip) in target_utterances.iter().enumerate() {
        labels.push(clip.utterance_id.clone());
        for patch in clip_patches(&stft, clip)? {
            data.push(LabeledPatch { patch, label: i });
        }
    }
    let mut head = ClassifierHead::new(encoder.dim(), labels, &mut layers::rng(cfg.seed ^ 0x52))?;
    let stats = train_classifier(encoder, &mut head, &data, cfg, |_, _, _| Ok(()))?;
    Ok((head, stats))
}

#[derive(Clone, Debug)]
pub struct ChannelTrainConfig {
    pub finetune: FinetuneConfig,
    /// Fraction of utterances (sorted by id) kept for validation.
    pub val_fraction: f64,
    /// Write `epoch_XXX` checkpoints (encoder + head) here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ChannelTrainConfig {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig {
                epochs: 30,
                ..FinetuneConfig::default()
            },
            val_fraction: 0.25,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub divergence: f64,
}

#[derive(Clone, Debug)]
pub struct ChannelTrainReport {
    pub head: ClassifierHead,
    pub epochs: Vec<ChannelEpoch>,
    pub train_channels: Vec<String>,
    pub train_utterances: Vec<String>,
    pub val_utterances: Vec<String>,
}

/// Parallel recordings grouped as utterance -> channel -> clip.
pub type ParallelSet = BTreeMap<String, BTreeMap<String, AudioClip>>;

pub fn group_parallel(clips: &[AudioClip]) -> ParallelSet {
    let mut set: ParallelSet = BTreeMap::new();
    for c in clips {
        if let Some(ch) = &c.channel_id {
            set.entry(c.utterance_id.clone())
                .or_default()
                .insert(ch.clone(), c.clone());
        }
    }
    set
}

/// Channel-id classification over parallel recordings, never showing the
/// held-out channels. Tracks validation loss and embedding divergence per
/// epoch on the validation utterances.
pub fn pretrain_channel_encoder(
    encoder: &mut DomainEncoder,
    parallel: &[AudioClip],
    held_out_channels: &BTreeSet<String>,
    cfg: &ChannelTrainConfig,
) -> Result<ChannelTrainReport> {
    let set = group_parallel(parallel);
    if !set.values().any(|chs| chs.len() >= 2) {
        return Err(Error::NoParallelData);
    }
    let all_channels: BTreeSet<String> = set.values().flat_map(|m| m.keys().cloned()).collect();
    let train_channels: Vec<String> = all_channels
        .iter()
        .filter(|c| !held_out_channels.contains(*c))
        .cloned()
        .collect();
    if train_channels.is_empty() {
        return Err(Error::HeldOutCoversAll);
    }
    if train_channels.len() < 2 {
        return Err(Error::SingleClassDataset);
    }
    let utterances: Vec<String> = set.keys().cloned().collect();
    let n_val = if utterances.len() >= 2 {
        ((utterances.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, utterances.len() - 1)
    } else {
        0
    };
    let (train_utts, val_utts) = utterances.split_at(utterances.len() - n_val);
    let stft = Stft::default();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut val_patches: BTreeMap<String, BTreeMap<String, Vec<SpectroPatch>>> = BTreeMap::new();
    for (utt, chans) in &set {
        let is_val = val_utts.contains(utt);
        for (ch, clip) in chans {
            let patches = clip_patches(&stft, clip)?;
            if is_val {
                val_patches
                    .entry(utt.clone())
                    .or_default()
                    .insert(ch.clone(), patches.clone());
            }
            let Some(label) = train_channels.iter().position(|c| c == ch) else {
                continue;
            };
            let bucket = if is_val { &mut val } else { &mut train };
            bucket.extend(patches.into_iter().map(|patch| LabeledPatch { patch, label }));
        }
    }
    let mut head = ClassifierHead::new(
        encoder.dim(),
        train_channels.clone(),
        &mut layers::rng(cfg.finetune.seed ^ 0x53),
    )?;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let stats = train_classifier(encoder, &mut head, &train, &cfg.finetune, |epoch, enc, hd| {
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            evaluate_classifier(enc, hd, &val)?.0
        };
        let divergence = if val_patches.is_empty() {
            f64::NAN
        } else {
            utterance_divergence(enc, &val_patches)?
        };
        curve.push((val_loss, divergence));
        if let Some(dir) = &cfg.checkpoint_dir {
            let d = dir.join(format!("epoch_{epoch:03}"));
            enc.save(&d)?;
            hd.save(&d)?;
        }
        Ok(())
    })?;
    let epochs = stats
        .iter()
        .zip(&curve)
        .map(|(s, &(val_loss, divergence))| ChannelEpoch {
            epoch: s.epoch,
            train_loss: s.loss,
            val_loss,
            divergence,
        })
        .collect();
    Ok(ChannelTrainReport {
        head,
        epochs,
        train_channels,
        train_utterances: train_utts.to_vec(),
        val_utterances: val_utts.to_vec(),
    })
}

/// Embedding divergence of utterance-level embeddings computed by `encoder`.
pub fn utterance_divergence(
    encoder: &DomainEncoder,
    patches: &BTreeMap<String, BTreeMap<String, Vec<SpectroPatch>>>,
) -> Result<f64> {
    let mut emb: BTreeMap<String, BTreeMap<String, DomainEmbedding>> = BTreeMap::new();
    for (utt, chans) in patches {
        for (ch, ps) in chans {
            emb.entry(utt.clone())
                .or_default()
                .insert(ch.clone(), encoder.embed_utterance(ps)?);
        }
    }
    embedding_divergence(&emb)
}

/// Mean pairwise Euclidean distance between the channel embeddings of the
/// same utterance, averaged over utterances:
/// `Σ_u Σ_{i<j} ‖c_i − c_j‖₂ / (|U| · C(K, 2))`.
pub fn embedding_divergence(
    embeddings: &BTreeMap<String, BTreeMap<String, DomainEmbedding>>,
) -> Result<f64> {
    let mut utts = embeddings.values();
    let first = utts.next().ok_or(Error::EmptyBatch)?;
    let channels: Vec<&String> = first.keys().collect();
    let k = channels.len();
    if k < 2 {
        return Err(Error::TooFewChannels(k));
    }
    for m in embeddings.values() {
        if m.len() != k || !m.keys().zip(&channels).all(|(a, b)| a == *b) {
            return Err(Error::RaggedChannelSets);
        }
    }
    let mut total = 0.0;
    for m in embeddings.values() {
        let vs: Vec<&DomainEmbedding> = m.values().collect();
        for i in 0..k {
            for j in i + 1..k {
                if vs[i].dim() != vs[j].dim() {
                    return Err(Error::DimMismatch {
                        expected: vs[i].dim(),
                        found: vs[j].dim(),
                    });
                }
                total += vs[i]
                    .vector
                    .iter()
                    .zip(&vs[j].vector)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(total / (embeddings.len() as f64 * pairs))
}

/// `e + ε`, `ε ~ N(0, σ² I)`, deterministic in `seed`.
pub fn perturb_embedding(e: &DomainEmbedding, sigma: f64, seed: u64) -> Result<DomainEmbedding> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(e.clone());
    }
    let mut rng = layers::rng(seed);
    let dist = Normal::new(0.0, sigma).map_err(|_| Error::NegativeSigma(sigma))?;
    let vector = e.vector.iter().map(|v| v + dist.sample(&mut rng)).collect();
    Ok(DomainEmbedding {
        vector,
        kind: e.kind,
        source_utterance: e.source_utterance.clone(),
    })
}
