//! Encoder / residual / decoder generator with embedding conditioning.

use std::fs;
use std::path::Path;

use domsim_nn::{Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{patches_tensor, DomainEmbedding};
use crate::error::{Error, Result};
use crate::layers::{self, dropout_mask, Conv2d, ConvTranspose2d, Init, Linear, Rng};
use crate::spectral::{SpectroPatch, FREQ_BINS, PATCH_FRAMES};

pub const GENERATOR_CHECKPOINT_VERSION: u32 = 1;
const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Concat,
    Addition,
    FilmEncoderOnly,
    FilmAllShared,
    FilmAllIndependent,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Concat,
        FusionStrategy::Addition,
        FusionStrategy::FilmEncoderOnly,
        FusionStrategy::FilmAllShared,
        FusionStrategy::FilmAllIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Addition => "addition",
            FusionStrategy::FilmEncoderOnly => "film_encoder_only",
            FusionStrategy::FilmAllShared => "film_all_shared",
            FusionStrategy::FilmAllIndependent => "film_all_independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_resblocks: usize,
    pub dropout_rate: f64,
    pub fusion_strategy: FusionStrategy,
    pub embedding_dim: usize,
    /// Add the input patch to the final projection.
    #[serde(default)]
    pub global_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_resblocks: 9,
            dropout_rate: 0.5,
            fusion_strategy: FusionStrategy::FilmAllIndependent,
            embedding_dim: 256,
            global_skip: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks < 1 {
            return Err(Error::InvalidConfig("n_resblocks must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.base_channels < 1 || self.embedding_dim < 1 {
            return Err(Error::InvalidConfig("base_channels and embedding_dim must be positive".into()));
        }
        Ok(())
    }

    /// Width of the residual trunk.
    pub fn trunk_channels(&self) -> usize {
        self.base_channels * 4
    }

    /// Width of the projected embedding appended by the concat variant.
    pub fn concat_dim(&self) -> usize {
        self.base_channels
    }

    /// Number of FiLM-modulated sites (encoder output + residual outputs).
    pub fn film_sites(&self) -> usize {
        match self.fusion_strategy {
            FusionStrategy::FilmAllShared | FusionStrategy::FilmAllIndependent => 1 + self.n_resblocks,
            FusionStrategy::FilmEncoderOnly => 1,
            _ => 0,
        }
    }
}

/// Per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FilmParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }
}

/// `F'[c,h,w] = W[c]·F[c,h,w] + b[c]` on a `[C, H, W]` map.
pub fn film_apply(features: &Tensor, p: &FilmParams) -> Result<Tensor> {
    if features.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![p.weight.len(), 0, 0],
            found: features.shape().to_vec(),
        });
    }
    let c = features.shape()[0];
    if p.weight.len() != c || p.bias.len() != c {
        return Err(Error::DimMismatch {
            expected: c,
            found: p.weight.len(),
        });
    }
    let plane = features.numel() / c.max(1);
    let mut out = features.clone();
    for (ch, block) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in block {
            *v = p.weight[ch] * *v + p.bias[ch];
        }
    }
    Ok(out)
}

/// Two linear maps from the summed embedding to per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct FilmLayer {
    pub to_weight: Linear,
    pub to_bias: Linear,
}

impl FilmLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, channels: usize, rng: &mut Rng) -> Self {
        let to_weight = Linear::new(store, &format!("{name}.w"), dim, channels, Init::Zeros, rng);
        let to_bias = Linear::new(store, &format!("{name}.b"), dim, channels, Init::Zeros, rng);
        store.set(to_weight.bias, Tensor::ones(&[channels]));
        Self { to_weight, to_bias }
    }

    /// `s: [N, D]` -> (`W`, `b`) each `[N, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: NodeId) -> (NodeId, NodeId) {
        (
            self.to_weight.forward(g, store, s),
            self.to_bias.forward(g, store, s),
        )
    }

    /// Force an identity modulation regardless of the embedding.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for (lin, b) in [(self.to_weight, 1.0), (self.to_bias, 0.0)] {
            let w_shape = store.get(lin.weight).shape().to_vec();
            store.set(lin.weight, Tensor::zeros(&w_shape));
            let b_shape = store.get(lin.bias).shape().to_vec();
            store.set(lin.bias, Tensor::full(&b_shape, b));
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// How the embeddings enter a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning {
    /// Noise and channel embeddings, each `[N, D]`.
    Embeddings { noise: NodeId, channel: NodeId },
    /// No modulation at all; the concat variant sees a zero embedding.
    Unconditioned,
}

pub struct GeneratorOutput {
    pub output: NodeId,
    /// Encoder-output fused features (after any fusion step).
    pub fused: NodeId,
    /// down1, down2, then one entry per residual block, each taken before
    /// that site's modulation. Truncated when the pass stops early.
    pub taps: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    down1: Conv2d,
    down2: Conv2d,
    blocks: Vec<ResBlock>,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    out: Conv2d,
    film: Vec<FilmLayer>,
    fuse_proj: Option<Linear>,
    fuse_conv: Option<Conv2d>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorCheckpointMeta {
    version: u32,
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = layers::rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let c1 = config.base_channels;
        let c2 = c1 * 2;
        let c4 = config.trunk_channels();
        let d = config.embedding_dim;
        let s = &mut store;
        let down1 = Conv2d::new(s, "down1", 1, c2, 3, 2, 1, true, Init::Kaiming, rng);
        let down2 = Conv2d::new(s, "down2", c2, c4, 3, 2, 1, true, Init::Kaiming, rng);
        let blocks = (0..config.n_resblocks)
            .map(|i| ResBlock {
                conv1: Conv2d::new(s, &format!("res{i}.conv1"), c4, c4, 3, 1, 1, true, Init::Kaiming, rng),
                conv2: Conv2d::new(s, &format!("res{i}.conv2"), c4, c4, 3, 1, 1, true, Init::Kaiming, rng),
            })
            .collect();
        let up1 = ConvTranspose2d::new(s, "up1", c4, c2, 3, 2, 1, (0, 1), Init::Kaiming, rng);
        let up2 = ConvTranspose2d::new(s, "up2", c2, c1, 3, 2, 1, (0, 1), Init::Kaiming, rng);
        let out_init = if config.global_skip {
            Init::Normal(1e-3)
        } else {
            Init::Kaiming
        };
        let out = Conv2d::new(s, "out", c1, 1, 3, 1, 1, true, out_init, rng);
        let n_film = match config.fusion_strategy {
            FusionStrategy::FilmAllIndependent => 1 + config.n_resblocks,
            FusionStrategy::FilmAllShared | FusionStrategy::FilmEncoderOnly => 1,
            _ => 0,
        };
        let film = (0..n_film)
            .map(|i| FilmLayer::new(s, &format!("film{i}"), d, c4, rng))
            .collect();
        let (fuse_proj, fuse_conv) = match config.fusion_strategy {
            FusionStrategy::Addition => (
                Some(Linear::new(s, "fuse_proj", d, c4, Init::Normal((1.0 / d as f64).sqrt()), rng)),
                None,
            ),
            FusionStrategy::Concat => {
                let p = config.concat_dim();
                (
                    Some(Linear::new(s, "fuse_proj", d, p, Init::Normal((1.0 / d as f64).sqrt()), rng)),
                    Some(Conv2d::new(s, "fuse_conv", c4 + p, c4, 1, 1, 0, true, Init::Kaiming, rng)),
                )
            }
            _ => (None, None),
        };
        Ok(Self {
            config,
            store,
            down1,
            down2,
            blocks,
            up1,
            up2,
            out,
            film,
            fuse_proj,
            fuse_conv,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn film_layers(&self) -> &[FilmLayer] {
        &self.film
    }

    /// Channel count of the encoder output after fusion (before any
    /// channel-restoring convolution).
    pub fn encoder_output_channels(&self) -> usize {
        match self.config.fusion_strategy {
            FusionStrategy::Concat => self.config.trunk_channels() + self.config.concat_dim(),
            _ => self.config.trunk_channels(),
        }
    }

    fn film_for_site(&self, site: usize) -> Option<&FilmLayer> {
        match self.config.fusion_strategy {
            FusionStrategy::FilmAllIndependent => self.film.get(site),
            FusionStrategy::FilmAllShared => self.film.first(),
            FusionStrategy::FilmEncoderOnly if site == 0 => self.film.first(),
            _ => None,
        }
    }

    /// Force every FiLM site to identity modulation (`W = 1`, `b = 0`).
    pub fn set_film_identity(&mut self) {
        for f in self.film.clone() {
            f.set_identity(&mut self.store);
        }
    }

    /// FiLM parameters at `block_index` for the given embeddings.
    pub fn film_compute(
        &self,
        noise: &DomainEmbedding,
        channel: &DomainEmbedding,
        block_index: usize,
    ) -> Result<FilmParams> {
        let d = self.embedding_dim();
        for e in [noise, channel] {
            if e.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
        }
        let layer = self.film_for_site(block_index).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no FiLM site {block_index} under {}",
                self.config.fusion_strategy.name()
            ))
        })?;
        let mut g = Graph::new();
        let n = g.constant(Tensor::new(&[1, d], noise.vector.clone()));
        let c = g.constant(Tensor::new(&[1, d], channel.vector.clone()));
        let s = g.add(n, c);
        let (w, b) = layer.forward(&mut g, &self.store, s);
        Ok(FilmParams {
            weight: g.value(w).data().to_vec(),
            bias: g.value(b).data().to_vec(),
        })
    }

    fn fused_embedding(&self, g: &mut Graph, cond: Conditioning, n: usize) -> Option<NodeId> {
        match cond {
            Conditioning::Embeddings { noise, channel } => Some(g.add(noise, channel)),
            Conditioning::Unconditioned => match self.config.fusion_strategy {
                FusionStrategy::Concat => Some(g.constant(Tensor::zeros(&[n, self.embedding_dim()]))),
                _ => None,
            },
        }
    }

    fn modulate(&self, g: &mut Graph, h: NodeId, s: Option<NodeId>, site: usize) -> NodeId {
        match (s, self.film_for_site(site)) {
            (Some(s), Some(layer)) => {
                let (w, b) = layer.forward(g, &self.store, s);
                g.channel_affine(h, w, b)
            }
            _ => h,
        }
    }

    /// Full forward. `x: [N, 1, 129, 128]`. `dropout_rng` enables training
    /// mode; `None` is deterministic inference.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        cond: Conditioning,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<GeneratorOutput> {
        self.run(g, x, cond, dropout_rng, None)
    }

    /// Encoder and the first residual blocks only, returning `n_taps` taps.
    pub fn features(
        &self,
        g: &mut Graph,
        x: NodeId,
        cond: Conditioning,
        dropout_rng: Option<&mut Rng>,
        n_taps: usize,
    ) -> Result<Vec<NodeId>> {
        if n_taps > 2 + self.blocks.len() {
            return Err(Error::LayerMismatch {
                expected: n_taps,
                found: 2 + self.blocks.len(),
            });
        }
        Ok(self.run(g, x, cond, dropout_rng, Some(n_taps))?.taps)
    }

    fn check_input(&self, g: &Graph, x: NodeId, cond: Conditioning) -> Result<usize> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != [1, FREQ_BINS, PATCH_FRAMES] {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.first().copied().unwrap_or(1), 1, FREQ_BINS, PATCH_FRAMES],
                found: shape.to_vec(),
            });
        }
        let n = shape[0];
        if let Conditioning::Embeddings { noise, channel } = cond {
            for e in [noise, channel] {
                let s = g.shape(e);
                if s != [n, self.embedding_dim()] {
                    return Err(Error::DimMismatch {
                        expected: self.embedding_dim(),
                        found: s.last().copied().unwrap_or(0),
                    });
                }
            }
        }
        Ok(n)
    }

    fn run(
        &self,
        g: &mut Graph,
        x: NodeId,
        cond: Conditioning,
        mut dropout_rng: Option<&mut Rng>,
        stop_after: Option<usize>,
    ) -> Result<GeneratorOutput> {
        let n = self.check_input(g, x, cond)?;
        let st = &self.store;
        let s = self.fused_embedding(g, cond, n);
        let mut taps = Vec::new();
        let done = |taps: &Vec<NodeId>| stop_after.is_some_and(|k| taps.len() >= k);

        let mut h = self.down1.forward(g, st, x);
        h = g.instance_norm(h, IN_EPS);
        h = g.relu(h);
        taps.push(h);
        h = self.down2.forward(g, st, h);
        h = g.instance_norm(h, IN_EPS);
        h = g.relu(h);
        taps.push(h);
        if done(&taps) {
            taps.truncate(stop_after.unwrap_or(taps.len()));
            return Ok(GeneratorOutput {
                output: h,
                fused: h,
                taps,
            });
        }

        let (hh, ww) = {
            let sh = g.shape(h);
            (sh[2], sh[3])
        };
        h = match (self.config.fusion_strategy, s) {
            (FusionStrategy::Addition, Some(s)) => {
                let p = self.fuse_proj.expect("addition owns a projection").forward(g, st, s);
                let p = g.broadcast_spatial(p, hh, ww);
                g.add(h, p)
            }
            (FusionStrategy::Concat, Some(s)) => {
                let p = self.fuse_proj.expect("concat owns a projection").forward(g, st, s);
                let p = g.broadcast_spatial(p, hh, ww);
                g.concat_channels(&[h, p])
            }
            _ => self.modulate(g, h, s, 0),
        };
        let fused = h;
        if let Some(conv) = self.fuse_conv {
            h = conv.forward(g, st, h);
        }

        let rate = self.config.dropout_rate;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut r = block.conv1.forward(g, st, h);
            r = g.instance_norm(r, IN_EPS);
            r = g.relu(r);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if rate > 0.0 {
                    let mask = dropout_mask(g.shape(r), rate, rng);
                    r = g.mul_const(r, mask);
                }
            }
            r = block.conv2.forward(g, st, r);
            r = g.instance_norm(r, IN_EPS);
            h = g.add(h, r);
            taps.push(h);
            if done(&taps) {
                taps.truncate(stop_after.unwrap_or(taps.len()));
                return Ok(GeneratorOutput {
                    output: h,
                    fused,
                    taps,
                });
            }
            h = self.modulate(g, h, s, i + 1);
        }

        h = self.up1.forward(g, st, h);
        h = g.instance_norm(h, IN_EPS);
        h = g.relu(h);
        h = self.up2.forward(g, st, h);
        h = g.instance_norm(h, IN_EPS);
        h = g.relu(h);
        let mut out = self.out.forward(g, st, h);
        if self.config.global_skip {
            out = g.add(out, x);
        }
        Ok(GeneratorOutput {
            output: out,
            fused,
            taps,
        })
    }

    /// Translate one patch. Deterministic unless `dropout_rng` is given.
    pub fn generate(
        &self,
        x: &SpectroPatch,
        noise: &DomainEmbedding,
        channel: &DomainEmbedding,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<SpectroPatch> {
        Ok(self
            .generate_batch(std::slice::from_ref(x), noise, channel, dropout_rng)?
            .remove(0))
    }

    /// Translate several patches under the same embeddings.
    pub fn generate_batch(
        &self,
        xs: &[SpectroPatch],
        noise: &DomainEmbedding,
        channel: &DomainEmbedding,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Vec<SpectroPatch>> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = self.embedding_dim();
        for e in [noise, channel] {
            if e.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
        }
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.constant(patches_tensor(xs));
        let rep = |e: &DomainEmbedding| Tensor::new(&[n, d], e.vector.repeat(n));
        let nn = g.constant(rep(noise));
        let cc = g.constant(rep(channel));
        let out = self.forward(&mut g, x, Conditioning::Embeddings { noise: nn, channel: cc }, dropout_rng)?;
        let y = g.value(out.output);
        y.data()
            .chunks(FREQ_BINS * PATCH_FRAMES)
            .zip(xs)
            .map(|(v, p)| p.with_values(v.to_vec()))
            .collect()
    }

    /// Forward without any embedding modulation.
    pub fn generate_unconditioned(&self, x: &SpectroPatch) -> Result<SpectroPatch> {
        let mut g = Graph::new();
        let xn = g.constant(patches_tensor(std::slice::from_ref(x)));
        let out = self.forward(&mut g, xn, Conditioning::Unconditioned, None)?;
        x.with_values(g.value(out.output).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = GeneratorCheckpointMeta {
            version: GENERATOR_CHECKPOINT_VERSION,
            config: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::new();
        self.store.write_to(&mut buf)?;
        fs::write(dir.join("params.bin"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let raw = fs::read(&path).map_err(|e| Error::UnreadableFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let meta: GeneratorCheckpointMeta = serde_json::from_slice(&raw)?;
        if meta.version != GENERATOR_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: meta.version,
                expected: GENERATOR_CHECKPOINT_VERSION,
            });
        }
        let mut gen = Self::new(meta.config, 0)?;
        gen.store.read_from(fs::read(dir.join("params.bin"))?.as_slice())?;
        Ok(gen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini(fusion: FusionStrategy) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            n_resblocks: 2,
            dropout_rate: 0.5,
            fusion_strategy: fusion,
            embedding_dim: 4,
            global_skip: false,
        }
    }

    fn patch() -> SpectroPatch {
        SpectroPatch::new(
            (0..FREQ_BINS * PATCH_FRAMES).map(|i| ((i * 31) % 23) as f64 * -0.3).collect(),
            "u",
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig { n_resblocks: 0, ..mini(FusionStrategy::Concat) }.validate().is_err());
        assert!(GeneratorConfig { dropout_rate: 1.0, ..mini(FusionStrategy::Concat) }.validate().is_err());
        assert!(mini(FusionStrategy::Concat).validate().is_ok());
    }

    #[test]
    fn film_apply_cases() {
        let f = Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 4.0);
        assert_eq!(film_apply(&f, &FilmParams::identity(2)).unwrap(), f);
        let p = FilmParams {
            weight: vec![0.0, 0.0],
            bias: vec![1.5, -2.0],
        };
        let y = film_apply(&f, &p).unwrap();
        assert!(y.data()[..6].iter().all(|&v| v == 1.5));
        assert!(y.data()[6..].iter().all(|&v| v == -2.0));
        assert!(matches!(film_apply(&f, &FilmParams::identity(3)), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn film_starts_as_identity_and_sum_commutes() {
        let g = Generator::new(mini(FusionStrategy::FilmAllIndependent), 1).unwrap();
        let n = DomainEmbedding::new(vec![0.3, -1.0, 2.0, 0.1], crate::encoders::EmbeddingKind::Noise, "u");
        let c = DomainEmbedding::new(vec![1.0, 0.5, -0.2, 0.0], crate::encoders::EmbeddingKind::Channel, "u");
        assert_eq!(g.film_compute(&n, &c, 2).unwrap(), FilmParams::identity(8));
        assert_eq!(g.film_compute(&n, &c, 1).unwrap(), g.film_compute(&c, &n, 1).unwrap());
        let short = DomainEmbedding::new(vec![0.0; 3], crate::encoders::EmbeddingKind::Noise, "u");
        assert!(matches!(g.film_compute(&short, &c, 0), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn site_counts() {
        assert_eq!(Generator::new(mini(FusionStrategy::FilmAllIndependent), 0).unwrap().film.len(), 3);
        assert_eq!(Generator::new(mini(FusionStrategy::FilmAllShared), 0).unwrap().film.len(), 1);
        assert_eq!(Generator::new(mini(FusionStrategy::FilmEncoderOnly), 0).unwrap().film.len(), 1);
        assert!(Generator::new(mini(FusionStrategy::Addition), 0).unwrap().film.is_empty());
    }

    #[test]
    fn inference_is_deterministic_and_shape_preserving() {
        let gen = Generator::new(mini(FusionStrategy::FilmAllIndependent), 3).unwrap();
        let e = DomainEmbedding::zeros(4, crate::encoders::EmbeddingKind::Noise);
        let a = gen.generate(&patch(), &e, &e, None).unwrap();
        let b = gen.generate(&patch(), &e, &e, None).unwrap();
        assert_eq!(a.values.len(), FREQ_BINS * PATCH_FRAMES);
        assert_eq!(a.values, b.values);
        let mut r = layers::rng(1);
        let c = gen.generate(&patch(), &e, &e, Some(&mut r)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let gen = Generator::new(mini(FusionStrategy::Concat), 9).unwrap();
        gen.save(dir.path()).unwrap();
        let back = Generator::load(dir.path()).unwrap();
        let e = DomainEmbedding::new(vec![0.2; 4], crate::encoders::EmbeddingKind::Noise, "u");
        let a = gen.generate(&patch(), &e, &e, None).unwrap();
        let b = back.generate(&patch(), &e, &e, None).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
