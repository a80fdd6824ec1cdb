//! Training losses: adversarial, embedding reconstruction (noise and
//! channel), patch-wise contrastive, and their weighted total.

use std::io::Write;

use domsim_nn::{Graph, NodeId, ParamStore};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Init, Linear, Rng};

pub const PROJ_DIM: usize = 256;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_nr: f64,
    pub lambda_cc: f64,
    pub gp_gamma: f64,
    pub tau: f64,
    pub n_queries: usize,
    pub n_layers: usize,
    pub l1_reduction: L1Reduction,
    pub non_saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_nr: 0.5,
            lambda_cc: 0.5,
            gp_gamma: 10.0,
            tau: 0.07,
            n_queries: 256,
            n_layers: 4,
            l1_reduction: L1Reduction::Mean,
            non_saturating: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_queries < 1 || self.n_layers < 1 {
            return Err(Error::InvalidConfig("n_queries and n_layers must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_nr", self.lambda_nr),
            ("lambda_cc", self.lambda_cc),
            ("gp_gamma", self.gp_gamma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// One training step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub pcl_src: f64,
    pub pcl_tgt: f64,
    pub nr: f64,
    pub cc: f64,
    pub gp: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.adv_d,
            self.adv_g,
            self.pcl_src,
            self.pcl_tgt,
            self.nr,
            self.cc,
            self.gp,
            self.total_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Component values feeding the generator total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv_d: f64,
    pub adv_g: f64,
    pub pcl_src: f64,
    pub pcl_tgt: f64,
    pub nr: f64,
    pub cc: f64,
    pub gp: f64,
}

/// `total_g = adv_g + pcl_src + pcl_tgt + λ_NR·nr + λ_CC·cc`.
pub fn total_generator_loss(step: u64, parts: LossParts, w: &LossWeights) -> LossReport {
    LossReport {
        step,
        adv_d: parts.adv_d,
        adv_g: parts.adv_g,
        pcl_src: parts.pcl_src,
        pcl_tgt: parts.pcl_tgt,
        nr: parts.nr,
        cc: parts.cc,
        gp: parts.gp,
        total_g: parts.adv_g + parts.pcl_src + parts.pcl_tgt + w.lambda_nr * parts.nr + w.lambda_cc * parts.cc,
    }
}

// ---------------------------------------------------------------------------
// adversarial

/// `(value_d, value_g)` from discriminator probabilities.
pub fn adversarial_loss(d_real: &[f64], d_fake: &[f64], non_saturating: bool) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&p) = d_real.iter().chain(d_fake).find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&p| f(p)).sum::<f64>() / xs.len() as f64;
    let log_real = mean(d_real, &|p| p.ln());
    let log_not_fake = mean(d_fake, &|p| (1.0 - p).ln());
    let value_d = -(log_real + log_not_fake);
    let value_g = if non_saturating {
        -mean(d_fake, &|p| p.ln())
    } else {
        log_not_fake
    };
    Ok((value_d, value_g))
}

/// Discriminator loss from logits: `mean softplus(−r) + mean softplus(f)`.
pub fn adv_d_from_logits(g: &mut Graph, real: NodeId, fake: NodeId) -> NodeId {
    let nr = g.scale(real, -1.0);
    let a = g.softplus(nr);
    let a = g.mean_all(a);
    let b = g.softplus(fake);
    let b = g.mean_all(b);
    g.add(a, b)
}

/// Generator loss from fake logits. Saturating: `−mean softplus(f)`
/// (`= mean log(1 − σ(f))`); non-saturating: `mean softplus(−f)`.
pub fn adv_g_from_logits(g: &mut Graph, fake: NodeId, non_saturating: bool) -> NodeId {
    if non_saturating {
        let n = g.scale(fake, -1.0);
        let s = g.softplus(n);
        g.mean_all(s)
    } else {
        let s = g.softplus(fake);
        let m = g.mean_all(s);
        g.scale(m, -1.0)
    }
}

// ---------------------------------------------------------------------------
// embedding reconstruction

/// L1 distance between two embeddings under the given reduction.
pub fn embedding_l1(target: &[f64], regenerated: &[f64], reduction: L1Reduction) -> Result<f64> {
    if target.len() != regenerated.len() {
        return Err(Error::DimMismatch {
            expected: target.len(),
            found: regenerated.len(),
        });
    }
    let s: f64 = target.iter().zip(regenerated).map(|(a, b)| (a - b).abs()).sum();
    Ok(match reduction {
        L1Reduction::Mean => s / target.len().max(1) as f64,
        L1Reduction::Sum => s,
    })
}

/// Noise reconstruction loss between target and regenerated noise embeddings.
pub fn noise_reconstruction_loss(n_target: &[f64], n_regenerated: &[f64], reduction: L1Reduction) -> Result<f64> {
    embedding_l1(n_target, n_regenerated, reduction)
}

/// Channel consistency loss between target and regenerated channel embeddings.
pub fn channel_consistency_loss(c_target: &[f64], c_regenerated: &[f64], reduction: L1Reduction) -> Result<f64> {
    embedding_l1(c_target, c_regenerated, reduction)
}

/// Batched L1 on `[N, D]` nodes: per-item reduction, then batch mean.
pub fn embedding_l1_graph(g: &mut Graph, target: NodeId, regenerated: NodeId, reduction: L1Reduction) -> Result<NodeId> {
    let (ts, rs) = (g.shape(target).to_vec(), g.shape(regenerated).to_vec());
    if ts != rs {
        return Err(Error::DimMismatch {
            expected: ts.last().copied().unwrap_or(0),
            found: rs.last().copied().unwrap_or(0),
        });
    }
    let d = g.sub(target, regenerated);
    let a = g.abs(d);
    let m = g.mean_all(a);
    Ok(match reduction {
        L1Reduction::Mean => m,
        L1Reduction::Sum => g.scale(m, *ts.last().unwrap_or(&1) as f64),
    })
}

// ---------------------------------------------------------------------------
// patch-wise contrastive

/// Per-layer spatial query locations, drawn without replacement.
pub fn sample_locations(layer_sizes: &[usize], n_queries: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = layers::rng(seed);
    layer_sizes
        .iter()
        .map(|&m| {
            if m <= n_queries {
                (0..m).collect()
            } else {
                index::sample(&mut rng, m, n_queries).into_vec()
            }
        })
        .collect()
}

/// Indexed query/positive/negative sets for one layer. Positive for query
/// `i` is the same location in the source map; negatives are the other
/// sampled source locations.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub locations: Vec<usize>,
}

impl PatchSample {
    pub fn positive(&self, i: usize) -> usize {
        self.locations[i]
    }

    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.locations
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != i)
            .map(|(_, &l)| l)
    }
}

/// Samples query locations for aligned source/generated feature maps given
/// as `[C, H, W]` shapes per layer.
pub fn sample_patch_pairs(
    src_shapes: &[Vec<usize>],
    gen_shapes: &[Vec<usize>],
    n_layers: usize,
    n_queries: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    if src_shapes.len() != n_layers || gen_shapes.len() != n_layers {
        return Err(Error::LayerMismatch {
            expected: n_layers,
            found: src_shapes.len().min(gen_shapes.len()),
        });
    }
    let mut sizes = Vec::with_capacity(n_layers);
    for (s, gsh) in src_shapes.iter().zip(gen_shapes) {
        if s != gsh {
            return Err(Error::ShapeMismatch {
                expected: s.clone(),
                found: gsh.clone(),
            });
        }
        sizes.push(s.iter().rev().take(2).product());
    }
    Ok(sample_locations(&sizes, n_queries, seed)
        .into_iter()
        .map(|locations| PatchSample { locations })
        .collect())
}

/// Per-layer two-layer MLP heads `Linear(C→256) → ReLU → Linear(256→256)`.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub store: ParamStore,
    heads: Vec<(Linear, Linear)>,
}

impl ProjectionHeads {
    pub fn new(layer_channels: &[usize], seed: u64) -> Self {
        Self::with_width(layer_channels, PROJ_DIM, seed)
    }

    pub fn with_width(layer_channels: &[usize], width: usize, seed: u64) -> Self {
        let mut rng: Rng = layers::rng(seed);
        let mut store = ParamStore::new();
        let heads = layer_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let a = Linear::new(&mut store, &format!("head{l}.fc1"), c, width, Init::Normal(0.02), &mut rng);
                let b = Linear::new(&mut store, &format!("head{l}.fc2"), width, width, Init::Normal(0.02), &mut rng);
                (a, b)
            })
            .collect();
        Self { store, heads }
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn project(&self, g: &mut Graph, layer: usize, rows: NodeId) -> NodeId {
        let (a, b) = self.heads[layer];
        let h = a.forward(g, &self.store, rows);
        let h = g.relu(h);
        b.forward(g, &self.store, h)
    }
}

/// Contrastive loss for one layer from projected query rows `[I, C]` and
/// key rows `[I, C]` (row `i` of `keys` is the positive of query `i`, the
/// others its negatives). Rows are unit-normalised first. Returns the mean
/// over queries.
pub fn pcl_layer_graph(g: &mut Graph, queries: NodeId, keys: NodeId, tau: f64) -> NodeId {
    let q = g.l2_normalize_rows(queries, NORM_EPS);
    let k = g.l2_normalize_rows(keys, NORM_EPS);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / tau);
    let n = g.shape(queries)[0];
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets)
}

/// Full contrastive loss over layers, divided by `L·I`. `gen_feats` are the
/// generated-branch maps (queries), `src_feats` the source-branch maps.
/// Batch item 0 of each map is used.
pub fn pcl_loss_graph(
    g: &mut Graph,
    heads: &ProjectionHeads,
    gen_feats: &[NodeId],
    src_feats: &[NodeId],
    samples: &[PatchSample],
    tau: f64,
) -> Result<NodeId> {
    let l = samples.len();
    if gen_feats.len() != l || src_feats.len() != l || heads.n_layers() != l {
        return Err(Error::LayerMismatch {
            expected: l,
            found: gen_feats.len().min(src_feats.len()).min(heads.n_layers()),
        });
    }
    let mut total: Option<NodeId> = None;
    for (layer, s) in samples.iter().enumerate() {
        if s.locations.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let q = g.gather_locations(gen_feats[layer], 0, &s.locations);
        let k = g.gather_locations(src_feats[layer], 0, &s.locations);
        let q = heads.project(g, layer, q);
        let k = heads.project(g, layer, k);
        let ce = pcl_layer_graph(g, q, k, tau);
        total = Some(match total {
            Some(t) => g.add(t, ce),
            None => ce,
        });
    }
    let total = total.ok_or(Error::EmptyQuerySet)?;
    // each layer term is already a mean over its I queries
    Ok(g.scale(total, 1.0 / l as f64))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss on already-normalised vectors, averaged over queries:
/// `−log e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σ_j e^{q·k⁻_j/τ})`.
pub fn pcl_loss(queries: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<Vec<f64>>], tau: f64) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if positives.len() != queries.len() || negatives.len() != queries.len() {
        return Err(Error::DimMismatch {
            expected: queries.len(),
            found: positives.len().min(negatives.len()),
        });
    }
    let mut total = 0.0;
    for ((q, p), negs) in queries.iter().zip(positives).zip(negatives) {
        let pos = dot(q, p) / tau;
        let scores: Vec<f64> = negs.iter().map(|n| dot(q, n) / tau).collect();
        let mx = scores.iter().cloned().fold(pos, f64::max);
        let denom = (pos - mx).exp() + scores.iter().map(|s| (s - mx).exp()).sum::<f64>();
        total += -(pos - mx) + denom.ln();
    }
    Ok(total / queries.len() as f64)
}
