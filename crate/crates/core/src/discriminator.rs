//! Five-layer convolutional discriminator with spectral normalisation and
//! an R1 gradient penalty.

use std::fs;
use std::path::Path;

use domsim_nn::{Gradients, Graph, NodeId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::patches_tensor;
use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, Init, Rng};
use crate::spectral::{SpectroPatch, FREQ_BINS, PATCH_FRAMES};

pub const DISCRIMINATOR_CHECKPOINT_VERSION: u32 = 1;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const SN_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub use_spectral_norm: bool,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            use_spectral_norm: true,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn widths(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 1]
    }
}

/// Spatial size after each of the five convolutions.
pub fn score_map_shapes(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(5);
    let (mut h, mut w) = (h, w);
    for s in STRIDES {
        h = (h + 2 - 4) / s + 1;
        w = (w + 2 - 4) / s + 1;
        out.push((h, w));
    }
    out
}

/// Persistent power-iteration vectors for one weight matrix `[rows × cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= n + SN_EPS);
}

impl PowerIteration {
    fn new(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let mut u = layers::normal_tensor(&[rows], 1.0, rng).into_data();
        normalize(&mut u);
        Self {
            u,
            v: vec![0.0; cols],
        }
    }

    /// One step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`. Returns `σ = uᵀWv`.
    pub fn step(&mut self, w: &[f64]) -> f64 {
        let rows = self.u.len();
        let cols = self.v.len();
        self.v.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..rows {
            let ur = self.u[r];
            for (v, wv) in self.v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *v += wv * ur;
            }
        }
        normalize(&mut self.v);
        for r in 0..rows {
            self.u[r] = w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum();
        }
        normalize(&mut self.u);
        self.sigma(w)
    }

    pub fn sigma(&self, w: &[f64]) -> f64 {
        let cols = self.v.len();
        self.u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    power: Vec<PowerIteration>,
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorCheckpointMeta {
    version: u32,
    config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.base_channels < 1 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        let mut rng = layers::rng(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::with_capacity(5);
        let mut power = Vec::with_capacity(5);
        let mut c_in = 1;
        for (i, (&c, &s)) in config.widths().iter().zip(&STRIDES).enumerate() {
            let conv = Conv2d::new(&mut store, &format!("conv{i}"), c_in, c, 4, s, 1, true, Init::Normal(0.02), &mut rng);
            power.push(PowerIteration::new(c, c_in * 16, &mut rng));
            convs.push(conv);
            c_in = c;
        }
        let mut d = Self {
            config,
            store,
            convs,
            power,
        };
        // converge the persistent vectors before the first real step
        for _ in 0..30 {
            d.power_step();
        }
        Ok(d)
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// Advance every layer's power iteration by one step.
    pub fn power_step(&mut self) {
        for (conv, p) in self.convs.iter().zip(self.power.iter_mut()) {
            p.step(self.store.get(conv.weight).data());
        }
    }

    /// Current σ estimate per layer.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        self.convs
            .iter()
            .zip(&self.power)
            .map(|(c, p)| p.sigma(self.store.get(c.weight).data()))
            .collect()
    }

    /// Weight matrices as used in the forward pass (`W/σ̂` when enabled).
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.convs
            .iter()
            .zip(&self.power)
            .map(|(c, p)| {
                let w = self.store.get(c.weight);
                if self.config.use_spectral_norm {
                    let s = p.sigma(w.data());
                    if s.abs() > 1e-12 {
                        w.map(|v| v / s)
                    } else {
                        w.clone()
                    }
                } else {
                    w.clone()
                }
            })
            .collect()
    }

    pub fn power_vectors(&self) -> &[PowerIteration] {
        &self.power
    }

    /// Mean-pooled score map, before the logistic: `x: [N,1,129,128]` -> `[N]`.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.logits_with(g, x, None)
    }

    fn logits_with(&self, g: &mut Graph, x: NodeId, masks: Option<&[Tensor]>) -> Result<NodeId> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 1, FREQ_BINS, PATCH_FRAMES],
                found: shape.to_vec(),
            });
        }
        let n = shape[0];
        let h = self.score_map_with(g, x, masks);
        let pooled = g.spatial_mean(h);
        Ok(g.reshape(pooled, &[n]))
    }

    /// Final 1-channel score map `[N, 1, H', W']`.
    pub fn score_map(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.score_map_with(g, x, None)
    }

    /// Score map with each leaky ReLU replaced by a fixed per-element slope
    /// when `masks` is given (one tensor per hidden layer).
    fn score_map_with(&self, g: &mut Graph, x: NodeId, masks: Option<&[Tensor]>) -> NodeId {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, (conv, p)) in self.convs.iter().zip(&self.power).enumerate() {
            let w = g.param(&self.store, conv.weight);
            let w = if self.config.use_spectral_norm {
                g.spectral_normalize(w, &p.u, &p.v)
            } else {
                w
            };
            let b = conv.bias.map(|b| g.param(&self.store, b));
            h = g.conv2d(h, w, b, conv.cfg);
            if i < last {
                h = match masks {
                    Some(m) => g.mul_const(h, m[i].clone()),
                    None => g.leaky_relu(h, self.config.leaky_slope),
                };
            }
        }
        h
    }

    /// Slope (1 or the leak) each hidden activation takes at `x`.
    pub fn activation_masks(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let mut h = g.constant(x.clone());
        let mut masks = Vec::with_capacity(self.convs.len() - 1);
        for (conv, p) in self.convs.iter().zip(&self.power).take(self.convs.len() - 1) {
            let w = g.param(&self.store, conv.weight);
            let w = if self.config.use_spectral_norm {
                g.spectral_normalize(w, &p.u, &p.v)
            } else {
                w
            };
            let b = conv.bias.map(|b| g.param(&self.store, b));
            let pre = g.conv2d(h, w, b, conv.cfg);
            let slope = self.config.leaky_slope;
            let m = g.value(pre).map(|v| if v > 0.0 { 1.0 } else { slope });
            h = g.mul_const(pre, m.clone());
            masks.push(m);
        }
        Ok(masks)
    }

    /// Probability that `x` is a real target patch. Advances the power
    /// iteration by one step.
    pub fn discriminate(&mut self, x: &SpectroPatch) -> Result<f64> {
        x.validate()?;
        self.power_step();
        let mut g = Graph::new();
        let xn = g.constant(patches_tensor(std::slice::from_ref(x)));
        let l = self.logits(&mut g, xn)?;
        Ok(domsim_nn::graph::sigmoid(g.value(l).data()[0]))
    }

    /// Per-item `∇_x D_logit(x)` for a `[N,1,H,W]` batch.
    pub fn input_gradients(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.input_gradients_with(x, None)
    }

    /// `∇_x D_logit(x)` with the activation pattern held at `masks`.
    pub fn input_gradients_masked(&self, x: &Tensor, masks: &[Tensor]) -> Result<Vec<Tensor>> {
        self.input_gradients_with(x, Some(masks))
    }

    fn input_gradients_with(&self, x: &Tensor, masks: Option<&[Tensor]>) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let xn = g.input(x.clone());
        let l = self.logits_with(&mut g, xn, masks)?;
        let total = g.sum_all(l);
        let grads = g.backward(total);
        let gx = grads.get(xn).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let n = x.shape()[0];
        Ok((0..n).map(|i| gx.batch_item(i)).collect())
    }

    /// R1 penalty: batch mean of `‖∇_x D_logit(x)‖²` at real samples.
    pub fn gradient_penalty(&self, real: &[SpectroPatch]) -> Result<f64> {
        if real.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let grads = self.input_gradients(&patches_tensor(real))?;
        Ok(grads.iter().map(|g| g.sq_norm()).sum::<f64>() / real.len() as f64)
    }

    /// Penalty value and its gradient with respect to the discriminator
    /// parameters, scaled by `gamma / 2`.
    ///
    /// `∇_θ ½‖∇_x D‖²` is the mixed second derivative applied to
    /// `g = ∇_x D`. With the activation pattern held at its value at `x`,
    /// `∇_θ D` is affine in the input, so a central difference of `∇_θ D`
    /// along `g` gives the product exactly (up to rounding).
    pub fn gradient_penalty_with_grad(
        &self,
        real: &[SpectroPatch],
        gamma: f64,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        if real.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = real.len();
        let mut acc: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut penalty = 0.0;
        for p in real {
            let x = patches_tensor(std::slice::from_ref(p));
            let masks = self.activation_masks(&x)?;
            let gx = self.input_gradients_masked(&x, &masks)?.remove(0);
            let sq = gx.sq_norm();
            penalty += sq;
            if sq == 0.0 {
                continue;
            }
            let eps = 1e-2 * (gx.numel() as f64 / sq).sqrt();
            let gx = gx.reshape(x.shape());
            let plus = self.param_grads_at(&x.zip_map(&gx, |a, b| a + eps * b), &masks)?;
            let minus = self.param_grads_at(&x.zip_map(&gx, |a, b| a - eps * b), &masks)?;
            // d/dθ (γ/2)·(1/N)·‖g‖² = (γ/N)·H g
            let coef = gamma / n as f64 / (2.0 * eps);
            for ((slot, gp), gm) in acc.iter_mut().zip(plus).zip(minus) {
                let (Some(gp), Some(gm)) = (gp, gm) else { continue };
                let d = gp.zip_map(&gm, |a, b| coef * (a - b));
                match slot {
                    Some(t) => t.add_assign(&d),
                    None => *slot = Some(d),
                }
            }
        }
        Ok((penalty / n as f64, acc))
    }

    fn param_grads_at(&self, x: &Tensor, masks: &[Tensor]) -> Result<Vec<Option<Tensor>>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let l = self.logits_with(&mut g, xn, Some(masks))?;
        let total = g.sum_all(l);
        Ok(g.backward(total).for_store(&self.store))
    }

    /// Parameter gradients from a graph this discriminator took part in.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        grads.for_store(&self.store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = DiscriminatorCheckpointMeta {
            version: DISCRIMINATOR_CHECKPOINT_VERSION,
            config: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::new();
        self.store.write_to(&mut buf)?;
        fs::write(dir.join("params.bin"), buf)?;
        let pv: Vec<(&[f64], &[f64])> = self.power.iter().map(|p| (p.u.as_slice(), p.v.as_slice())).collect();
        fs::write(dir.join("power.json"), serde_json::to_vec(&pv)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let raw = fs::read(&path).map_err(|e| Error::UnreadableFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let meta: DiscriminatorCheckpointMeta = serde_json::from_slice(&raw)?;
        if meta.version != DISCRIMINATOR_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: meta.version,
                expected: DISCRIMINATOR_CHECKPOINT_VERSION,
            });
        }
        let mut d = Self::new(meta.config, 0)?;
        d.store.read_from(fs::read(dir.join("params.bin"))?.as_slice())?;
        let pv: Vec<(Vec<f64>, Vec<f64>)> = serde_json::from_slice(&fs::read(dir.join("power.json"))?)?;
        for (p, (u, v)) in d.power.iter_mut().zip(pv) {
            p.u = u;
            p.v = v;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_map_follows_stride_arithmetic() {
        assert_eq!(
            score_map_shapes(129, 128),
            vec![(64, 64), (32, 32), (16, 16), (15, 15), (14, 14)]
        );
        let d = Discriminator::new(
            DiscriminatorConfig {
                base_channels: 2,
                ..DiscriminatorConfig::default()
            },
            0,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(patches_tensor(&[SpectroPatch::filled(-3.0, "u")]));
        let s = d.score_map(&mut g, x);
        assert_eq!(g.shape(s), &[1, 1, 14, 14]);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut d = Discriminator::new(
            DiscriminatorConfig {
                base_channels: 2,
                use_spectral_norm: false,
                leaky_slope: 0.2,
            },
            1,
        )
        .unwrap();
        for id in d.store.ids().collect::<Vec<_>>() {
            let shape = d.store.get(id).shape().to_vec();
            d.store.set(id, Tensor::zeros(&shape));
        }
        assert_eq!(d.discriminate(&SpectroPatch::filled(-2.0, "u")).unwrap(), 0.5);
        assert_eq!(d.gradient_penalty(&[SpectroPatch::filled(-2.0, "u")]).unwrap(), 0.0);
        assert!(matches!(d.gradient_penalty(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn power_iteration_finds_top_singular_value() {
        // diag(3, 1) padded to 2×3
        let w = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut p = PowerIteration::new(2, 3, &mut layers::rng(4));
        let mut s = 0.0;
        for _ in 0..50 {
            s = p.step(&w);
        }
        assert!((s - 3.0).abs() < 1e-9);
    }
}
