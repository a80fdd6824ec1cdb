//! Stand-in speech enhancement model, downstream adaptation and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use domsim_nn::{Adam, Graph, NodeId, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::encoders::patches_tensor;
use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, ConvTranspose2d, Init};
use crate::pipeline::SimulatedPair;
use crate::spectral::{self, SpectroPatch, Spectrogram, Stft};

pub const SE_CHECKPOINT_VERSION: u32 = 1;

/// Three-level convolutional encoder-decoder with additive skips, mapping
/// noisy log-magnitude patches to clean ones. The output layer starts at
/// zero and is added to the input, so an untrained model is the identity.
#[derive(Clone, Debug)]
pub struct SeModel {
    pub base_channels: usize,
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec2: ConvTranspose2d,
    dec1: ConvTranspose2d,
    out: Conv2d,
}

/// Fixed input scaling so conv activations start near unit size.
const SHIFT: f64 = 5.0;
const SCALE: f64 = 0.25;

#[derive(Serialize, Deserialize)]
struct SeMeta {
    version: u32,
    base_channels: usize,
}

impl SeModel {
    pub fn new(base_channels: usize, seed: u64) -> Self {
        let c = base_channels.max(1);
        let mut rng = layers::rng(seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc1 = Conv2d::new(s, "enc1", 1, c, 3, 1, 1, true, Init::Kaiming, r);
        let enc2 = Conv2d::new(s, "enc2", c, 2 * c, 3, 2, 1, true, Init::Kaiming, r);
        let enc3 = Conv2d::new(s, "enc3", 2 * c, 4 * c, 3, 2, 1, true, Init::Kaiming, r);
        let dec2 = ConvTranspose2d::new(s, "dec2", 4 * c, 2 * c, 3, 2, 1, (0, 1), Init::Kaiming, r);
        let dec1 = ConvTranspose2d::new(s, "dec1", 2 * c, c, 3, 2, 1, (0, 1), Init::Kaiming, r);
        let out = Conv2d::new(s, "out", c, 1, 3, 1, 1, true, Init::Zeros, r);
        Self {
            base_channels: c,
            store,
            enc1,
            enc2,
            enc3,
            dec2,
            dec1,
            out,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `x: [N, 1, 129, 128]` log-magnitude -> enhanced log-magnitude.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let st = &self.store;
        let h = g.shift(x, SHIFT);
        let h = g.scale(h, SCALE);
        let e1 = self.enc1.forward(g, st, h);
        let e1 = g.relu(e1);
        let e2 = self.enc2.forward(g, st, e1);
        let e2 = g.relu(e2);
        let e3 = self.enc3.forward(g, st, e2);
        let e3 = g.relu(e3);
        let d2 = self.dec2.forward(g, st, e3);
        let d2 = g.relu(d2);
        let d2 = g.add(d2, e2);
        let d1 = self.dec1.forward(g, st, d2);
        let d1 = g.relu(d1);
        let d1 = g.add(d1, e1);
        let r = self.out.forward(g, st, d1);
        let r = g.scale(r, 1.0 / SCALE);
        g.add(x, r)
    }

    pub fn enhance_patches(&self, patches: &[SpectroPatch]) -> Result<Vec<SpectroPatch>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(4) {
            let mut g = Graph::new();
            let x = g.constant(patches_tensor(chunk));
            let y = self.forward(&mut g, x);
            for (vals, p) in g.value(y).data().chunks(spectral::FREQ_BINS * spectral::PATCH_FRAMES).zip(chunk) {
                out.push(p.with_values(vals.to_vec())?);
            }
        }
        Ok(out)
    }

    /// Enhance a whole spectrogram, keeping its phase.
    pub fn enhance(&self, spec: &Spectrogram, log_floor: f64) -> Result<Spectrogram> {
        let patches = spectral::segment_patches(spec, log_floor)?;
        let enhanced = self.enhance_patches(&patches)?;
        spectral::reassemble(&enhanced, spec)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = SeMeta {
            version: SE_CHECKPOINT_VERSION,
            base_channels: self.base_channels,
        };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::new();
        self.store.write_to(&mut buf)?;
        fs::write(dir.join("params.bin"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SeMeta = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        if meta.version != SE_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: meta.version,
                expected: SE_CHECKPOINT_VERSION,
            });
        }
        let mut m = Self::new(meta.base_channels, 0);
        m.store.read_from(fs::read(dir.join("params.bin"))?.as_slice())?;
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// metrics

/// Root-mean-square difference of log magnitudes over all bins.
pub fn metric_logspec(reference: &Spectrogram, estimate: &Spectrogram) -> Result<f64> {
    if reference.log_mag.len() != estimate.log_mag.len() || reference.frames != estimate.frames {
        return Err(Error::ShapeMismatch {
            expected: vec![reference.freq_bins(), reference.frames],
            found: vec![estimate.freq_bins(), estimate.frames],
        });
    }
    if reference.log_mag.is_empty() {
        return Err(Error::EmptySpectrogram);
    }
    let ss: f64 = reference
        .log_mag
        .iter()
        .zip(&estimate.log_mag)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / reference.log_mag.len() as f64).sqrt())
}

/// Scale-invariant signal-to-distortion ratio in dB (both signals made
/// zero-mean first).
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![reference.len()],
            found: vec![estimate.len()],
        });
    }
    if reference.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let mr = reference.iter().sum::<f64>() / reference.len() as f64;
    let me = estimate.iter().sum::<f64>() / estimate.len() as f64;
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let alpha = if rr > 0.0 {
        r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr
    } else {
        0.0
    };
    let target: f64 = r.iter().map(|v| (alpha * v).powi(2)).sum();
    let noise: f64 = r.iter().zip(&e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    Ok(10.0 * ((target + 1e-20) / (noise + 1e-20)).log10())
}

/// Run `cmd <ref.wav> <est.wav>` and parse one float from stdout. `None`
/// when the tool fails or prints something else.
pub fn external_metric(cmd: &str, reference: &Path, estimate: &Path) -> Option<f64> {
    let out = Command::new(cmd).arg(reference).arg(estimate).output().ok()?;
    if !out.status.success() {
        return None;
    }
    String::from_utf8_lossy(&out.stdout).trim().parse().ok()
}

/// Run `cmd <wav>` and return its stdout as a transcript.
pub fn external_transcript(cmd: &str, wav: &Path) -> Result<String> {
    let out = Command::new(cmd)
        .arg(wav)
        .output()
        .map_err(|e| Error::ExternalTool(format!("{cmd}: {e}")))?;
    if !out.status.success() {
        return Err(Error::ExternalTool(format!("{cmd} exited with {}", out.status)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Character error rate: Levenshtein distance over reference length.
pub fn character_error_rate(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rc) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hc) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rc != hc);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[h.len()] as f64 / r.len() as f64
}

/// A held-out degraded recording and its clean reference.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub degraded: AudioClip,
    pub clean: AudioClip,
    pub text: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub lsd: f64,
    pub si_sdr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
}

/// External tools applied during evaluation.
#[derive(Clone, Debug, Default)]
pub struct Hooks {
    pub metric_cmd: Option<String>,
    pub asr_cmd: Option<String>,
    /// Scratch directory for hook WAV files.
    pub work_dir: Option<PathBuf>,
}

/// Mean metrics of `model` on `eval`.
pub fn evaluate(model: &SeModel, eval: &[EvalItem], log_floor: f64, hooks: &Hooks) -> Result<MetricReport> {
    if eval.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let stft = Stft::new(log_floor);
    let mut lsd = 0.0;
    let mut sdr = 0.0;
    let mut ext = Vec::new();
    let mut cer = Vec::new();
    for (i, item) in eval.iter().enumerate() {
        let noisy = stft.analyze(&item.degraded)?;
        let clean = stft.analyze(&item.clean)?;
        let enhanced = model.enhance(&noisy, log_floor)?;
        lsd += metric_logspec(&clean, &enhanced)?;
        let len = item.clean.samples.len().min(item.degraded.samples.len());
        let wav = stft.synthesize_len(&enhanced, len)?;
        sdr += si_sdr(&item.clean.samples[..len], &wav.samples)?;
        if hooks.metric_cmd.is_some() || hooks.asr_cmd.is_some() {
            let dir = hooks
                .work_dir
                .clone()
                .unwrap_or_else(|| std::env::temp_dir().join(format!("domsim-eval-{}", std::process::id())));
            fs::create_dir_all(&dir)?;
            let est_path = dir.join(format!("est_{i}.wav"));
            audio::write_wav(&est_path, &wav)?;
            if let Some(cmd) = &hooks.metric_cmd {
                let ref_path = dir.join(format!("ref_{i}.wav"));
                audio::write_wav(&ref_path, &item.clean)?;
                if let Some(v) = external_metric(cmd, &ref_path, &est_path) {
                    ext.push(v);
                }
            }
            if let (Some(cmd), Some(text)) = (&hooks.asr_cmd, &item.text) {
                cer.push(character_error_rate(text, &external_transcript(cmd, &est_path)?));
            }
        }
    }
    let n = eval.len() as f64;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MetricReport {
        lsd: lsd / n,
        si_sdr: sdr / n,
        external: mean(&ext),
        cer: mean(&cer),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptReport {
    pub pre: MetricReport,
    pub post: MetricReport,
    /// Mean training L1 per epoch.
    pub train_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub log_floor: f64,
    pub seed: u64,
}

/// `(input, reference)` patch pairs from simulated pairs.
pub fn training_patches(pairs: &[SimulatedPair], log_floor: f64) -> Result<Vec<(SpectroPatch, SpectroPatch)>> {
    let mut out = Vec::new();
    for p in pairs {
        let sim = spectral::segment_patches(&p.simulated, log_floor)?;
        let clean = spectral::segment_patches(&p.clean, log_floor)?;
        out.extend(sim.into_iter().zip(clean));
    }
    Ok(out)
}

/// Fine-tune `model` on simulated → clean pairs with an L1 objective and
/// report held-out metrics before and after.
pub fn adapt_downstream(
    model: &SeModel,
    pairs: &[SimulatedPair],
    eval: &[EvalItem],
    settings: &AdaptSettings,
    hooks: &Hooks,
) -> Result<(SeModel, AdaptReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let pre = evaluate(model, eval, settings.log_floor, hooks)?;
    let data = training_patches(pairs, settings.log_floor)?;
    let mut adapted = model.clone();
    let mut opt = Adam::new(settings.lr, 0.9, 0.999);
    let mut rng = layers::rng(settings.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut train_loss = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(settings.batch_size.max(1)) {
            let xs: Vec<SpectroPatch> = batch.iter().map(|&i| data[i].0.clone()).collect();
            let ys: Vec<SpectroPatch> = batch.iter().map(|&i| data[i].1.clone()).collect();
            let mut g = Graph::new();
            let x = g.constant(patches_tensor(&xs));
            let y = g.constant(patches_tensor(&ys));
            let pred = adapted.forward(&mut g, x);
            let d = g.sub(pred, y);
            let a = g.abs(d);
            let loss = g.mean_all(a);
            acc += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss).for_store(&adapted.store);
            drop(g);
            opt.step(&mut adapted.store, &grads);
        }
        train_loss.push(acc / batches.max(1) as f64);
    }
    let post = evaluate(&adapted, eval, settings.log_floor, hooks)?;
    Ok((adapted, AdaptReport { pre, post, train_loss }))
}
