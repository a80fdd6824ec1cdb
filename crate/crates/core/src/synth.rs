//! Synthetic corpora: speech-like signals, FIR channel colorations and
//! additive noise classes. Used by tests, demos and the desk-scale runs.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, DomainTag, SAMPLE_RATE};
use crate::layers::{self, derive_seed};

/// Voiced harmonic signal with a wandering pitch, syllable-rate amplitude
/// envelope, three formant resonances and short unvoiced bursts.
pub fn speech_like(utterance_id: &str, seconds: f64, seed: u64) -> AudioClip {
    let mut rng = layers::rng(derive_seed(seed, utterance_id));
    let sr = SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let f0_base = rng.random_range(95.0..210.0);
    let vib_rate = rng.random_range(2.0..5.0);
    let syl_rate = rng.random_range(3.0..5.5);
    let syl_phase = rng.random_range(0.0..2.0 * PI);
    let formants = [
        rng.random_range(350.0..850.0),
        rng.random_range(900.0..2200.0),
        rng.random_range(2300.0..3200.0),
    ];
    let white = Normal::new(0.0, 1.0).unwrap();
    let mut source = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = f0_base * (1.0 + 0.12 * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f0 / sr;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
        // band-limited pulse train: sum of harmonics with 1/h roll-off
        let mut v = 0.0;
        let mut h = 1.0;
        while h * f0 < 4000.0 {
            v += (h * phase).sin() / h;
            h += 1.0;
        }
        let env = (0.5 + 0.5 * (2.0 * PI * syl_rate * t + syl_phase).sin()).powf(1.5);
        let unvoiced = if env < 0.15 { 0.3 * white.sample(&mut rng) } else { 0.0 };
        source.push(env * v + unvoiced * 0.5);
    }
    let mut y = source.clone();
    for (k, &f) in formants.iter().enumerate() {
        let filtered = resonator(&source, f, 80.0 + 40.0 * k as f64);
        let gain = 1.0 / (k as f64 + 1.0);
        y.iter_mut().zip(&filtered).for_each(|(a, b)| *a += gain * b);
    }
    normalize_rms(&mut y, 0.08);
    AudioClip::new(utterance_id, DomainTag::Source, y)
}

/// Two-pole resonator at `freq` with bandwidth `bw` (Hz), unit peak gain.
fn resonator(x: &[f64], freq: f64, bw: f64) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let r = (-PI * bw / sr).exp();
    let theta = 2.0 * PI * freq / sr;
    let a1 = 2.0 * r * theta.cos();
    let a2 = -r * r;
    let g = 1.0 - r;
    let mut y = vec![0.0; x.len()];
    for i in 0..x.len() {
        let y1 = if i >= 1 { y[i - 1] } else { 0.0 };
        let y2 = if i >= 2 { y[i - 2] } else { 0.0 };
        y[i] = g * x[i] + a1 * y1 + a2 * y2;
    }
    y
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Linear time-invariant channel given by FIR taps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coloration {
    pub taps: Vec<f64>,
}

impl Coloration {
    pub fn identity() -> Self {
        Self { taps: vec![1.0] }
    }

    /// Unit direct path plus decaying random echoes; gives a few dB of
    /// spectral ripple and tilt.
    pub fn random(seed: u64, len: usize) -> Self {
        let mut rng = layers::rng(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut taps = vec![1.0];
        for j in 1..len.max(1) {
            taps.push(0.6 * normal.sample(&mut rng) * (-(j as f64) / 4.0).exp());
        }
        Self { taps }
    }

    /// Same-length causal convolution.
    pub fn apply_samples(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                self.taps
                    .iter()
                    .enumerate()
                    .take(i + 1)
                    .map(|(j, t)| t * x[i - j])
                    .sum()
            })
            .collect()
    }

    pub fn apply(&self, clip: &AudioClip) -> AudioClip {
        AudioClip {
            samples: self.apply_samples(&clip.samples),
            ..clip.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseClass {
    White,
    Pink,
    Brown,
    Hum,
    Babble,
}

impl NoiseClass {
    pub const ALL: [NoiseClass; 5] = [
        NoiseClass::White,
        NoiseClass::Pink,
        NoiseClass::Brown,
        NoiseClass::Hum,
        NoiseClass::Babble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseClass::White => "white",
            NoiseClass::Pink => "pink",
            NoiseClass::Brown => "brown",
            NoiseClass::Hum => "hum",
            NoiseClass::Babble => "babble",
        }
    }
}

/// Unit-RMS noise of the given class.
pub fn noise(class: NoiseClass, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = layers::rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x: Vec<f64> = match class {
        NoiseClass::White => (0..len).map(|_| normal.sample(&mut rng)).collect(),
        NoiseClass::Pink => {
            // Paul Kellet's economy filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = normal.sample(&mut rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseClass::Brown => {
            let mut acc = 0.0;
            (0..len)
                .map(|_| {
                    acc = 0.995 * acc + 0.1 * normal.sample(&mut rng);
                    acc
                })
                .collect()
        }
        NoiseClass::Hum => {
            let base = rng.random_range(48.0..62.0);
            let sr = SAMPLE_RATE as f64;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..=6)
                        .map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                        + 0.05 * normal.sample(&mut rng)
                })
                .collect()
        }
        NoiseClass::Babble => {
            let seconds = len as f64 / SAMPLE_RATE as f64 + 0.01;
            let mut acc = vec![0.0; len];
            for k in 0..4 {
                let talker = speech_like(&format!("babble{k}"), seconds, rng.random());
                acc.iter_mut().zip(&talker.samples).for_each(|(a, b)| *a += b);
            }
            acc
        }
    };
    normalize_rms(&mut x, 1.0);
    x
}

/// `clean + g·noise` with `g` chosen for the requested SNR.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Vec<f64> {
    let p_s = clean.iter().map(|v| v * v).sum::<f64>() / clean.len().max(1) as f64;
    let p_n = noise.iter().map(|v| v * v).sum::<f64>() / noise.len().max(1) as f64;
    let g = if p_n > 0.0 {
        (p_s / (p_n * 10f64.powf(snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| s + g * noise.get(i).copied().unwrap_or(0.0))
        .collect()
}

/// A recording condition: channel coloration followed by additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub channel_id: String,
    pub coloration: Coloration,
    pub noise_class: NoiseClass,
    pub snr_db: f64,
}

impl Condition {
    pub fn render(&self, clean: &AudioClip, seed: u64) -> AudioClip {
        let colored = self.coloration.apply_samples(&clean.samples);
        let n = noise(
            self.noise_class,
            colored.len(),
            derive_seed(seed, &format!("{}/{}", clean.utterance_id, self.channel_id)),
        );
        let mut clip = AudioClip::new(clean.utterance_id.clone(), DomainTag::Target, mix_at_snr(&colored, &n, self.snr_db));
        clip.channel_id = Some(self.channel_id.clone());
        clip.noise_class = Some(self.noise_class.name().to_string());
        clip
    }
}

/// `n_utts` utterances each rendered through `n_channels` FIR colorations
/// (no additive noise). Channel ids are `ch0..`.
pub fn parallel_corpus(n_utts: usize, n_channels: usize, seconds: f64, seed: u64) -> Vec<AudioClip> {
    let chans: Vec<Coloration> = (0..n_channels)
        .map(|k| Coloration::random(derive_seed(seed, &format!("channel{k}")), 16))
        .collect();
    let mut out = Vec::with_capacity(n_utts * n_channels);
    for u in 0..n_utts {
        let clean = speech_like(&format!("utt{u:03}"), seconds, seed);
        for (k, c) in chans.iter().enumerate() {
            let mut clip = c.apply(&clean);
            clip.channel_id = Some(format!("ch{k}"));
            out.push(clip);
        }
    }
    out
}
