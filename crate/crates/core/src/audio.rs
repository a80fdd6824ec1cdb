//! Audio clips, WAV ingestion, resampling and the JSON Lines dataset manifest.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub utterance_id: String,
    pub domain_tag: DomainTag,
    pub channel_id: Option<String>,
    pub noise_class: Option<String>,
}

impl AudioClip {
    /// A 16 kHz clip with no channel or noise labels.
    pub fn new(utterance_id: impl Into<String>, domain_tag: DomainTag, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
            utterance_id: utterance_id.into(),
            domain_tag,
            channel_id: None,
            noise_class: None,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "clip at {} Hz, pipeline expects {SAMPLE_RATE} Hz",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// One record of a JSON Lines dataset manifest. Unknown keys are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub domain: DomainTag,
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_class: Option<String>,
    /// Reference transcript, used only by the external ASR hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Read a manifest; relative audio paths resolve against the manifest's
/// directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if entry.audio_path.is_relative() {
            entry.audio_path = base.join(&entry.audio_path);
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Decode a PCM WAV file into a 16 kHz mono clip labelled from `entry`.
pub fn load_audio(path: &Path, entry: &ManifestEntry) -> Result<AudioClip> {
    let file = File::open(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(io) => Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: io.to_string(),
        },
        other => Error::UnsupportedFormat(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedFormat("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{bits}-bit {fmt:?} samples")));
        }
    }
    .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    if interleaved.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    let clip = AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
        utterance_id: entry.utterance_id.clone(),
        domain_tag: entry.domain,
        channel_id: entry.channel_id.clone(),
        noise_class: entry.noise_class.clone(),
    };
    clip.validate()?;
    Ok(clip)
}

/// Write a clip as 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    w.finalize()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

const SINC_HALF_WIDTH: f64 = 32.0;

/// Band-limited resampling by Hann-windowed sinc interpolation. When
/// downsampling, the kernel is widened so the cutoff sits at the output
/// Nyquist frequency.
pub fn resample(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = ((input.len() as f64) * ratio).round() as usize;
    let cutoff = ratio.min(1.0) * 0.97;
    let half = SINC_HALF_WIDTH / cutoff;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let window = 0.5 + 0.5 * (PI * d / half).cos();
                acc += x * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}
