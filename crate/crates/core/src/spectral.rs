//! Log-magnitude STFT analysis/synthesis and fixed-size patching.
//!
//! Layout convention: every time-frequency matrix is stored row-major with
//! the frequency bin as the row (`[FREQ_BINS × frames]`).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, DomainTag, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const FFT_SIZE: usize = 256;
pub const HOP: usize = 128;
pub const FREQ_BINS: usize = FFT_SIZE / 2 + 1;
pub const PATCH_FRAMES: usize = 128;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-5;
pub const CACHE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// `ln(max(|X|, floor))`, `[FREQ_BINS × frames]`.
    pub log_mag: Vec<f64>,
    /// Phase in radians, `(-π, π]`.
    pub phase: Vec<f64>,
    pub frames: usize,
    pub frame_hop: usize,
    pub fft_size: usize,
    pub utterance_id: String,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.log_mag[bin * self.frames + frame]
    }

    /// A spectrogram with every magnitude at `floor` and zero phase.
    pub fn silent(frames: usize, floor: f64, utterance_id: impl Into<String>) -> Self {
        Self {
            log_mag: vec![floor.ln(); FREQ_BINS * frames],
            phase: vec![0.0; FREQ_BINS * frames],
            frames,
            frame_hop: HOP,
            fft_size: FFT_SIZE,
            utterance_id: utterance_id.into(),
        }
    }

    /// Same geometry and phase, new log-magnitudes.
    pub fn with_log_mag(&self, log_mag: Vec<f64>) -> Result<Self> {
        if log_mag.len() != self.log_mag.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.freq_bins(), self.frames],
                found: vec![log_mag.len()],
            });
        }
        Ok(Self {
            log_mag,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size != FFT_SIZE || self.freq_bins() != FREQ_BINS {
            return Err(Error::ShapeMismatch {
                expected: vec![FREQ_BINS],
                found: vec![self.freq_bins()],
            });
        }
        let n = FREQ_BINS * self.frames;
        if self.log_mag.len() != n || self.phase.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![FREQ_BINS, self.frames],
                found: vec![self.log_mag.len(), self.phase.len()],
            });
        }
        Ok(())
    }
}

/// A `[FREQ_BINS × PATCH_FRAMES]` slice of a spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroPatch {
    pub values: Vec<f64>,
    pub origin_frame: usize,
    pub parent_utterance: String,
    pub pad_frames: usize,
}

impl SpectroPatch {
    pub const SHAPE: [usize; 2] = [FREQ_BINS, PATCH_FRAMES];

    pub fn new(values: Vec<f64>, parent_utterance: impl Into<String>) -> Result<Self> {
        if values.len() != FREQ_BINS * PATCH_FRAMES {
            return Err(Error::ShapeMismatch {
                expected: Self::SHAPE.to_vec(),
                found: vec![values.len()],
            });
        }
        Ok(Self {
            values,
            origin_frame: 0,
            parent_utterance: parent_utterance.into(),
            pad_frames: 0,
        })
    }

    pub fn filled(value: f64, parent_utterance: impl Into<String>) -> Self {
        Self {
            values: vec![value; FREQ_BINS * PATCH_FRAMES],
            origin_frame: 0,
            parent_utterance: parent_utterance.into(),
            pad_frames: 0,
        }
    }

    /// Same placement metadata, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(values, self.parent_utterance.clone())?;
        p.origin_frame = self.origin_frame;
        p.pad_frames = self.pad_frames;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != FREQ_BINS * PATCH_FRAMES {
            return Err(Error::ShapeMismatch {
                expected: Self::SHAPE.to_vec(),
                found: vec![self.values.len()],
            });
        }
        if self.pad_frames >= PATCH_FRAMES {
            return Err(Error::GapOrOverlap(format!(
                "pad_frames {} out of range",
                self.pad_frames
            )));
        }
        Ok(())
    }
}

/// STFT analysis/synthesis with cached FFT plans.
pub struct Stft {
    floor: f64,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new(DEFAULT_LOG_FLOOR)
    }
}

impl Stft {
    pub fn new(floor: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            floor,
            window: hann(FFT_SIZE),
            forward: planner.plan_fft_forward(FFT_SIZE),
            inverse: planner.plan_fft_inverse(FFT_SIZE),
        }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// 256-point Hann-windowed STFT, hop 128, centred with reflect padding.
    pub fn analyze(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let x = &clip.samples;
        if x.len() < FFT_SIZE {
            return Err(Error::TooShort {
                len: x.len(),
                need: FFT_SIZE,
            });
        }
        let pad = FFT_SIZE / 2;
        let padded = reflect_pad(x, pad);
        let frames = 1 + x.len() / HOP;
        let mut log_mag = vec![0.0; FREQ_BINS * frames];
        let mut phase = vec![0.0; FREQ_BINS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let log_floor = self.floor.ln();
        for t in 0..frames {
            let start = t * HOP;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + k] * self.window[k], 0.0);
            }
            self.forward.process(&mut buf);
            for (f, c) in buf.iter().take(FREQ_BINS).enumerate() {
                let mag = c.norm();
                log_mag[f * frames + t] = if mag > self.floor { mag.ln() } else { log_floor };
                let mut ph = c.im.atan2(c.re);
                if ph <= -PI {
                    ph = PI;
                }
                phase[f * frames + t] = ph;
            }
        }
        Ok(Spectrogram {
            log_mag,
            phase,
            frames,
            frame_hop: HOP,
            fft_size: FFT_SIZE,
            utterance_id: clip.utterance_id.clone(),
        })
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`]. Produces
    /// `hop * (frames - 1)` samples.
    pub fn synthesize(&self, spec: &Spectrogram) -> Result<AudioClip> {
        spec.validate()?;
        let frames = spec.frames;
        let pad = FFT_SIZE / 2;
        let total = FFT_SIZE + HOP * (frames.saturating_sub(1));
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for t in 0..frames {
            for f in 0..FREQ_BINS {
                let idx = f * frames + t;
                let mag = spec.log_mag[idx].exp();
                buf[f] = Complex::from_polar(mag, spec.phase[idx]);
            }
            // DC and Nyquist bins of a real signal are real.
            buf[0].im = 0.0;
            buf[FREQ_BINS - 1].im = 0.0;
            for f in 1..FFT_SIZE / 2 {
                buf[FFT_SIZE - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * HOP;
            for k in 0..FFT_SIZE {
                let w = self.window[k];
                out[start + k] += buf[k].re / FFT_SIZE as f64 * w;
                norm[start + k] += w * w;
            }
        }
        let len = HOP * frames.saturating_sub(1);
        let samples = (0..len)
            .map(|i| {
                let n = norm[i + pad];
                if n > 1e-10 {
                    out[i + pad] / n
                } else {
                    0.0
                }
            })
            .collect();
        Ok(AudioClip::new(spec.utterance_id.clone(), DomainTag::Source, samples))
    }

    /// Like [`Stft::synthesize`] but padded or truncated to `len` samples.
    pub fn synthesize_len(&self, spec: &Spectrogram, len: usize) -> Result<AudioClip> {
        let mut clip = self.synthesize(spec)?;
        clip.samples.resize(len, 0.0);
        Ok(clip)
    }
}

pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    Stft::default().analyze(clip)
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    Stft::default().synthesize(spec)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i.min(n - 1)]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n.saturating_sub(2 + i)]));
    out
}

/// Split into non-overlapping `PATCH_FRAMES`-frame windows; the last window
/// is padded with the log floor.
pub fn segment_patches(spec: &Spectrogram, log_floor: f64) -> Result<Vec<SpectroPatch>> {
    if spec.frames == 0 {
        return Err(Error::EmptySpectrogram);
    }
    spec.validate()?;
    let n_patches = spec.frames.div_ceil(PATCH_FRAMES);
    let fill = log_floor.ln();
    let mut patches = Vec::with_capacity(n_patches);
    for p in 0..n_patches {
        let origin = p * PATCH_FRAMES;
        let valid = (spec.frames - origin).min(PATCH_FRAMES);
        let mut values = vec![fill; FREQ_BINS * PATCH_FRAMES];
        for f in 0..FREQ_BINS {
            let src = &spec.log_mag[f * spec.frames + origin..f * spec.frames + origin + valid];
            values[f * PATCH_FRAMES..f * PATCH_FRAMES + valid].copy_from_slice(src);
        }
        patches.push(SpectroPatch {
            values,
            origin_frame: origin,
            parent_utterance: spec.utterance_id.clone(),
            pad_frames: PATCH_FRAMES - valid,
        });
    }
    Ok(patches)
}

/// Inverse of [`segment_patches`], taking phase from `phase_source`.
pub fn reassemble(patches: &[SpectroPatch], phase_source: &Spectrogram) -> Result<Spectrogram> {
    if patches.is_empty() {
        return Err(Error::EmptySpectrogram);
    }
    let parent = &patches[0].parent_utterance;
    for (i, p) in patches.iter().enumerate() {
        p.validate()?;
        if &p.parent_utterance != parent {
            return Err(Error::GapOrOverlap(format!(
                "patch {i} belongs to `{}`, expected `{parent}`",
                p.parent_utterance
            )));
        }
        if p.origin_frame != i * PATCH_FRAMES {
            return Err(Error::GapOrOverlap(format!(
                "patch {i} starts at frame {}, expected {}",
                p.origin_frame,
                i * PATCH_FRAMES
            )));
        }
        if i + 1 < patches.len() && p.pad_frames != 0 {
            return Err(Error::GapOrOverlap(format!("padding inside patch {i}")));
        }
    }
    let frames = patches.len() * PATCH_FRAMES - patches.last().unwrap().pad_frames;
    if frames != phase_source.frames {
        return Err(Error::FrameCountMismatch {
            expected: phase_source.frames,
            found: frames,
        });
    }
    let mut log_mag = vec![0.0; FREQ_BINS * frames];
    for p in patches {
        let valid = PATCH_FRAMES - p.pad_frames;
        for f in 0..FREQ_BINS {
            log_mag[f * frames + p.origin_frame..f * frames + p.origin_frame + valid]
                .copy_from_slice(&p.values[f * PATCH_FRAMES..f * PATCH_FRAMES + valid]);
        }
    }
    Ok(Spectrogram {
        log_mag,
        phase: phase_source.phase.clone(),
        frames,
        frame_hop: phase_source.frame_hop,
        fft_size: phase_source.fft_size,
        utterance_id: parent.clone(),
    })
}

/// Binary cache: version byte, u32 freq, u32 frames, u32 hop, u32 fft
/// (little-endian), then row-major f32 log-magnitudes followed by phases.
pub fn write_cache(path: &Path, spec: &Spectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[CACHE_VERSION])?;
    for v in [spec.freq_bins(), spec.frames, spec.frame_hop, spec.fft_size] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &v in spec.log_mag.iter().chain(&spec.phase) {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path, utterance_id: impl Into<String>) -> Result<Spectrogram> {
    let file = File::open(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut r = BufReader::new(file);
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CACHE_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "spectrogram cache version {}",
            version[0]
        )));
    }
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *h = u32::from_le_bytes(b);
    }
    let [freq, frames, hop, fft] = header.map(|v| v as usize);
    if freq != fft / 2 + 1 {
        return Err(Error::UnsupportedFormat(format!(
            "cache has {freq} bins for fft size {fft}"
        )));
    }
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };
    let log_mag = read_block(freq * frames)?;
    let phase = read_block(freq * frames)?;
    Ok(Spectrogram {
        log_mag,
        phase,
        frames,
        frame_hop: hop,
        fft_size: fft,
        utterance_id: utterance_id.into(),
    })
}

/// Sample rate implied by the frame hop, for reporting.
pub fn frame_rate() -> f64 {
    SAMPLE_RATE as f64 / HOP as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioClip::new("tone", DomainTag::Source, s)
    }

    fn spec_with_frames(frames: usize) -> Spectrogram {
        Spectrogram {
            log_mag: (0..FREQ_BINS * frames).map(|i| (i as f64 * 0.01).sin()).collect(),
            phase: vec![0.5; FREQ_BINS * frames],
            frames,
            frame_hop: HOP,
            fft_size: FFT_SIZE,
            utterance_id: "u".into(),
        }
    }

    #[test]
    fn zero_clip_is_uniform_floor() {
        let clip = AudioClip::new("z", DomainTag::Source, vec![0.0; 4000]);
        let s = stft(&clip).unwrap();
        assert!(s.log_mag.iter().all(|&v| v == DEFAULT_LOG_FLOOR.ln()));
        assert_eq!(s.frames, 1 + 4000 / HOP);
    }

    #[test]
    fn too_short_clip_rejected() {
        let clip = AudioClip::new("z", DomainTag::Source, vec![0.1; 255]);
        assert!(matches!(stft(&clip), Err(Error::TooShort { len: 255, need: 256 })));
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let s = stft(&tone(1000.0, 1.0)).unwrap();
        let expected = (1000.0 / (SAMPLE_RATE as f64 / FFT_SIZE as f64)).round() as usize;
        assert_eq!(expected, 16);
        for t in 2..s.frames - 2 {
            let best = (0..FREQ_BINS)
                .max_by(|&a, &b| s.at(a, t).total_cmp(&s.at(b, t)))
                .unwrap();
            assert_eq!(best, expected, "frame {t}");
        }
    }

    #[test]
    fn phase_in_half_open_interval() {
        let s = stft(&tone(437.0, 0.3)).unwrap();
        assert!(s.phase.iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn segment_counts_and_padding() {
        for (frames, count, pad) in [(128, 1, 0), (200, 2, 56), (1, 1, 127), (256, 2, 0)] {
            let p = segment_patches(&spec_with_frames(frames), DEFAULT_LOG_FLOOR).unwrap();
            assert_eq!(p.len(), count, "T={frames}");
            assert_eq!(p.last().unwrap().pad_frames, pad, "T={frames}");
            assert!(p.iter().all(|q| q.values.len() == FREQ_BINS * PATCH_FRAMES));
        }
        let p = segment_patches(&spec_with_frames(200), DEFAULT_LOG_FLOOR).unwrap();
        // padding carries the log floor, not zero
        assert_eq!(p[1].values[PATCH_FRAMES - 1], DEFAULT_LOG_FLOOR.ln());
    }

    #[test]
    fn empty_spectrogram_rejected() {
        assert!(matches!(
            segment_patches(&spec_with_frames(0), DEFAULT_LOG_FLOOR),
            Err(Error::EmptySpectrogram)
        ));
    }

    #[test]
    fn reassemble_errors() {
        let s = spec_with_frames(300);
        let mut p = segment_patches(&s, DEFAULT_LOG_FLOOR).unwrap();
        assert_eq!(reassemble(&p, &s).unwrap().log_mag, s.log_mag);
        p.swap(0, 1);
        assert!(matches!(reassemble(&p, &s), Err(Error::GapOrOverlap(_))));
        p.swap(0, 1);
        p[1].parent_utterance = "other".into();
        assert!(matches!(reassemble(&p, &s), Err(Error::GapOrOverlap(_))));
        p[1].parent_utterance = "u".into();
        let shorter = spec_with_frames(299);
        assert!(matches!(
            reassemble(&p, &shorter),
            Err(Error::FrameCountMismatch { expected: 299, found: 300 })
        ));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.spec");
        let s = stft(&tone(300.0, 0.2)).unwrap();
        write_cache(&path, &s).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[0], CACHE_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[1..5].try_into().unwrap()), 129);
        assert_eq!(bytes.len(), 17 + 2 * 4 * FREQ_BINS * s.frames);
        let back = read_cache(&path, "tone").unwrap();
        assert_eq!(back.frames, s.frames);
        for (a, b) in back.log_mag.iter().zip(&s.log_mag) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
