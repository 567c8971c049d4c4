//! STFT analysis and weighted overlap-add resynthesis with a sine window.
//!
//! Frames are taken every `hop = window_len / 4` samples with no zero
//! padding; trailing samples that do not fill a whole frame are dropped.
//! The synthesis window equals the analysis window, and the overlap-add is
//! divided by the summed squared window, so `istft(stft(x))` reproduces `x`
//! over every sample covered by at least one frame.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Frame length and hop of the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        let cfg = Self { window_len, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 4 || self.window_len % 4 != 0 {
            return Err(Error::contract(format!(
                "window length must be a positive multiple of 4, got {}",
                self.window_len
            )));
        }
        if self.hop * 4 != self.window_len {
            return Err(Error::contract(format!(
                "hop must be window_len/4 (75% overlap), got window {} hop {}",
                self.window_len, self.hop
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of whole frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Samples covered by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }
}

/// `w[l] = sin(π (l + 0.5) / len)`.
pub fn sine_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::contract(format!(
            "sine window length must be even and >= 2, got {len}"
        )));
    }
    Ok((0..len)
        .map(|l| (PI * (l as f64 + 0.5) / len as f64).sin())
        .collect())
}

/// Power spectrogram and phase of a clip, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StftFrames {
    pub power: Array2<f64>,
    pub phase: Array2<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl StftFrames {
    pub fn n_frames(&self) -> usize {
        self.power.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.power.ncols()
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.power.dim() != self.phase.dim() {
            return Err(Error::contract(format!(
                "power {:?} and phase {:?} shapes differ",
                self.power.dim(),
                self.phase.dim()
            )));
        }
        if self.power.ncols() != self.config.n_bins() {
            return Err(Error::contract(format!(
                "expected {} bins for window {}, got {}",
                self.config.n_bins(),
                self.config.window_len,
                self.power.ncols()
            )));
        }
        Ok(())
    }
}

pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<StftFrames> {
    cfg.validate()?;
    let n_frames = cfg.frame_count(clip.len());
    if n_frames == 0 {
        return Err(Error::Input(format!(
            "clip of {} samples is shorter than one window ({})",
            clip.len(),
            cfg.window_len
        )));
    }
    let window = sine_window(cfg.window_len)?;
    let n_bins = cfg.n_bins();
    let fft = FftPlanner::new().plan_fft_forward(cfg.window_len);
    let mut buf = vec![Complex64::default(); cfg.window_len];
    let mut power = Array2::zeros((n_frames, n_bins));
    let mut phase = Array2::zeros((n_frames, n_bins));

    for f in 0..n_frames {
        let start = f * cfg.hop;
        for (l, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(clip.samples[start + l] * window[l], 0.0);
        }
        fft.process(&mut buf);
        for (b, x) in buf.iter().take(n_bins).enumerate() {
            // DC and Nyquist bins of a real input are real.
            let x = if b == 0 || b == n_bins - 1 {
                Complex64::new(x.re, 0.0)
            } else {
                *x
            };
            power[[f, b]] = x.norm_sqr();
            phase[[f, b]] = x.arg();
        }
    }
    Ok(StftFrames {
        power,
        phase,
        config: cfg,
        sample_rate: clip.sample_rate,
    })
}

/// Weighted overlap-add inverse of [`stft`], using magnitude `sqrt(power)`.
pub fn istft(frames: &StftFrames) -> Result<AudioClip> {
    frames.check()?;
    let magnitude = frames.power.mapv(f64::sqrt);
    overlap_add(&magnitude, &frames.phase, frames.config, frames.sample_rate)
}

/// Builds a complex STFT from `sqrt(power_est)` and `phase`, then inverts it.
pub fn resynthesize(
    power_est: &Array2<f64>,
    phase: &Array2<f64>,
    cfg: StftConfig,
    sample_rate: u32,
) -> Result<AudioClip> {
    if power_est.dim() != phase.dim() {
        return Err(Error::Dimension {
            op: "resynthesize",
            lhs: power_est.dim(),
            rhs: phase.dim(),
        });
    }
    if let Some(((row, col), &value)) = power_est.indexed_iter().find(|(_, &p)| !(p >= 0.0)) {
        return Err(Error::Domain {
            op: "resynthesize",
            row,
            col,
            value,
        });
    }
    let frames = StftFrames {
        power: power_est.clone(),
        phase: phase.clone(),
        config: cfg,
        sample_rate,
    };
    istft(&frames)
}

fn overlap_add(
    magnitude: &Array2<f64>,
    phase: &Array2<f64>,
    cfg: StftConfig,
    sample_rate: u32,
) -> Result<AudioClip> {
    let n_frames = magnitude.nrows();
    let len = cfg.window_len;
    let n_bins = cfg.n_bins();
    let window = sine_window(len)?;
    let ifft = FftPlanner::new().plan_fft_inverse(len);
    let out_len = cfg.covered_len(n_frames);
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex64::default(); len];

    for f in 0..n_frames {
        fill_hermitian(&mut buf, magnitude.row(f), phase.row(f), n_bins);
        ifft.process(&mut buf);
        let start = f * cfg.hop;
        for l in 0..len {
            out[start + l] += window[l] * buf[l].re / len as f64;
            norm[start + l] += window[l] * window[l];
        }
    }
    for (y, w2) in out.iter_mut().zip(&norm) {
        // The sine window is strictly positive, so every covered sample has w2 > 0.
        *y /= w2;
    }
    AudioClip::new(out, sample_rate)
}

fn fill_hermitian(
    buf: &mut [Complex64],
    magnitude: ArrayView1<f64>,
    phase: ArrayView1<f64>,
    n_bins: usize,
) {
    let len = buf.len();
    for b in 0..n_bins {
        let x = if b == 0 || b == n_bins - 1 {
            // Keep the real-signal constraint on the self-conjugate bins.
            Complex64::new(magnitude[b] * phase[b].cos(), 0.0)
        } else {
            Complex64::from_polar(magnitude[b], phase[b])
        };
        buf[b] = x;
        if b > 0 && b < n_bins - 1 {
            buf[len - b] = x.conj();
        }
    }
}

/// Reads a 16-bit PCM mono WAV at 16 kHz, scaling samples into [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::file(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            path: path.to_path_buf(),
            expected: SAMPLE_RATE,
            found: spec.sample_rate,
        });
    }
    if spec.channels != 1 {
        return Err(Error::file(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::file(
            path,
            format!(
                "expected 16-bit PCM, found {:?} {} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::file(path, e))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a clip as 16-bit PCM mono, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::file(path, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::file(path, e))?;
    }
    writer.finalize().map_err(|e| Error::file(path, e))
}
