//! Corpus ingestion: WAV directories, speaker-disjoint splits, a synthetic
//! speech-like generator, and stacking clips into spectrogram frames.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{read_wav, stft, AudioClip, StftConfig, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub speaker: String,
    pub utterance: String,
    pub clip: AudioClip,
}

impl LabeledClip {
    pub fn id(&self) -> String {
        format!("{}_{}", self.speaker, self.utterance)
    }
}

/// Fractions of speakers assigned to train and validation; the remainder
/// goes to test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, r) in [("train_ratio", self.train), ("val_ratio", self.validation)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(field, format!("ratio {r} outside [0, 1]")));
            }
        }
        if self.train + self.validation > 1.0 + 1e-12 {
            return Err(Error::config("val_ratio", "train + validation ratios exceed 1"));
        }
        Ok(())
    }

    /// Speaker counts `(train, validation, test)`: floors for the first two,
    /// remainder to test.
    pub fn counts(&self, n_speakers: usize) -> (usize, usize, usize) {
        let n = n_speakers as f64;
        let train = (self.train * n + 1e-9).floor() as usize;
        let val = ((self.validation * n + 1e-9).floor() as usize).min(n_speakers - train);
        (train, val, n_speakers - train - val)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledClip>,
    pub validation: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Option<&[LabeledClip]> {
        match name {
            "train" => Some(&self.train),
            "val" | "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn speakers(clips: &[LabeledClip]) -> Vec<String> {
        let mut s: Vec<String> = clips.iter().map(|c| c.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Assigns whole speakers to splits after a seeded shuffle of the sorted
/// speaker list.
pub fn split_by_speaker(clips: Vec<LabeledClip>, spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut speakers = DatasetSplit::speakers(&clips);
    let (n_train, n_val, n_test) = spec.counts(speakers.len());
    for (name, n) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::config(
                "split",
                format!("{name} split is empty ({} speakers available)", speakers.len()),
            ));
        }
    }
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let train_set = &speakers[..n_train];
    let val_set = &speakers[n_train..n_train + n_val];

    let mut split = DatasetSplit::default();
    for clip in clips {
        if train_set.contains(&clip.speaker) {
            split.train.push(clip);
        } else if val_set.contains(&clip.speaker) {
            split.validation.push(clip);
        } else {
            split.test.push(clip);
        }
    }
    Ok(split)
}

/// Parses `<speaker>_<utterance>` from a file stem.
fn parse_stem(path: &Path) -> Result<(String, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::file(path, "file name is not valid UTF-8"))?;
    match stem.split_once('_') {
        Some((spk, utt)) if !spk.is_empty() && !utt.is_empty() => Ok((spk.to_string(), utt.to_string())),
        _ => Err(Error::file(path, "expected a `<speaker>_<utterance>.wav` file name")),
    }
}

/// Reads every `.wav` file in `dir` (sorted by name).
pub fn read_wav_dir(dir: impl AsRef<Path>) -> Result<Vec<LabeledClip>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::file(dir, "no .wav files found"));
    }
    paths
        .iter()
        .map(|p| {
            let (speaker, utterance) = parse_stem(p)?;
            Ok(LabeledClip {
                speaker,
                utterance,
                clip: read_wav(p)?,
            })
        })
        .collect()
}

pub fn load_wav_dir(dir: impl AsRef<Path>, spec: &SplitSpec) -> Result<DatasetSplit> {
    split_by_speaker(read_wav_dir(dir)?, spec)
}

/// Per-speaker voice traits of the synthetic generator.
#[derive(Clone, Copy, Debug)]
struct Voice {
    f0: f64,
    formant_scale: f64,
}

/// Vowel-like formant centres (Hz).
const VOWELS: [[f64; 4]; 6] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3600.0],
    [300.0, 870.0, 2240.0, 3300.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3300.0],
    [440.0, 1020.0, 2240.0, 3200.0],
];

/// Harmonics are only placed below this frequency.
const MAX_HARMONIC_HZ: f64 = 3800.0;

fn synth_clip(rng: &mut ChaCha8Rng, voice: Voice, duration_s: f64) -> Result<AudioClip> {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;

    // Syllable-like segments, each voiced with its own formants or a pause.
    struct Segment {
        end: usize,
        voiced: bool,
        formants: Vec<(f64, f64, f64)>,
    }
    let mut segments = Vec::new();
    let mut t = 0;
    while t < n {
        let len = (rng.random_range(0.12..0.30) * fs) as usize;
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let n_formants = rng.random_range(2..=4);
        let formants = vowel[..n_formants]
            .iter()
            .map(|&f| {
                let centre = f * voice.formant_scale * rng.random_range(0.93..1.07);
                let bandwidth = rng.random_range(60.0..200.0);
                let gain = rng.random_range(0.4..1.0);
                (centre, bandwidth, gain)
            })
            .collect();
        segments.push(Segment {
            end: (t + len).min(n),
            voiced: rng.random_bool(0.85),
            formants,
        });
        t += len;
    }

    let f0_rate = rng.random_range(0.5..2.0);
    let f0_phase = rng.random_range(0.0..2.0 * PI);
    let f0_depth = rng.random_range(0.05..0.2);
    let ramp = (0.02 * fs) as usize;
    let max_h = (MAX_HARMONIC_HZ / 80.0) as usize;
    let mut phases = vec![0.0f64; max_h + 1];

    let mut samples = vec![0.0; n];
    let mut seg_start = 0;
    let mut seg = 0;
    for (i, out) in samples.iter_mut().enumerate() {
        while i >= segments[seg].end {
            seg_start = segments[seg].end;
            seg += 1;
        }
        let s = &segments[seg];
        let time = i as f64 / fs;
        let f0 = (voice.f0 * (1.0 + f0_depth * (2.0 * PI * f0_rate * time + f0_phase).sin()))
            .clamp(80.0, 300.0);
        // Raised-cosine ramps at segment edges.
        let pos = (i - seg_start).min(s.end - 1 - i);
        let env = if pos >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (PI * pos as f64 / ramp as f64).cos()
        };
        let mut acc = 0.0;
        for (h, phase) in phases.iter_mut().enumerate().skip(1) {
            let f = h as f64 * f0;
            if f >= MAX_HARMONIC_HZ {
                break;
            }
            *phase = (*phase + 2.0 * PI * f / fs) % (2.0 * PI);
            if !s.voiced {
                continue;
            }
            let amp: f64 = s
                .formants
                .iter()
                .map(|&(c, b, g)| g / (1.0 + ((f - c) / b).powi(2)))
                .sum();
            acc += amp * phase.sin();
        }
        *out = env * acc;
    }

    // Low-passed noise floor so that no frame is digitally silent.
    let mut lp = 0.0;
    let peak_voiced = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-3);
    for s in &mut samples {
        let w: f64 = StandardNormal.sample(rng);
        lp = 0.95 * lp + 0.05 * w;
        *s += 1e-3 * peak_voiced * lp;
    }

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s *= 0.95 / peak);
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

fn voice_for(rng: &mut ChaCha8Rng) -> Voice {
    Voice {
        f0: rng.random_range(90.0..220.0),
        formant_scale: rng.random_range(0.85..1.15),
    }
}

/// `n_clips` harmonic clips at 16 kHz with random pitch contours and 2–4
/// formant resonances per syllable, peak-normalized to 0.95.
pub fn synth_speech_like(seed: u64, n_clips: usize, duration_s: f64) -> Result<Vec<AudioClip>> {
    if !(duration_s >= 0.5) {
        return Err(Error::config("duration_s", format!("must be >= 0.5 s, got {duration_s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clips)
        .map(|_| {
            let voice = voice_for(&mut rng);
            synth_clip(&mut rng, voice, duration_s)
        })
        .collect()
}

/// Synthetic corpus with `n_clips` clips spread round-robin over
/// `n_speakers` voices, named `spkNN_uttNNN`.
pub fn synthetic_corpus(
    seed: u64,
    n_clips: usize,
    n_speakers: usize,
    duration_s: f64,
) -> Result<Vec<LabeledClip>> {
    if !(duration_s >= 0.5) {
        return Err(Error::config("duration_s", format!("must be >= 0.5 s, got {duration_s}")));
    }
    if n_speakers == 0 {
        return Err(Error::config("n_speakers", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voices: Vec<Voice> = (0..n_speakers).map(|_| voice_for(&mut rng)).collect();
    (0..n_clips)
        .map(|i| {
            let spk = i % n_speakers;
            Ok(LabeledClip {
                speaker: format!("spk{spk:02}"),
                utterance: format!("utt{:03}", i / n_speakers),
                clip: synth_clip(&mut rng, voices[spk], duration_s)?,
            })
        })
        .collect()
}

/// Power and phase frames of several clips stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramBatch {
    pub power: Array2<f64>,
    pub phase: Array2<f64>,
    /// Row range of each clip, in input order.
    pub offsets: Vec<Range<usize>>,
}

impl SpectrogramBatch {
    pub fn n_frames(&self) -> usize {
        self.power.nrows()
    }
}

pub fn frames_of(clips: &[LabeledClip], cfg: StftConfig) -> Result<SpectrogramBatch> {
    if clips.is_empty() {
        return Err(Error::Input("cannot extract frames from an empty split".into()));
    }
    let mut powers = Vec::with_capacity(clips.len());
    let mut phases = Vec::with_capacity(clips.len());
    let mut offsets = Vec::with_capacity(clips.len());
    let mut row = 0;
    for c in clips {
        let f = stft(&c.clip, cfg).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", c.id())),
            other => other,
        })?;
        offsets.push(row..row + f.n_frames());
        row += f.n_frames();
        powers.push(f.power);
        phases.push(f.phase);
    }
    Ok(SpectrogramBatch {
        power: concatenate(Axis(0), &views(&powers)).expect("equal widths"),
        phase: concatenate(Axis(0), &views(&phases)).expect("equal widths"),
        offsets,
    })
}

fn views(v: &[Array2<f64>]) -> Vec<ndarray::ArrayView2<'_, f64>> {
    v.iter().map(|a| a.view()).collect()
}

/// SHA-256 over clip identifiers, lengths, sample rates and samples.
pub fn fingerprint(clips: &[LabeledClip]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.id().as_bytes());
        h.update([0u8]);
        h.update((c.clip.len() as u64).to_le_bytes());
        h.update(c.clip.sample_rate.to_le_bytes());
        for s in &c.clip.samples {
            h.update(s.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
