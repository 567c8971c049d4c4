//! Sparsity and reconstruction-quality metrics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Zip};

use crate::corpus::LabeledClip;
use crate::error::{Error, Result};
use crate::model::Vae;
use crate::signal::{resynthesize, stft, AudioClip, StftConfig, StftFrames};

/// SI-SDR reported for a perfect (zero-residual) estimate.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Power floor applied before taking logs.
pub const POWER_FLOOR: f64 = 1e-10;

/// Hoyer sparsity `(√d − ‖v‖₁/‖v‖₂) / (√d − 1)`, in `[0, 1]`.
///
/// `None` for vectors shorter than 2 or with all entries zero.
pub fn hoyer(v: &[f64]) -> Option<f64> {
    let d = v.len();
    if d < 2 {
        return None;
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    let l2: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 == 0.0 || !l2.is_finite() {
        return None;
    }
    let sd = (d as f64).sqrt();
    Some(((sd - l1 / l2) / (sd - 1.0)).clamp(0.0, 1.0))
}

/// Mean over frames of the RMS (over bins) of `10·log10(s/ŝ)`.
pub fn log_spectral_distance(s: &Array2<f64>, s_hat: &Array2<f64>) -> Result<f64> {
    if s.dim() != s_hat.dim() {
        return Err(Error::Dimension {
            op: "log_spectral_distance",
            lhs: s.dim(),
            rhs: s_hat.dim(),
        });
    }
    if s.nrows() == 0 || s.ncols() == 0 {
        return Err(Error::Input("log-spectral distance of an empty spectrogram".into()));
    }
    let per_frame: f64 = Zip::from(s.rows())
        .and(s_hat.rows())
        .fold(0.0, |acc, a, b| {
            let msq = Zip::from(&a).and(&b).fold(0.0, |m, &x, &y| {
                let d = 10.0 * (x.max(POWER_FLOOR) / y.max(POWER_FLOOR)).log10();
                m + d * d
            }) / a.len() as f64;
            acc + msq.sqrt()
        });
    Ok(per_frame / s.nrows() as f64)
}

/// Scale-invariant SDR in dB, capped at ±[`SI_SDR_CAP_DB`].
///
/// `None` when the reference has no energy.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<Option<f64>> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension {
            op: "si_sdr",
            lhs: (1, reference.len()),
            rhs: (1, estimate.len()),
        });
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Ok(None);
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / rr;
    let target = alpha * alpha * rr;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (e - alpha * r).powi(2))
        .sum();
    let db = if residual == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(Some(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)))
}

/// LSD between `frames.power` and `power_est`, and SI-SDR between the clip
/// and its resynthesis from `power_est` with the original phase.
pub fn score_resynthesis(
    clip: &AudioClip,
    frames: &StftFrames,
    power_est: &Array2<f64>,
) -> Result<(f64, Option<f64>, AudioClip)> {
    let lsd = log_spectral_distance(&frames.power, power_est)?;
    let estimate = resynthesize(power_est, &frames.phase, frames.config, frames.sample_rate)?;
    let sdr = si_sdr(&clip.samples[..estimate.len()], &estimate.samples)?;
    Ok((lsd, sdr, estimate))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub utterance: String,
    pub frames: usize,
    /// Mean Hoyer score over the clip's frames with a defined score.
    pub hoyer: Option<f64>,
    pub lsd_db: f64,
    pub si_sdr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean and standard deviation of per-frame Hoyer scores over all frames.
    pub hoyer_mean: f64,
    pub hoyer_std: f64,
    pub lsd_mean: f64,
    pub sisdr_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, frame_hoyer: &[f64]) -> Self {
        let (hoyer_mean, hoyer_std) = mean_std(frame_hoyer);
        let lsd: Vec<f64> = rows.iter().map(|r| r.lsd_db).collect();
        let sdr: Vec<f64> = rows.iter().filter_map(|r| r.si_sdr_db).collect();
        Self {
            hoyer_mean,
            hoyer_std,
            lsd_mean: mean_std(&lsd).0,
            sisdr_mean: mean_std(&sdr).0,
            rows,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.rows.iter().map(|r| r.frames).sum()
    }

    /// One row per utterance followed by an `ALL` aggregate row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["utterance", "frames", "hoyer", "lsd_db", "si_sdr_db"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.utterance.clone(),
                r.frames.to_string(),
                fmt_opt(r.hoyer),
                format!("{:.6}", r.lsd_db),
                fmt_opt(r.si_sdr_db),
            ])
            .map_err(io)?;
        }
        w.write_record([
            "ALL".to_string(),
            self.total_frames().to_string(),
            format!("{:.6}", self.hoyer_mean),
            format!("{:.6}", self.lsd_mean),
            format!("{:.6}", self.sisdr_mean),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "utterances: {}", self.rows.len());
        let _ = writeln!(s, "frames: {}", self.total_frames());
        let _ = writeln!(s, "hoyer_mean: {:.6}", self.hoyer_mean);
        let _ = writeln!(s, "hoyer_std: {:.6}", self.hoyer_std);
        let _ = writeln!(s, "lsd_mean_db: {:.6}", self.lsd_mean);
        let _ = writeln!(s, "si_sdr_mean_db: {:.6}", self.sisdr_mean);
        s
    }

    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let p = csv_path.as_ref();
        std::fs::write(p, self.to_csv()?).map_err(|e| Error::file(p, e))
    }
}

/// Analysis-resynthesis of every clip with the posterior mean, no sampling.
pub fn evaluate(vae: &Vae, clips: &[LabeledClip], cfg: StftConfig) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Input("no clips to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(clips.len());
    let mut frame_hoyer = Vec::new();
    for c in clips {
        let frames = stft(&c.clip, cfg)?;
        let rec = vae.reconstruct(&frames.power)?;
        let scores: Vec<f64> = rec
            .code_mean
            .rows()
            .into_iter()
            .filter_map(|r| hoyer(&r.to_vec()))
            .collect();
        let (lsd, sdr, _) = score_resynthesis(&c.clip, &frames, &rec.power)?;
        rows.push(EvalRow {
            utterance: c.id(),
            frames: frames.n_frames(),
            hoyer: (!scores.is_empty()).then(|| mean_std(&scores).0),
            lsd_db: lsd,
            si_sdr_db: sdr,
        });
        frame_hoyer.extend(scores);
    }
    Ok(EvalReport::from_rows(rows, &frame_hoyer))
}
