//! Command-line front end: `train`, `eval`, `resynth` and `compare`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_model, save_model};
use crate::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use crate::corpus::{self, split_by_speaker, LabeledClip};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::InputNorm;
use crate::signal::{read_wav, resynthesize, stft, write_wav};
use crate::trainer::fit_with;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.txt";
pub const COMPARE_CSV_FILE: &str = "comparison.csv";
pub const COMPARE_TEXT_FILE: &str = "comparison.txt";

#[derive(Debug, Parser)]
#[command(name = "sdm-vae", version, about = "Train and evaluate sparse dictionary-prior VAEs on speech spectrograms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment config file.
    Train { config: PathBuf },
    /// Analysis-resynthesis evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// A directory of `<speaker>_<utt>.wav` files, or `train`, `val` or
        /// `test` to use that split of the checkpoint's configured data.
        data: String,
        /// Directory for the report (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resynthesize one WAV file through a checkpoint.
    Resynth {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Tabulate evaluated experiments found under a directory.
    Compare { dir: PathBuf },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config, out, err),
        Command::Eval { checkpoint, data, out: dir } => cmd_eval(&checkpoint, &data, dir.as_deref(), out),
        Command::Resynth {
            checkpoint,
            input,
            output,
        } => cmd_resynth(&checkpoint, &input, &output, out),
        Command::Compare { dir } => cmd_compare(&dir, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

/// `key: value` lines.
fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn fingerprint_text(clips: &[LabeledClip]) -> String {
    format!(
        "data_fingerprint: {}\nclips: {}\n",
        corpus::fingerprint(clips),
        clips.len()
    )
}

pub fn cmd_train(config_path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;

    let clips = cfg.load_clips()?;
    write_file(&dir.join(FINGERPRINT_FILE), fingerprint_text(&clips))?;
    write_file(&dir.join(CONFIG_ECHO_FILE), cfg.to_toml())?;
    let split = split_by_speaker(clips, &cfg.split_spec())?;
    let stft_cfg = cfg.stft_config();
    let train = corpus::frames_of(&split.train, stft_cfg)?;
    let val = corpus::frames_of(&split.validation, stft_cfg)?;
    let _ = writeln!(
        out,
        "training {} on {} train / {} validation frames",
        cfg.experiment.variant,
        train.n_frames(),
        val.n_frames()
    );

    let mut vae = cfg.model_spec().build(cfg.experiment.seed)?;
    if cfg.model.standardize_input {
        vae.params.set_input_norm(Some(InputNorm::fit(&train.power)?))?;
    }
    let fit = fit_with(vae, &train.power, &val.power, &cfg.train_config(), |r| {
        let _ = writeln!(
            err,
            "epoch {:>4}  train {:.4}  val {:.4}  ({:.2}s)",
            r.epoch, r.train.total, r.val.total, r.seconds
        );
    })?;

    let mut log = String::from("epoch,train_loss,train_recon,train_kl,val_loss,val_recon,val_kl\n");
    let mut timing = String::from("epoch,seconds\n");
    for r in &fit.history {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train.total, r.train.recon, r.train.kl, r.val.total, r.val.recon, r.val.kl
        );
        let _ = writeln!(timing, "{},{:.6}", r.epoch, r.seconds);
    }
    write_file(&dir.join(TRAIN_LOG_FILE), log)?;
    write_file(&dir.join(TIMING_FILE), timing)?;
    save_model(dir.join(CHECKPOINT_FILE), &cfg, &fit.model)?;
    let _ = writeln!(
        out,
        "best epoch {} (val loss {:.4}), {} epochs run{}; outputs in {}",
        fit.best_epoch,
        fit.best_val,
        fit.history.len(),
        if fit.stopped_early { ", stopped early" } else { "" },
        dir.display()
    );
    Ok(())
}

fn eval_clips(cfg: &ExperimentConfig, data: &str) -> Result<Vec<LabeledClip>> {
    let path = Path::new(data);
    if path.is_dir() {
        return corpus::read_wav_dir(path);
    }
    let split = split_by_speaker(cfg.load_clips()?, &cfg.split_spec())?;
    split
        .part(data)
        .map(<[LabeledClip]>::to_vec)
        .ok_or_else(|| Error::Input(format!("`{data}` is neither a directory nor one of train, val, test")))
}

pub fn cmd_eval(checkpoint: &Path, data: &str, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (cfg, vae) = load_model(checkpoint)?;
    let clips = eval_clips(&cfg, data)?;
    let report = evaluate(&vae, &clips, cfg.stft_config())?;

    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    }
    report.write(dir.join(EVAL_FILE))?;
    let mut summary = format!(
        "variant: {}\nm: {}\nk: {}\ndata: {data}\n",
        cfg.experiment.variant,
        cfg.model.m,
        vae.arch().code_dim
    );
    summary.push_str(&fingerprint_text(&clips));
    summary.push_str(&report.summary());
    write_file(&dir.join(EVAL_SUMMARY_FILE), &summary)?;
    let _ = out.write_all(report.summary().as_bytes());
    Ok(())
}

pub fn cmd_resynth(checkpoint: &Path, input: &Path, output: &Path, out: &mut dyn Write) -> Result<()> {
    let (cfg, vae) = load_model(checkpoint)?;
    let clip = read_wav(input)?;
    let frames = stft(&clip, cfg.stft_config()).map_err(|e| Error::file(input, e))?;
    let rec = vae.reconstruct(&frames.power)?;
    let est = resynthesize(&rec.power, &frames.phase, frames.config, frames.sample_rate)?;
    write_wav(output, &est)?;
    let _ = writeln!(
        out,
        "wrote {} ({} of {} samples)",
        output.display(),
        est.len(),
        clip.len()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub experiment: String,
    pub variant: String,
    pub m: String,
    pub k: String,
    pub hoyer: f64,
    pub lsd_db: f64,
    pub si_sdr_db: f64,
}

fn aggregate_row(path: &Path) -> Result<[f64; 3]> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::file(path, e))?;
        if rec.get(0) == Some("ALL") {
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::file(path, format!("bad aggregate column {i}")))
            };
            return Ok([num(2)?, num(3)?, num(4)?]);
        }
    }
    Err(Error::file(path, "no ALL aggregate row"))
}

fn aligned_table(rows: &[ComparisonRow]) -> String {
    let header = ["experiment", "variant", "m", "k", "hoyer", "lsd_db", "si_sdr_db"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.experiment.clone(),
                r.variant.clone(),
                r.m.clone(),
                r.k.clone(),
                format!("{:.4}", r.hoyer),
                format!("{:.3}", r.lsd_db),
                format!("{:.3}", r.si_sdr_db),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &header);
    for row in &body {
        line(&mut s, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    s
}

pub fn cmd_compare(dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_ECHO_FILE).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::file(dir, "no experiment directories (with config.toml) found"));
    }

    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    let mut prints: Vec<(String, String, String)> = Vec::new();
    for sub in &subdirs {
        let name = sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let missing: Vec<&str> = [EVAL_FILE, EVAL_SUMMARY_FILE, FINGERPRINT_FILE]
            .into_iter()
            .filter(|f| !sub.join(f).is_file())
            .collect();
        if !missing.is_empty() {
            incomplete.push(format!("{name} (missing {})", missing.join(", ")));
            continue;
        }
        let summary = parse_kv(&read_file(&sub.join(EVAL_SUMMARY_FILE))?);
        let train_fp = parse_kv(&read_file(&sub.join(FINGERPRINT_FILE))?);
        let get = |kv: &[(String, String)], key: &str| kv_get(kv, key).unwrap_or("?").to_string();
        prints.push((
            name.clone(),
            get(&train_fp, "data_fingerprint"),
            get(&summary, "data_fingerprint"),
        ));
        let [hoyer, lsd_db, si_sdr_db] = aggregate_row(&sub.join(EVAL_FILE))?;
        rows.push(ComparisonRow {
            experiment: name,
            variant: get(&summary, "variant"),
            m: get(&summary, "m"),
            k: get(&summary, "k"),
            hoyer,
            lsd_db,
            si_sdr_db,
        });
    }

    for (_, a, b) in &prints {
        if *a != prints[0].1 || *b != prints[0].2 {
            let mut msg = String::from("experiments were run on different data:");
            for (n, t, e) in &prints {
                let _ = write!(msg, "\n  {n}: train {t}, eval {e}");
            }
            return Err(Error::Input(msg));
        }
    }

    if rows.len() >= 2 || incomplete.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["experiment", "variant", "m", "k", "hoyer", "lsd_db", "si_sdr_db"])
            .map_err(io)?;
        for r in &rows {
            w.write_record([
                r.experiment.clone(),
                r.variant.clone(),
                r.m.clone(),
                r.k.clone(),
                r.hoyer.to_string(),
                r.lsd_db.to_string(),
                r.si_sdr_db.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let text = aligned_table(&rows);
        write_file(&dir.join(COMPARE_CSV_FILE), bytes)?;
        write_file(&dir.join(COMPARE_TEXT_FILE), &text)?;
        let _ = out.write_all(text.as_bytes());
    }

    if !incomplete.is_empty() {
        let _ = writeln!(err, "incomplete experiments:");
        for i in &incomplete {
            let _ = writeln!(err, "  {i}");
        }
        return Err(Error::Input(format!("{} incomplete experiment(s)", incomplete.len())));
    }
    if rows.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 evaluated experiments, found {}",
            rows.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run_capture(&["sdm-vae"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["sdm-vae", "frobnicate"]).0, EXIT_USAGE);
        let (code, out, _) = run_capture(&["sdm-vae", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("train"));
    }

    #[test]
    fn invalid_config_is_a_usage_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[experiment]\nvariant = \"sdm_identity\"\n[model]\nm = 8\nk = 4\n").unwrap();
        let (code, _, err) = run_capture(&["sdm-vae", "train", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("model.k"), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_a_runtime_error() {
        let (code, _, err) = run_capture(&["sdm-vae", "eval", "/nonexistent/model.ckpt", "test"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("/nonexistent/model.ckpt"));
    }

    #[test]
    fn aligned_table_columns_line_up() {
        let row = |e: &str, h| ComparisonRow {
            experiment: e.into(),
            variant: "standard".into(),
            m: "32".into(),
            k: "32".into(),
            hoyer: h,
            lsd_db: 12.5,
            si_sdr_db: -3.0,
        };
        let t = aligned_table(&[row("a", 0.1), row("longer_name", 0.25)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        let col = lines[0].find("hoyer").unwrap() + "hoyer".len();
        assert_eq!(lines[1].find("0.1000").unwrap() + 6, col);
        assert_eq!(lines[2].find("0.2500").unwrap() + 6, col);
        assert_eq!(lines[1].len(), lines[2].len());
    }
}
