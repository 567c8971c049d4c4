//! Acceptance suite. Prints one PASS/FAIL line per criterion. Exits nonzero
//! if any criterion fails, except the training-trend reproduction, which is
//! reported only.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sdm_vae::checkpoint::load_model;
use sdm_vae::cli;
use sdm_vae::config::ExperimentConfig;
use sdm_vae::corpus::{frames_of, split_by_speaker, synthetic_corpus, SplitSpec};
use sdm_vae::dictionary::{DctGrid, DctOptions, Dictionary};
use sdm_vae::metrics::{evaluate, hoyer};
use sdm_vae::model::{
    kl_diag_gauss, kl_standard_normal, update_gamma, GaussianPosterior, InputNorm, ModelSpec, PriorVariances,
    Variant, Vae,
};
use sdm_vae::signal::{istft, read_wav, sine_window, stft, write_wav, AudioClip, StftConfig, SAMPLE_RATE};
use sdm_vae::trainer::{fit, EarlyStopping, TrainConfig, Verdict};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn loss_total(vae: &Vae, s: &Array2<f64>, eps: &Array2<f64>) -> f64 {
    vae.loss(s, eps).expect("loss").total
}

fn gradient_check() -> Outcome {
    let (n, m, k, hidden, batch, h) = (64, 8, 8, 16, 4, 1e-5);
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut triples = 0;
    for variant in [Variant::Standard, Variant::SdmDct] {
        for t in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
            let mut spec = ModelSpec::new(variant, n, m, k);
            spec.hidden = hidden;
            let mut vae = spec.build(t).unwrap();
            for tensor in vae.params.tensors_mut() {
                let (r, c) = tensor.shape();
                let noise = normals(&mut rng, r, c) * 0.1;
                let mut data = tensor.data_mut();
                data += &noise;
            }
            let s = Array2::from_shape_fn((batch, n), |_| 10f64.powf(rng.random_range(-3.0..1.0)));
            let eps = normals(&mut rng, batch, vae.arch().code_dim);

            vae.params.zero_grad();
            vae.loss_backward(&s, &eps).unwrap();
            let analytic: Vec<Array2<f64>> = vae
                .params
                .tensors()
                .iter()
                .map(|t| t.grad().expect("gradient").clone())
                .collect();

            for (i, g) in analytic.iter().enumerate() {
                let mut numeric = Array2::zeros(g.dim());
                for ((r, c), slot) in numeric.indexed_iter_mut() {
                    let mut plus = vae.clone();
                    plus.params.tensors_mut()[i].data_mut()[[r, c]] += h;
                    let mut minus = vae.clone();
                    minus.params.tensors_mut()[i].data_mut()[[r, c]] -= h;
                    *slot = (loss_total(&plus, &s, &eps) - loss_total(&minus, &s, &eps)) / (2.0 * h);
                }
                let diff = (g - &numeric).mapv(|x| x * x).sum().sqrt();
                let scale = g.mapv(|x| x * x).sum().sqrt().max(numeric.mapv(|x| x * x).sum().sqrt());
                let rel = if scale > 0.0 { diff / scale } else { diff };
                worst = worst.max(rel);
            }
            triples += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{triples} triples, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (dims, samples) = (4, 1_000_000);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu = Array2::from_shape_fn((1, dims), |_| rng.random_range(-2.0..2.0));
        let sigma = Array2::from_shape_fn((1, dims), |_| rng.random_range(0.3..1.5));
        let gamma = Array2::from_shape_fn((1, dims), |_| rng.random_range(0.3..3.0));
        let post = GaussianPosterior::new(mu.clone(), sigma.clone()).unwrap();
        let exact_diag = kl_diag_gauss(&post, &PriorVariances { gamma: gamma.clone() }).unwrap();
        let exact_std = kl_standard_normal(&post);

        // E_q[log q(x) - log p(x)]; the 2π terms cancel.
        let (mut acc_diag, mut acc_std) = (0.0, 0.0);
        for _ in 0..samples {
            for j in 0..dims {
                let e: f64 = StandardNormal.sample(&mut rng);
                let (mj, sj, gj) = (mu[[0, j]], sigma[[0, j]], gamma[[0, j]]);
                let x = mj + sj * e;
                let log_q = -sj.ln() - 0.5 * e * e;
                acc_diag += log_q + 0.5 * gj.ln() + 0.5 * x * x / gj;
                acc_std += log_q + 0.5 * x * x;
            }
        }
        let mc_diag = acc_diag / samples as f64;
        let mc_std = acc_std / samples as f64;
        worst = worst
            .max((mc_diag - exact_diag).abs() / exact_diag.abs())
            .max((mc_std - exact_std).abs() / exact_std.abs());
    }
    outcome(worst < 0.01, format!("20 posteriors, worst relative gap {worst:.2e}"))
}

fn gamma_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = 6;
    let mut beaten = 0;
    let mut worst_simplified = 0.0f64;
    for _ in 0..1000 {
        let mu = Array2::from_shape_fn((1, dims), |_| rng.random_range(-3.0..3.0));
        let sigma = Array2::from_shape_fn((1, dims), |_| rng.random_range(0.05..2.0));
        let post = GaussianPosterior::new(mu.clone(), sigma.clone()).unwrap();
        let best = update_gamma(&post);
        let at_best = kl_diag_gauss(&post, &best).unwrap();
        for _ in 0..100 {
            let gamma = best.gamma.mapv(|g| g * rng.random_range(0.5..=2.0));
            if kl_diag_gauss(&post, &PriorVariances { gamma }).unwrap() < at_best {
                beaten += 1;
            }
        }
        let simplified: f64 = mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| 0.5 * (1.0 + m * m / (s * s)).ln())
            .sum();
        worst_simplified = worst_simplified.max((simplified - at_best).abs());
    }
    outcome(
        beaten == 0 && worst_simplified < 1e-10,
        format!("{beaten} of 100000 perturbations beat the update, simplified KL gap {worst_simplified:.2e}"),
    )
}

fn stft_round_trip() -> Outcome {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let samples: Vec<f64> = (0..SAMPLE_RATE as usize).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
        let back = istft(&stft(&clip, cfg).unwrap()).unwrap();
        let end = back.len().min(clip.len()) - cfg.window_len;
        for i in cfg.window_len..end {
            worst = worst.max((clip.samples[i] - back.samples[i]).abs());
        }
    }
    let w = sine_window(cfg.window_len).unwrap();
    let sums: Vec<f64> = (0..cfg.hop)
        .map(|i| (i..cfg.window_len).step_by(cfg.hop).map(|l| w[l] * w[l]).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let cola = sums.iter().map(|s| (s - mean).abs() / mean).fold(0.0, f64::max);
    outcome(
        worst < 1e-10 && cola < 1e-12,
        format!("max interior error {worst:.2e}, COLA deviation {cola:.2e}"),
    )
}

fn dictionary_contracts() -> Outcome {
    let mut worst_norm = 0.0f64;
    let mut worst_gram = 0.0f64;
    for grid in [DctGrid::HalfSample, DctGrid::Sample] {
        for m in [2, 8, 16, 32] {
            for k in [m, 2 * m, 4 * m] {
                let opts = DctOptions {
                    grid,
                    ..Default::default()
                };
                let d = Dictionary::dct_with(m, k, opts).unwrap();
                for col in d.atoms().columns() {
                    worst_norm = worst_norm.max((col.dot(&col).sqrt() - 1.0).abs());
                }
                if k == m && grid == DctGrid::HalfSample {
                    let gram = d.atoms().t().dot(d.atoms());
                    for ((i, j), g) in gram.indexed_iter() {
                        if i != j {
                            worst_gram = worst_gram.max(g.abs());
                        }
                    }
                }
            }
        }
    }
    let mut identity_exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in [1, 8, 32] {
        let d = Dictionary::identity(m).unwrap();
        for col in d.atoms().columns() {
            worst_norm = worst_norm.max((col.dot(&col).sqrt() - 1.0).abs());
        }
        let codes = normals(&mut rng, 10, m);
        identity_exact &= d.apply(&codes).unwrap() == codes;
    }
    outcome(
        worst_norm < 1e-12 && worst_gram < 1e-10 && identity_exact,
        format!("column norm error {worst_norm:.2e}, complete DCT Gram off-diagonal {worst_gram:.2e}, identity exact: {identity_exact}"),
    )
}

fn hoyer_contract() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for n in [2, 5, 64] {
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = -2.5;
        ok &= (hoyer(&one_hot).unwrap() - 1.0).abs() < 1e-12;
        ok &= hoyer(&vec![0.7; n]).unwrap().abs() < 1e-12;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let v: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let base = hoyer(&v).unwrap();
        let c: f64 = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let mut permuted = v.clone();
        permuted.reverse();
        permuted.rotate_left(rng.random_range(0..16));
        worst = worst
            .max((hoyer(&scaled).unwrap() - base).abs())
            .max((hoyer(&permuted).unwrap() - base).abs());
    }
    ok &= worst < 1e-12;
    let pair = hoyer(&[3.0, 4.0]).unwrap();
    ok &= (pair - 0.0343).abs() < 1e-4;
    notes.push(format!("invariance error {worst:.2e}, [3,4] -> {pair:.4}"));
    outcome(ok, notes.join(", "))
}

fn sparsity_trend() -> Outcome {
    let started = Instant::now();
    let clips = synthetic_corpus(11, 80, 20, 1.0).unwrap();
    let split = split_by_speaker(clips, &SplitSpec::default()).unwrap();
    let cfg = StftConfig::default();
    let train = frames_of(&split.train, cfg).unwrap();
    let val = frames_of(&split.validation, cfg).unwrap();
    let norm = InputNorm::fit(&train.power).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        patience: 20,
        max_epochs: 500,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for (variant, k) in [
        (Variant::Standard, 32),
        (Variant::SdmIdentity, 32),
        (Variant::SdmDct, 32),
        (Variant::SdmDct, 64),
    ] {
        let mut vae = ModelSpec::new(variant, cfg.n_bins(), 32, k).build(0).unwrap();
        vae.params.set_input_norm(Some(norm.clone())).unwrap();
        let fitted = fit(vae, &train.power, &val.power, &tc).unwrap();
        let report = evaluate(&fitted.model, &split.test, cfg).unwrap();
        println!(
            "    {variant} k={k}: epochs {} (best {}), hoyer {:.4}, lsd {:.3} dB",
            fitted.history.len(),
            fitted.best_epoch,
            report.hoyer_mean,
            report.lsd_mean
        );
        rows.push((report.hoyer_mean, report.lsd_mean));
    }
    let (base_hoyer, base_lsd) = rows[0];
    let sparser = rows[1..].iter().all(|&(h, _)| h > base_hoyer);
    let worst_lsd = rows[1..].iter().map(|&(_, l)| l / base_lsd - 1.0).fold(f64::MIN, f64::max);
    outcome(
        sparser && worst_lsd <= 0.10,
        format!(
            "SDM sparser than baseline: {sparser}, worst SDM LSD vs baseline {:+.1}%, {:.0}s",
            100.0 * worst_lsd,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(
        std::iter::once("sdm-vae").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8_lossy(&err).into_owned())
}

fn write_config(dir: &Path, name: &str) -> String {
    let path = dir.join(format!("{name}.toml"));
    let text = format!(
        "[experiment]\nvariant = \"sdm_dct\"\nseed = 3\noutput_dir = \"{}\"\n\n\
         [model]\nm = 8\nk = 16\nhidden = 64\n\n\
         [train]\nmax_epochs = 30\nlr = 1e-3\n\n\
         [data]\nn_clips = 20\nn_speakers = 10\nduration_s = 1.0\n",
        dir.join(name).display()
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn training_mechanics(dir: &Path) -> Outcome {
    let mut stops_exact = true;
    for patience in [2, 3, 20] {
        let mut seq: Vec<f64> = vec![5.0, 4.0, 3.5, 3.0, 3.2, 2.9];
        seq.extend(std::iter::repeat_n(2.9, 3));
        seq.extend((0..100).map(|i| 3.0 + 0.01 * i as f64));
        let mut es = EarlyStopping::new(patience);
        let stop = seq.iter().position(|&l| es.observe(l) == Verdict::Stop).map(|i| i + 1);
        stops_exact &= es.best_epoch() == 6 && stop == Some(6 + patience);
    }

    let (a, b) = (write_config(dir, "det_a"), write_config(dir, "det_b"));
    let (ca, ea) = run_cli(&["train", &a]);
    let (cb, eb) = run_cli(&["train", &b]);
    if ca != 0 || cb != 0 {
        return outcome(false, format!("train failed: {ea}{eb}"));
    }
    let log_a = fs::read(dir.join("det_a").join(cli::TRAIN_LOG_FILE)).unwrap();
    let log_b = fs::read(dir.join("det_b").join(cli::TRAIN_LOG_FILE)).unwrap();
    let identical = !log_a.is_empty() && log_a == log_b;
    outcome(
        stops_exact && identical,
        format!("stop exactly patience epochs after best: {stops_exact}, identical training logs: {identical}"),
    )
}

fn end_to_end(dir: &Path) -> Outcome {
    let config = write_config(dir, "smoke");
    let run_dir = dir.join("smoke");
    let ckpt = run_dir.join(cli::CHECKPOINT_FILE);
    let ckpt_s = ckpt.to_string_lossy().into_owned();

    let (code, err) = run_cli(&["train", &config]);
    if code != 0 {
        return outcome(false, format!("train exited {code}: {err}"));
    }
    let (code, err) = run_cli(&["eval", &ckpt_s, "test"]);
    if code != 0 {
        return outcome(false, format!("eval exited {code}: {err}"));
    }
    let eval_csv = fs::read_to_string(run_dir.join(cli::EVAL_FILE)).unwrap();
    let all: Vec<&str> = eval_csv.lines().last().unwrap_or("").split(',').collect();
    let metrics_finite = all.first() == Some(&"ALL")
        && all[2..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite));

    let cfg = ExperimentConfig::load(&config).unwrap();
    let split = split_by_speaker(cfg.load_clips().unwrap(), &cfg.split_spec()).unwrap();
    let input = dir.join("held_out.wav");
    write_wav(&input, &split.test[0].clip).unwrap();
    let output = dir.join("held_out_resynth.wav");
    let (code, err) = run_cli(&["resynth", &ckpt_s, &input.to_string_lossy(), &output.to_string_lossy()]);
    if code != 0 {
        return outcome(false, format!("resynth exited {code}: {err}"));
    }
    let playable = read_wav(&output).is_ok_and(|c| {
        c.sample_rate == SAMPLE_RATE
            && c.len() > 0
            && c.samples.iter().all(|x| x.is_finite() && x.abs() <= 1.0)
            && c.rms() > 0.0
    });

    let stft_cfg = cfg.stft_config();
    let (_, trained) = load_model(&ckpt).unwrap();
    let trained_lsd = evaluate(&trained, &split.test, stft_cfg).unwrap().lsd_mean;
    let mut untrained = cfg.model_spec().build(cfg.experiment.seed).unwrap();
    let train_frames = frames_of(&split.train, stft_cfg).unwrap();
    untrained
        .params
        .set_input_norm(Some(InputNorm::fit(&train_frames.power).unwrap()))
        .unwrap();
    let untrained_lsd = evaluate(&untrained, &split.test, stft_cfg).unwrap().lsd_mean;

    outcome(
        metrics_finite && playable && trained_lsd < untrained_lsd,
        format!(
            "finite metrics: {metrics_finite}, playable WAV: {playable}, held-out LSD {trained_lsd:.2} dB trained vs {untrained_lsd:.2} dB untrained"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // libtest flags are ignored; a bare argument filters criteria by name.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    let tmp = tempfile::tempdir().unwrap();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, bool, Check)> = vec![
        ("gradient correctness", true, Box::new(gradient_check)),
        ("KL oracle", true, Box::new(kl_oracle)),
        ("gamma optimality", true, Box::new(gamma_optimality)),
        ("STFT round trip", true, Box::new(stft_round_trip)),
        ("dictionary contracts", true, Box::new(dictionary_contracts)),
        ("Hoyer contract", true, Box::new(hoyer_contract)),
        ("sparsity trend", false, Box::new(sparsity_trend)),
        ("training mechanics", true, Box::new(|| training_mechanics(tmp.path()))),
        ("end-to-end smoke", true, Box::new(|| end_to_end(tmp.path()))),
    ];
    let criteria: Vec<_> = criteria
        .into_iter()
        .filter(|(name, _, _)| filter.as_ref().is_none_or(|f| name.contains(f.as_str())))
        .collect();
    let (mut failed, mut gating_failed) = (0, 0);
    for (name, gating, check) in &criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
            gating_failed += usize::from(*gating);
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > gating_failed {
        println!("sparsity trend is reported only and does not set the exit status");
    }
    if gating_failed > 0 {
        std::process::exit(1);
    }
}
