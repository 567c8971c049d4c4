//! Python bindings. Matrices cross the boundary as lists of rows.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sdm_vae::checkpoint::{load_model, save_model};
use sdm_vae::config::{ExperimentConfig, GridName};
use sdm_vae::corpus;
use sdm_vae::dictionary::{DctGrid, DctOptions, Dictionary};
use sdm_vae::metrics;
use sdm_vae::model::{self, InputNorm, Variant, Vae};
use sdm_vae::signal::{self, AudioClip, StftConfig, SAMPLE_RATE};
use sdm_vae::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } | Error::SampleRate { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("rectangular"))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_grid(grid: &str) -> PyResult<DctGrid> {
    match grid {
        "half_sample" => Ok(DctGrid::HalfSample),
        "sample" => Ok(DctGrid::Sample),
        _ => Err(PyValueError::new_err(format!("unknown grid `{grid}`"))),
    }
}

/// Overcomplete DCT dictionary, `m` rows by `k` unit-norm columns.
#[pyfunction]
#[pyo3(signature = (m, k, grid = "half_sample"))]
fn dct_dictionary(m: usize, k: usize, grid: &str) -> PyResult<Vec<Vec<f64>>> {
    let opts = DctOptions {
        grid: parse_grid(grid)?,
        ..Default::default()
    };
    Ok(to_rows(Dictionary::dct_with(m, k, opts).map_err(py_err)?.atoms()))
}

#[pyfunction]
fn identity_dictionary(m: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(Dictionary::identity(m).map_err(py_err)?.atoms()))
}

/// Hoyer sparsity in `[0, 1]`; `None` for all-zero or length < 2.
#[pyfunction]
fn hoyer(v: Vec<f64>) -> Option<f64> {
    metrics::hoyer(&v)
}

#[pyfunction]
fn log_spectral_distance(s: Vec<Vec<f64>>, s_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::log_spectral_distance(&to_array(s)?, &to_array(s_hat)?).map_err(py_err)
}

#[pyfunction]
fn si_sdr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<Option<f64>> {
    metrics::si_sdr(&reference, &estimate).map_err(py_err)
}

/// Returns `(power, phase)`, each `frames × bins`.
#[pyfunction]
#[pyo3(signature = (samples, window = 1024, hop = 256))]
fn stft(samples: Vec<f64>, window: usize, hop: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = StftConfig::new(window, hop).map_err(py_err)?;
    let clip = AudioClip::new(samples, SAMPLE_RATE).map_err(py_err)?;
    let f = signal::stft(&clip, cfg).map_err(py_err)?;
    Ok((to_rows(&f.power), to_rows(&f.phase)))
}

/// Overlap-add resynthesis from power and phase.
#[pyfunction]
#[pyo3(signature = (power, phase, window = 1024, hop = 256))]
fn istft(power: Vec<Vec<f64>>, phase: Vec<Vec<f64>>, window: usize, hop: usize) -> PyResult<Vec<f64>> {
    let cfg = StftConfig::new(window, hop).map_err(py_err)?;
    let clip = signal::resynthesize(&to_array(power)?, &to_array(phase)?, cfg, SAMPLE_RATE).map_err(py_err)?;
    Ok(clip.samples)
}

#[pyfunction]
fn synth_speech_like(seed: u64, n_clips: usize, duration_s: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(corpus::synth_speech_like(seed, n_clips, duration_s)
        .map_err(py_err)?
        .into_iter()
        .map(|c| c.samples)
        .collect())
}

#[pyfunction]
fn read_wav(path: &str) -> PyResult<Vec<f64>> {
    Ok(signal::read_wav(path).map_err(py_err)?.samples)
}

#[pyfunction]
fn write_wav(path: &str, samples: Vec<f64>) -> PyResult<()> {
    let clip = AudioClip::new(samples, SAMPLE_RATE).map_err(py_err)?;
    signal::write_wav(path, &clip).map_err(py_err)
}

/// A trained or freshly initialized model together with its config.
#[pyclass(name = "Model")]
struct PyModel {
    config: ExperimentConfig,
    vae: Vae,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model.
    #[new]
    #[pyo3(signature = (variant, m, k, hidden = 128, seed = 0, dct_grid = "half_sample"))]
    fn new(variant: &str, m: usize, k: usize, hidden: usize, seed: u64, dct_grid: &str) -> PyResult<Self> {
        let mut config = ExperimentConfig::default();
        config.experiment.variant = variant.parse::<Variant>().map_err(py_err)?;
        config.experiment.seed = seed;
        config.model.m = m;
        config.model.k = k;
        config.model.hidden = hidden;
        config.model.dct_grid = match parse_grid(dct_grid)? {
            DctGrid::HalfSample => GridName::HalfSample,
            DctGrid::Sample => GridName::Sample,
        };
        config.validate().map_err(py_err)?;
        let vae = config.model_spec().build(seed).map_err(py_err)?;
        Ok(Self { config, vae })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (config, vae) = load_model(path).map_err(py_err)?;
        Ok(Self { config, vae })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.config, &self.vae).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.config.experiment.variant.to_string()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.vae.arch().latent_dim
    }

    #[getter]
    fn code_dim(&self) -> usize {
        self.vae.arch().code_dim
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.vae.arch().n_bins
    }

    /// Fits the per-bin input standardization on `power` frames.
    fn fit_input_norm(&mut self, power: Vec<Vec<f64>>) -> PyResult<()> {
        let norm = InputNorm::fit(&to_array(power)?).map_err(py_err)?;
        self.vae.params.set_input_norm(Some(norm)).map_err(py_err)
    }

    /// Posterior `(mu, sigma)` of the code for each power frame.
    fn encode(&self, power: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let post = model::encode(&self.vae.params, &to_array(power)?).map_err(py_err)?;
        Ok((to_rows(&post.mu), to_rows(&post.sigma)))
    }

    /// Power estimate for each latent row `z`.
    fn decode(&self, latent: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&model::decode(&self.vae.params, &to_array(latent)?).map_err(py_err)?))
    }

    /// `(code_mean, power)` from the posterior mean, no sampling.
    fn reconstruct(&self, power: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let rec = self.vae.reconstruct(&to_array(power)?).map_err(py_err)?;
        Ok((to_rows(&rec.code_mean), to_rows(&rec.power)))
    }

    /// Per-frame `(total, recon, kl)` with fixed noise `eps`.
    fn loss(&self, power: Vec<Vec<f64>>, eps: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
        let l = self.vae.loss(&to_array(power)?, &to_array(eps)?).map_err(py_err)?;
        Ok((l.total, l.recon, l.kl))
    }

    /// Aggregate metrics over a directory of `<speaker>_<utt>.wav` files.
    fn evaluate_wav_dir(&self, path: &str) -> PyResult<(f64, f64, f64, f64)> {
        let clips = corpus::read_wav_dir(path).map_err(py_err)?;
        let r = metrics::evaluate(&self.vae, &clips, self.config.stft_config()).map_err(py_err)?;
        Ok((r.hoyer_mean, r.hoyer_std, r.lsd_mean, r.sisdr_mean))
    }

    fn __repr__(&self) -> String {
        let a = self.vae.arch();
        format!(
            "Model(variant={}, m={}, code_dim={}, hidden={})",
            self.config.experiment.variant, a.latent_dim, a.code_dim, a.hidden
        )
    }
}

#[pymodule]
fn sdmvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add_function(wrap_pyfunction!(dct_dictionary, m)?)?;
    m.add_function(wrap_pyfunction!(identity_dictionary, m)?)?;
    m.add_function(wrap_pyfunction!(hoyer, m)?)?;
    m.add_function(wrap_pyfunction!(log_spectral_distance, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(synth_speech_like, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
