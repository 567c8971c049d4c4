//! Encoder, decoder, latent priors and loss assembly.
//!
//! Both networks are single-hidden-layer `tanh` MLPs. The encoder maps
//! `log(s + 1e-8)` to the mean and log-variance of a diagonal Gaussian over
//! the code; the decoder maps a latent vector to the log-variance of a
//! zero-mean circular complex Gaussian over each STFT bin, whose variance is
//! the power-spectrogram estimate.
//!
//! Three model variants share this machinery:
//!
//! * `standard`: codes are the latents `z`, prior `N(0, I)`.
//! * `sdm_dct` / `sdm_identity`: codes `a` are mapped through a fixed
//!   dictionary, `z = D a`, with prior `N(0, diag(γ))` where `γ = μ² + σ²` is
//!   recomputed from the posterior for every mini-batch and held constant
//!   during the gradient step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dictionary::{Dictionary, DctOptions};
use crate::error::{Error, Result};

/// Offset added to power before the encoder's log.
pub const INPUT_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    SdmDct,
    SdmIdentity,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Standard, Variant::SdmDct, Variant::SdmIdentity];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::SdmDct => "sdm_dct",
            Variant::SdmIdentity => "sdm_identity",
        }
    }

    pub fn is_sdm(self) -> bool {
        !matches!(self, Variant::Standard)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config("variant", format!("unknown variant `{s}` (standard, sdm_dct, sdm_identity)"))
            })
    }
}

/// Layer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Frequency bins per frame.
    pub n_bins: usize,
    pub hidden: usize,
    /// Dimension `m` of `z`.
    pub latent_dim: usize,
    /// Dimension of the encoded code: `k` for dictionary models, `m` otherwise.
    pub code_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_bins", self.n_bins),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("code_dim", self.code_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w_mu",
    "encoder.b_mu",
    "encoder.w_logvar",
    "encoder.b_logvar",
    "decoder.v1",
    "decoder.c1",
    "decoder.v_logvar",
    "decoder.c_logvar",
];

/// Encoder and decoder weights. Weight matrices are stored `out×in`, biases
/// as `1×out` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: [Tensor; 10],
    input_norm: Option<InputNorm>,
}

/// Checkpoint names of the [`InputNorm`] rows.
pub const INPUT_NORM_NAMES: [&str; 2] = ["input.mean", "input.inv_std"];

/// Fixed per-bin standardization of the encoder's log-power input,
/// `(log(s + 1e-8) - mean) * inv_std`. Not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Array2<f64>,
    pub inv_std: Array2<f64>,
}

impl InputNorm {
    /// Per-bin mean and inverse standard deviation of `log(s + 1e-8)` over
    /// the rows of `frames`. Standard deviations are floored at `1e-3`.
    pub fn fit(frames: &Array2<f64>) -> Result<Self> {
        check_power(frames, "InputNorm::fit")?;
        if frames.nrows() == 0 {
            return Err(Error::Input("cannot fit input statistics on zero frames".into()));
        }
        let logs = frames.mapv(|v| (v + INPUT_FLOOR).ln());
        let mean = logs.mean_axis(Axis(0)).expect("non-empty");
        let std = logs.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.insert_axis(Axis(0)),
            inv_std: std.mapv(|s| 1.0 / s.max(1e-3)).insert_axis(Axis(0)),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.mean.ncols()
    }

    fn validate(&self, n_bins: usize) -> Result<()> {
        for (name, a) in INPUT_NORM_NAMES.iter().zip([&self.mean, &self.inv_std]) {
            if a.dim() != (1, n_bins) {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: (1, n_bins),
                    found: a.dim(),
                });
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("`{name}` has non-finite entries")));
            }
        }
        Ok(())
    }

    fn apply(&self, x: &mut Array2<f64>) {
        *x -= &self.mean;
        *x *= &self.inv_std;
    }
}

impl ModelParams {
    /// Expected shape of each named tensor, in [`PARAM_NAMES`] order.
    pub fn shapes(arch: &Architecture) -> [(usize, usize); 10] {
        let Architecture {
            n_bins: n,
            hidden: h,
            latent_dim: m,
            code_dim: c,
        } = *arch;
        [
            (h, n),
            (1, h),
            (c, h),
            (1, c),
            (c, h),
            (1, c),
            (h, m),
            (1, h),
            (n, h),
            (1, n),
        ]
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let tensors = Self::shapes(&arch).map(|(rows, cols)| {
            if rows == 1 {
                Tensor::param(Array2::zeros((rows, cols)))
            } else {
                let bound = 1.0 / (cols as f64).sqrt();
                Tensor::param(Array2::from_shape_fn((rows, cols), |_| {
                    rng.random_range(-bound..bound)
                }))
            }
        });
        Ok(Self {
            arch,
            tensors,
            input_norm: None,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = Self::shapes(&arch).map(|shape| Tensor::param(Array2::zeros(shape)));
        Ok(Self {
            arch,
            tensors,
            input_norm: None,
        })
    }

    /// Rebuilds parameters from named arrays, checking every shape.
    pub fn from_named(arch: Architecture, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        arch.validate()?;
        let mut slots: [Option<Array2<f64>>; 10] = Default::default();
        let mut norm: [Option<Array2<f64>>; 2] = Default::default();
        for (name, data) in named {
            if let Some(i) = INPUT_NORM_NAMES.iter().position(|n| *n == name) {
                norm[i] = Some(data);
                continue;
            }
            let idx = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            slots[idx] = Some(data);
        }
        let shapes = Self::shapes(&arch);
        let mut tensors = Vec::with_capacity(10);
        for (i, slot) in slots.into_iter().enumerate() {
            let data =
                slot.ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", PARAM_NAMES[i])))?;
            if data.dim() != shapes[i] {
                return Err(Error::ShapeMismatch {
                    name: PARAM_NAMES[i].to_string(),
                    expected: shapes[i],
                    found: data.dim(),
                });
            }
            tensors.push(Tensor::param(data));
        }
        let tensors: [Tensor; 10] = tensors.try_into().expect("ten tensors");
        let mut params = Self {
            arch,
            tensors,
            input_norm: None,
        };
        match norm {
            [Some(mean), Some(inv_std)] => params.set_input_norm(Some(InputNorm { mean, inv_std }))?,
            [None, None] => {}
            _ => return Err(Error::Checkpoint("input statistics are incomplete".into())),
        }
        Ok(params)
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            n.validate(self.arch.n_bins)?;
        }
        self.input_norm = norm;
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor; 10] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor; 10] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.each_ref().map(|t| tape.leaf(t)))
    }
}

/// Parameter handles on a tape, in [`PARAM_NAMES`] order.
struct Bound([Var; 10]);

impl Bound {
    fn w1(&self) -> (Var, Var) {
        (self.0[0], self.0[1])
    }
    fn mu(&self) -> (Var, Var) {
        (self.0[2], self.0[3])
    }
    fn logvar(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn v1(&self) -> (Var, Var) {
        (self.0[6], self.0[7])
    }
    fn out(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
}

/// `x·Wᵀ + b` with `W` stored `out×in`.
fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let wt = tape.transpose(w);
    let y = tape.matmul(x, wt)?;
    tape.add_row(y, b)
}

fn ensure_finite(tape: &Tape, v: Var, layer: &'static str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer })
    }
}

fn check_power(s: &Array2<f64>, op: &'static str) -> Result<()> {
    if let Some(((row, col), &value)) = s.indexed_iter().find(|(_, &x)| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain { op, row, col, value });
    }
    Ok(())
}

struct EncoderVars {
    mu: Var,
    logvar: Var,
}

fn encode_on(tape: &mut Tape, p: &Bound, params: &ModelParams, s: &Array2<f64>) -> Result<EncoderVars> {
    let arch = params.arch();
    check_power(s, "encode")?;
    if s.ncols() != arch.n_bins {
        return Err(Error::Dimension {
            op: "encode",
            lhs: s.dim(),
            rhs: (s.nrows(), arch.n_bins),
        });
    }
    let mut input = s.mapv(|v| (v + INPUT_FLOOR).ln());
    if let Some(norm) = params.input_norm() {
        norm.apply(&mut input);
    }
    let x = tape.constant(input);
    let pre = linear(tape, x, p.w1())?;
    let h = tape.tanh(pre);
    ensure_finite(tape, h, "encoder.hidden")?;
    let mu = linear(tape, h, p.mu())?;
    ensure_finite(tape, mu, "encoder.mu")?;
    let logvar = linear(tape, h, p.logvar())?;
    ensure_finite(tape, logvar, "encoder.logvar")?;
    Ok(EncoderVars { mu, logvar })
}

/// Returns the log-variance `log ŝ` of the output distribution.
fn decode_on(tape: &mut Tape, p: &Bound, arch: &Architecture, z: Var) -> Result<Var> {
    let (rows, cols) = tape.shape(z);
    if cols != arch.latent_dim {
        return Err(Error::Dimension {
            op: "decode",
            lhs: (rows, cols),
            rhs: (rows, arch.latent_dim),
        });
    }
    let pre = linear(tape, z, p.v1())?;
    let g = tape.tanh(pre);
    ensure_finite(tape, g, "decoder.hidden")?;
    let logvar = linear(tape, g, p.out())?;
    ensure_finite(tape, logvar, "decoder.logvar")?;
    Ok(logvar)
}

/// Diagonal Gaussian `q(code | s)`, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::Dimension {
                op: "posterior",
                lhs: mu.dim(),
                rhs: sigma.dim(),
            });
        }
        if let Some(((row, col), &value)) = sigma.indexed_iter().find(|(_, &s)| !(s > 0.0)) {
            return Err(Error::Domain {
                op: "posterior sigma",
                row,
                col,
                value,
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mu.dim()
    }
}

/// Per-frame prior variances `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorVariances {
    pub gamma: Array2<f64>,
}

/// Runs the encoder.
pub fn encode(params: &ModelParams, s: &Array2<f64>) -> Result<GaussianPosterior> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let enc = encode_on(&mut tape, &p, params, s)?;
    let sigma = tape.value(enc.logvar).mapv(|lv| (0.5 * lv).exp());
    GaussianPosterior::new(tape.value(enc.mu).clone(), sigma)
}

/// `mu + sigma ⊙ eps`.
pub fn reparameterize(post: &GaussianPosterior, eps: &Array2<f64>) -> Result<Array2<f64>> {
    if eps.dim() != post.dim() {
        return Err(Error::Dimension {
            op: "reparameterize",
            lhs: post.dim(),
            rhs: eps.dim(),
        });
    }
    Ok(Zip::from(&post.mu)
        .and(&post.sigma)
        .and(eps)
        .map_collect(|&m, &s, &e| m + s * e))
}

/// Runs the decoder, returning the power estimate `ŝ` (strictly positive).
pub fn decode(params: &ModelParams, z: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let logvar = decode_on(&mut tape, &p, params.arch(), zv)?;
    let var = tape.value(logvar).mapv(f64::exp);
    if var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Numeric { layer: "decoder.variance" });
    }
    Ok(var)
}

/// `-Σ [log var + s / var]`: the complex-Gaussian log-likelihood of power
/// frames `s`, without additive constants.
pub fn recon_loglik(s: &Array2<f64>, var: &Array2<f64>) -> Result<f64> {
    if s.dim() != var.dim() {
        return Err(Error::Dimension {
            op: "recon_loglik",
            lhs: s.dim(),
            rhs: var.dim(),
        });
    }
    check_power(s, "recon_loglik")?;
    if let Some(((row, col), &value)) = var.indexed_iter().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "recon_loglik",
            row,
            col,
            value,
        });
    }
    Ok(-Zip::from(s)
        .and(var)
        .fold(0.0, |acc, &s, &v| acc + v.ln() + s / v))
}

/// `KL(N(μ, σ²) ‖ N(0, γ))`, summed over every entry.
pub fn kl_diag_gauss(post: &GaussianPosterior, gamma: &PriorVariances) -> Result<f64> {
    if gamma.gamma.dim() != post.dim() {
        return Err(Error::Dimension {
            op: "kl_diag_gauss",
            lhs: post.dim(),
            rhs: gamma.gamma.dim(),
        });
    }
    if let Some(((row, col), &value)) = gamma.gamma.indexed_iter().find(|(_, &g)| !(g > 0.0)) {
        return Err(Error::Domain {
            op: "kl_diag_gauss",
            row,
            col,
            value,
        });
    }
    Ok(0.5
        * Zip::from(&post.mu)
            .and(&post.sigma)
            .and(&gamma.gamma)
            .fold(0.0, |acc, &m, &s, &g| {
                let s2 = s * s;
                acc + (g / s2).ln() + (s2 + m * m) / g - 1.0
            }))
}

/// `KL(N(μ, σ²) ‖ N(0, I))`, summed over every entry.
pub fn kl_standard_normal(post: &GaussianPosterior) -> f64 {
    0.5 * Zip::from(&post.mu)
        .and(&post.sigma)
        .fold(0.0, |acc, &m, &s| {
            let s2 = s * s;
            acc + s2 + m * m - 1.0 - s2.ln()
        })
}

/// Closed-form minimizer of [`kl_diag_gauss`] over `γ`: `γ = μ² + σ²`.
pub fn update_gamma(post: &GaussianPosterior) -> PriorVariances {
    PriorVariances {
        gamma: Zip::from(&post.mu)
            .and(&post.sigma)
            .map_collect(|&m, &s| m * m + s * s),
    }
}

/// Prior over the encoded code.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentPrior {
    /// `z ~ N(0, I)`, the code is `z` itself.
    StandardNormal,
    /// `a ~ N(0, diag(γ))`, `z = D a`.
    Dictionary(Dictionary),
}

/// Loss of one mini-batch, normalized per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    /// `recon + kl`.
    pub total: f64,
    /// Negative reconstruction log-likelihood per frame.
    pub recon: f64,
    /// KL term per frame.
    pub kl: f64,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.recon.is_finite() && self.kl.is_finite()
    }
}

struct LossVars {
    total: Var,
    recon: Var,
    kl: Var,
}

/// Deterministic analysis of a batch of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// Posterior mean of the code (`a` for dictionary models, `z` otherwise).
    pub code_mean: Array2<f64>,
    /// Latent fed to the decoder.
    pub latent: Array2<f64>,
    /// Decoded power estimate `ŝ`.
    pub power: Array2<f64>,
}

/// Everything needed to build a freshly initialized model of one variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub n_bins: usize,
    pub hidden: usize,
    /// Latent dimension `m`.
    pub m: usize,
    /// Dictionary size `k`; ignored by the standard VAE.
    pub k: usize,
    pub dct: DctOptions,
}

impl ModelSpec {
    pub fn new(variant: Variant, n_bins: usize, m: usize, k: usize) -> Self {
        Self {
            variant,
            n_bins,
            hidden: 128,
            m,
            k,
            dct: DctOptions::default(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_bins: self.n_bins,
            hidden: self.hidden,
            latent_dim: self.m,
            code_dim: if self.variant == Variant::Standard { self.m } else { self.k },
        }
    }

    pub fn prior(&self) -> Result<LatentPrior> {
        Ok(match self.variant {
            Variant::Standard => LatentPrior::StandardNormal,
            Variant::SdmDct => LatentPrior::Dictionary(Dictionary::dct_with(self.m, self.k, self.dct)?),
            Variant::SdmIdentity => {
                if self.k != self.m {
                    return Err(Error::config(
                        "k",
                        format!("identity dictionary needs k == m, got k={} m={}", self.k, self.m),
                    ));
                }
                LatentPrior::Dictionary(Dictionary::identity(self.m)?)
            }
        })
    }

    /// Initializes weights from `seed`.
    pub fn build(&self, seed: u64) -> Result<Vae> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Vae::new(ModelParams::init(self.architecture(), &mut rng)?, self.prior()?)
    }
}

/// A VAE: parameters plus the latent prior they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub params: ModelParams,
    pub prior: LatentPrior,
}

impl Vae {
    pub fn new(params: ModelParams, prior: LatentPrior) -> Result<Self> {
        let arch = *params.arch();
        match &prior {
            LatentPrior::StandardNormal if arch.code_dim != arch.latent_dim => {
                return Err(Error::config(
                    "k",
                    format!(
                        "standard VAE needs code_dim == latent_dim, got {} vs {}",
                        arch.code_dim, arch.latent_dim
                    ),
                ));
            }
            LatentPrior::Dictionary(d)
                if d.latent_dim() != arch.latent_dim || d.n_atoms() != arch.code_dim =>
            {
                return Err(Error::config(
                    "k",
                    format!(
                        "dictionary is {}x{} but the model expects {}x{}",
                        d.latent_dim(),
                        d.n_atoms(),
                        arch.latent_dim,
                        arch.code_dim
                    ),
                ));
            }
            _ => {}
        }
        Ok(Self { params, prior })
    }

    pub fn arch(&self) -> &Architecture {
        self.params.arch()
    }

    fn latent_on(&self, tape: &mut Tape, code: Var) -> Result<Var> {
        match &self.prior {
            LatentPrior::StandardNormal => Ok(code),
            LatentPrior::Dictionary(d) => d.apply_on(tape, code),
        }
    }

    fn loss_on(&self, tape: &mut Tape, p: &Bound, s: &Array2<f64>, eps: &Array2<f64>) -> Result<LossVars> {
        let arch = self.params.arch();
        let batch = s.nrows();
        if batch == 0 {
            return Err(Error::Input("empty mini-batch".into()));
        }
        if eps.dim() != (batch, arch.code_dim) {
            return Err(Error::Dimension {
                op: "reparameterize",
                lhs: (batch, arch.code_dim),
                rhs: eps.dim(),
            });
        }
        let enc = encode_on(tape, p, &self.params, s)?;
        let half_lv = tape.scale(enc.logvar, 0.5);
        let sigma = tape.exp(half_lv);
        let eps_v = tape.constant(eps.clone());
        let noise = tape.mul(sigma, eps_v)?;
        let code = tape.add(enc.mu, noise)?;
        let z = self.latent_on(tape, code)?;
        let out_lv = decode_on(tape, p, arch, z)?;

        // -log p(s|z) = Σ log ŝ + s / ŝ, evaluated through log ŝ.
        let s_v = tape.constant(s.clone());
        let neg_lv = tape.neg(out_lv);
        let inv_var = tape.exp(neg_lv);
        let ratio = tape.mul(s_v, inv_var)?;
        let per_bin = tape.add(out_lv, ratio)?;
        let recon = tape.sum(per_bin);

        let var = tape.exp(enc.logvar);
        let mu2 = tape.square(enc.mu);
        let second_moment = tape.add(var, mu2)?;
        let kl_terms = match self.prior {
            LatentPrior::StandardNormal => {
                // σ² + μ² - 1 - log σ²
                let t = tape.sub(second_moment, enc.logvar)?;
                tape.shift(t, -1.0)
            }
            LatentPrior::Dictionary(_) => {
                // γ = μ² + σ² is a constant of the Φ step.
                let gamma = tape.detach(second_moment);
                let log_gamma = tape.log(gamma)?;
                let t = tape.sub(log_gamma, enc.logvar)?;
                let q = tape.div(second_moment, gamma)?;
                let t = tape.add(t, q)?;
                tape.shift(t, -1.0)
            }
        };
        let kl_sum = tape.sum(kl_terms);
        let kl = tape.scale(kl_sum, 0.5);

        let both = tape.add(recon, kl)?;
        let total = tape.scale(both, 1.0 / batch as f64);
        Ok(LossVars { total, recon, kl })
    }

    fn loss_value(tape: &Tape, vars: &LossVars, batch: usize) -> LossValue {
        let b = batch as f64;
        LossValue {
            total: tape.item(vars.total),
            recon: tape.item(vars.recon) / b,
            kl: tape.item(vars.kl) / b,
        }
    }

    /// Single-sample loss estimate with fixed noise `eps` (`batch×code_dim`).
    pub fn loss(&self, s: &Array2<f64>, eps: &Array2<f64>) -> Result<LossValue> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let vars = self.loss_on(&mut tape, &p, s, eps)?;
        Ok(Self::loss_value(&tape, &vars, s.nrows()))
    }

    /// Like [`Vae::loss`], additionally accumulating `∂loss/∂Φ` into the
    /// parameter tensors.
    pub fn loss_backward(&mut self, s: &Array2<f64>, eps: &Array2<f64>) -> Result<LossValue> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let vars = self.loss_on(&mut tape, &p, s, eps)?;
        let value = Self::loss_value(&tape, &vars, s.nrows());
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(vars.total)?;
        for (tensor, var) in self.params.tensors.iter_mut().zip(p.0) {
            let g = tape.grad(var).expect("parameters always receive a gradient");
            tensor.accumulate_grad(g)?;
        }
        Ok(value)
    }

    /// Encodes, takes the posterior mean, maps it through the dictionary and
    /// decodes. No sampling.
    pub fn reconstruct(&self, s: &Array2<f64>) -> Result<Reconstruction> {
        let post = encode(&self.params, s)?;
        let latent = match &self.prior {
            LatentPrior::StandardNormal => post.mu.clone(),
            LatentPrior::Dictionary(d) => d.apply(&post.mu)?,
        };
        let power = decode(&self.params, &latent)?;
        Ok(Reconstruction {
            code_mean: post.mu,
            latent,
            power,
        })
    }
}

/// Negative single-sample ELBO of a dictionary model, per frame.
pub fn loss_sdm(params: &ModelParams, dict: &Dictionary, s: &Array2<f64>, eps: &Array2<f64>) -> Result<LossValue> {
    Vae::new(params.clone(), LatentPrior::Dictionary(dict.clone()))?.loss(s, eps)
}

/// Negative single-sample ELBO of the standard VAE, per frame.
pub fn loss_standard_vae(params: &ModelParams, s: &Array2<f64>, eps: &Array2<f64>) -> Result<LossValue> {
    Vae::new(params.clone(), LatentPrior::StandardNormal)?.loss(s, eps)
}
