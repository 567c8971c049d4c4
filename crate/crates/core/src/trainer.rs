//! Mini-batch training: per-batch γ update, reparameterized sampling, one Adam
//! step on the negative ELBO, early stopping on the validation loss.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{LossValue, Vae};

/// Stream of the seeded generator used for shuffling and noise draws.
/// Parameter initialization uses stream 0.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of tensors that carry moment estimates.
    pub fn n_slots(&self) -> usize {
        self.first.len()
    }

    pub fn moment_shapes(&self) -> Vec<(usize, usize)> {
        self.first.iter().map(|m| m.dim()).collect()
    }

    /// Bias-corrected Adam update of every tensor, then clears the gradients.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::contract(format!(
                "adam step: parameter {i} has no gradient (backward not run)"
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.moment_shapes() != params.iter().map(Tensor::shape).collect::<Vec<_>>() {
            return Err(Error::contract("adam step: parameter set changed between steps"));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").clone();
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(&g)
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p.data_mut())
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            patience: 20,
            max_epochs: 500,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to lower the best loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        self.epoch += 1;
        // Any strict decrease counts; NaN never does.
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            Verdict::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss, 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValue,
    pub val: LossValue,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Model from the epoch with the lowest validation loss.
    pub model: Vae,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// One pass over `frames` in shuffled mini-batches. Returns the per-frame
/// average loss.
pub fn train_epoch(
    vae: &mut Vae,
    opt: &mut AdamState,
    frames: &Array2<f64>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<LossValue> {
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::Input("training set has no frames".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let code_dim = vae.arch().code_dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut acc = LossValue {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
    };
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let batch = frames.select(Axis(0), idx);
        let eps = standard_normal(rng, idx.len(), code_dim);
        let loss = vae.loss_backward(&batch, &eps)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                batch: b,
                loss: loss.total,
                recon: loss.recon,
                kl: loss.kl,
            });
        }
        opt.step(vae.params.tensors_mut())?;
        let w = idx.len() as f64;
        acc.total += loss.total * w;
        acc.recon += loss.recon * w;
        acc.kl += loss.kl * w;
    }
    let n = n as f64;
    Ok(LossValue {
        total: acc.total / n,
        recon: acc.recon / n,
        kl: acc.kl / n,
    })
}

/// Per-frame loss over `frames` with the noise fixed at zero, so the decoder
/// sees the posterior mean and the value is deterministic.
pub fn evaluate_loss(vae: &Vae, frames: &Array2<f64>, batch_size: usize) -> Result<LossValue> {
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::Input("validation set has no frames".into()));
    }
    let code_dim = vae.arch().code_dim;
    let mut acc = (0.0, 0.0, 0.0);
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let batch = frames.slice(ndarray::s![start..end, ..]).to_owned();
        let loss = vae.loss(&batch, &Array2::zeros((end - start, code_dim)))?;
        let w = (end - start) as f64;
        acc.0 += loss.total * w;
        acc.1 += loss.recon * w;
        acc.2 += loss.kl * w;
    }
    let n = n as f64;
    Ok(LossValue {
        total: acc.0 / n,
        recon: acc.1 / n,
        kl: acc.2 / n,
    })
}

pub fn fit(vae: Vae, train: &Array2<f64>, val: &Array2<f64>, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(vae, train, val, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    mut vae: Vae,
    train: &Array2<f64>,
    val: &Array2<f64>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.nrows() == 0 || val.nrows() == 0 {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut opt = AdamState::new(cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = vae.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let train_loss = train_epoch(&mut vae, &mut opt, train, cfg.batch_size, &mut rng).map_err(
            |e| match e {
                Error::Diverged {
                    batch,
                    loss,
                    recon,
                    kl,
                    ..
                } => Error::Diverged {
                    epoch,
                    batch,
                    loss,
                    recon,
                    kl,
                },
                other => other,
            },
        )?;
        let val_loss = evaluate_loss(&vae, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.push(record);
        on_epoch(&record);
        match stopper.observe(val_loss.total) {
            Verdict::Improved => best = vae.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitResult {
        model: best,
        history,
        best_epoch: stopper.best_epoch(),
        best_val: stopper.best(),
        stopped_early,
    })
}
