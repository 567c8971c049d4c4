//! Fixed dictionaries mapping sparse codes `a` to latent codes `z = D a`.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictionaryKind {
    Dct,
    Identity,
}

/// An `m×k` matrix with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
    kind: DictionaryKind,
}

/// Whether the constant (`r = 0`) DCT atom is mean-subtracted too.
///
/// Subtracting its mean leaves the zero vector, which cannot be normalized,
/// so the default keeps it as `1/√m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DcAtom {
    #[default]
    Keep,
    /// Mean-subtract every atom. The constant atom then vanishes and
    /// construction fails.
    Subtract,
}

/// Sampling positions of the cosine atoms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DctGrid {
    /// `cos(π (ℓ + ½) r / k)`: orthonormal basis when `k = m`.
    #[default]
    HalfSample,
    /// `cos(π ℓ r / k)`: the K-SVD overcomplete-DCT sampling.
    Sample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DctOptions {
    pub dc: DcAtom,
    pub grid: DctGrid,
}

impl Dictionary {
    /// Overcomplete DCT with `k` atoms of length `m`: cosine atoms of
    /// frequency `r = 0..k`, mean subtracted for `r ≥ 1`, then scaled to unit
    /// norm.
    pub fn dct(m: usize, k: usize) -> Result<Self> {
        Self::dct_with(m, k, DctOptions::default())
    }

    pub fn dct_with(m: usize, k: usize, opts: DctOptions) -> Result<Self> {
        if m < 2 {
            return Err(Error::contract(format!("DCT dictionary needs m >= 2, got {m}")));
        }
        if k < 1 {
            return Err(Error::contract("DCT dictionary needs k >= 1"));
        }
        let shift = match opts.grid {
            DctGrid::HalfSample => 0.5,
            DctGrid::Sample => 0.0,
        };
        let mut atoms = Array2::zeros((m, k));
        for r in 0..k {
            let mut atom: Vec<f64> = (0..m)
                .map(|l| ((l as f64 + shift) * PI * r as f64 / k as f64).cos())
                .collect();
            if r > 0 || opts.dc == DcAtom::Subtract {
                let mean = atom.iter().sum::<f64>() / m as f64;
                atom.iter_mut().for_each(|v| *v -= mean);
            }
            let norm = atom.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::contract(format!(
                    "DCT atom {r} vanishes after mean subtraction (m={m}, k={k})"
                )));
            }
            for (l, v) in atom.into_iter().enumerate() {
                atoms[[l, r]] = v / norm;
            }
        }
        Ok(Self {
            atoms,
            kind: DictionaryKind::Dct,
        })
    }

    pub fn identity(m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::contract("identity dictionary needs m >= 1"));
        }
        Ok(Self {
            atoms: Array2::eye(m),
            kind: DictionaryKind::Identity,
        })
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    /// Latent dimension `m`.
    pub fn latent_dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms `k`.
    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    /// `z_i = D a_i` for each row of `codes` (`batch×k -> batch×m`).
    pub fn apply(&self, codes: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(codes.ncols(), codes.dim())?;
        Ok(match self.kind {
            DictionaryKind::Identity => codes.clone(),
            DictionaryKind::Dct => codes.dot(&self.atoms.t()),
        })
    }

    /// Same as [`Dictionary::apply`] on a tape. `D` enters as a constant, so
    /// gradients reach the codes only.
    pub fn apply_on(&self, tape: &mut Tape, codes: Var) -> Result<Var> {
        self.check_width(tape.shape(codes).1, tape.shape(codes))?;
        match self.kind {
            DictionaryKind::Identity => Ok(codes),
            DictionaryKind::Dct => {
                let dt = tape.constant(self.atoms.t().to_owned());
                tape.matmul(codes, dt)
            }
        }
    }

    fn check_width(&self, width: usize, shape: (usize, usize)) -> Result<()> {
        if width != self.n_atoms() {
            return Err(Error::Dimension {
                op: "dictionary apply",
                lhs: shape,
                rhs: self.atoms.dim(),
            });
        }
        Ok(())
    }
}
