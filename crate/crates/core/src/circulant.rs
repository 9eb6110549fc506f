//! Circulant blocks and their FFT diagonalization.
//!
//! A circulant `C` with first column `g` is diagonalized by the DFT, with
//! eigenvalues `fft(g)`. For two invertible circulants of equal size and any
//! `α + β = 1`, `[α C₁⁻¹; β C₂⁻¹]` is a right inverse of `[C₁, C₂]`, which is
//! what lets the probe system be inverted with a handful of FFTs per row.

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::{Fft, FftPlanner};

use crate::probes::{ProbeSet, MIN_EIGENVALUE};
use crate::{Complex64, Error, Result};

/// Forward and inverse plans of one length.
#[derive(Clone)]
pub struct FftPair {
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
    len: usize,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        FftPair {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }

    /// Unnormalized DFT of a real sequence.
    pub fn dft_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Normalized inverse DFT.
    pub fn idft(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut buf = x.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
        buf
    }
}

/// Dense circulant with first column `g`: `C[i][j] = g[(i − j) mod h]`.
pub fn circulant_matrix(g: &[f64]) -> DMatrix<f64> {
    let h = g.len();
    DMatrix::from_fn(h, h, |i, j| g[(i + h - j) % h])
}

/// Dense complex circulant with first column `g`.
pub fn circulant_matrix_complex(g: &[Complex64]) -> DMatrix<Complex64> {
    let h = g.len();
    DMatrix::from_fn(h, h, |i, j| g[(i + h - j) % h])
}

/// Eigenvalues of the two probe blocks plus the right-inverse weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantSpectrum {
    pub lambda_a: Vec<Complex64>,
    pub lambda_b: Vec<Complex64>,
    pub alpha: f64,
    pub beta: f64,
}

fn check_invertible(lambda: &[Complex64]) -> Result<()> {
    match lambda
        .iter()
        .enumerate()
        .find(|(_, l)| l.norm() < MIN_EIGENVALUE)
    {
        Some((index, l)) => Err(Error::SingularSpectrum {
            index,
            magnitude: l.norm(),
        }),
        None => Ok(()),
    }
}

impl CirculantSpectrum {
    /// Spectrum of the blocks generated by `gen_a` and `gen_b`, with
    /// `β = 1 − α`.
    pub fn from_generators(gen_a: &[f64], gen_b: &[f64], alpha: f64) -> Result<Self> {
        if gen_a.len() != gen_b.len() || gen_a.is_empty() {
            return Err(Error::Dimension(format!(
                "generators must be nonempty and equal in length, got {} and {}",
                gen_a.len(),
                gen_b.len()
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::Parameter(format!("alpha must be finite, got {alpha}")));
        }
        let fft = FftPair::new(gen_a.len());
        let lambda_a = fft.dft_real(gen_a);
        let lambda_b = fft.dft_real(gen_b);
        check_invertible(&lambda_a)?;
        check_invertible(&lambda_b)?;
        Ok(CirculantSpectrum {
            lambda_a,
            lambda_b,
            alpha,
            beta: 1.0 - alpha,
        })
    }

    pub fn from_probes(probes: &ProbeSet, alpha: f64) -> Result<Self> {
        let to_f = |g: &[u8]| g.iter().map(|&v| v as f64).collect::<Vec<_>>();
        Self::from_generators(&to_f(probes.gen_a()), &to_f(probes.gen_b()), alpha)
    }

    /// Block size `K/2`.
    pub fn len(&self) -> usize {
        self.lambda_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_a.is_empty()
    }

    /// Frequency-domain weights that map row spectra of `Y_A`, `Y_B` to the
    /// row spectrum of the recovered TM row.
    ///
    /// A row vector times a circulant picks up the eigenvalue at the
    /// mirrored frequency, hence `λ[(h − k) mod h]`.
    pub fn row_weights(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        let h = self.len();
        let w = |lambda: &[Complex64], coef: f64| -> Vec<Complex64> {
            (0..h)
                .map(|k| coef / lambda[(h - k) % h] / h as f64)
                .collect()
        };
        (w(&self.lambda_a, self.alpha), w(&self.lambda_b, self.beta))
    }

    /// First column of `C_A⁻¹ = F* Λ_A⁻¹ F`.
    pub fn inverse_generator_a(&self) -> Vec<Complex64> {
        inverse_generator(&self.lambda_a)
    }

    /// First column of `C_B⁻¹`.
    pub fn inverse_generator_b(&self) -> Vec<Complex64> {
        inverse_generator(&self.lambda_b)
    }
}

fn inverse_generator(lambda: &[Complex64]) -> Vec<Complex64> {
    let inv: Vec<Complex64> = lambda.iter().map(|l| l.inv()).collect();
    FftPair::new(lambda.len()).idft(&inv)
}

/// Applies the FFT right inverse to one row: given `y_a = a·C_A` and
/// `y_b = a·C_B`, writes `α·y_a·C_A⁻¹ + β·y_b·C_B⁻¹` into `out`.
///
/// `weights` comes from [`CirculantSpectrum::row_weights`]; `work` and
/// `scratch` are caller-owned buffers of length `h` and
/// [`FftPair::scratch_len`].
pub fn apply_row_inverse(
    fft: &FftPair,
    weights: &(Vec<Complex64>, Vec<Complex64>),
    y_a: &[Complex64],
    y_b: &[Complex64],
    out: &mut [Complex64],
    work: &mut [Complex64],
    scratch: &mut [Complex64],
) {
    out.copy_from_slice(y_a);
    fft.forward.process_with_scratch(out, scratch);
    work.copy_from_slice(y_b);
    fft.forward.process_with_scratch(work, scratch);
    for ((o, w), (wa, wb)) in out
        .iter_mut()
        .zip(work.iter())
        .zip(weights.0.iter().zip(&weights.1))
    {
        *o = *o * wa + w * wb;
    }
    fft.inverse.process_with_scratch(out, scratch);
}

/// Materializes `[C₁, C₂] · [α C₁⁻¹; β C₂⁻¹]` and returns its largest
/// entrywise deviation from the identity.
///
/// `C₁`, `C₂` are built from the generators directly; their inverses come
/// from the spectra.
pub fn right_inverse_check(spectra: &CirculantSpectrum, gen_a: &[f64], gen_b: &[f64]) -> f64 {
    let h = spectra.len();
    let to_c = |m: DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
    let c1 = to_c(circulant_matrix(gen_a));
    let c2 = to_c(circulant_matrix(gen_b));
    let c1_inv = circulant_matrix_complex(&spectra.inverse_generator_a());
    let c2_inv = circulant_matrix_complex(&spectra.inverse_generator_b());
    let product = c1 * c1_inv * Complex64::new(spectra.alpha, 0.0)
        + c2 * c2_inv * Complex64::new(spectra.beta, 0.0);
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..h {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((product[(i, j)] - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}
