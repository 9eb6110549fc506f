//! Imaging through a calibrated transmission matrix with Wirtinger flow.
//!
//! Minimizes the quartic intensity loss
//! `f(x) = (1/M') Σ_m (|⟨a^m, x⟩|² − b_m)²` by gradient descent from a
//! random uniform start, clipping entries to a maximum modulus after every
//! step. Larger problems run a short warm-up on a subset of measurements
//! and restart from the modulus of its result.

use ndarray::ArrayView2;
use rand::Rng;

use crate::align::align_phase;
use crate::{CMatrix, Complex64, Error, Result};

/// Largest signal size that runs a single stage over all measurements.
pub const SINGLE_STAGE_MAX_N: usize = 1024;

/// Intensity-only imaging problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagingTask {
    pub tm: CMatrix,
    /// `b = |A x|²` as read by the camera.
    pub intensities: Vec<f64>,
    pub truth: Option<Vec<f64>>,
}

impl ImagingTask {
    pub fn new(tm: CMatrix, intensities: Vec<f64>, truth: Option<Vec<f64>>) -> Result<Self> {
        if intensities.len() != tm.nrows() {
            return Err(Error::Dimension(format!(
                "{} intensities for a TM with {} rows",
                intensities.len(),
                tm.nrows()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != tm.ncols() {
                return Err(Error::Dimension(format!(
                    "truth has length {}, TM has {} columns",
                    t.len(),
                    tm.ncols()
                )));
            }
        }
        Ok(ImagingTask {
            tm,
            intensities,
            truth,
        })
    }

    pub fn n(&self) -> usize {
        self.tm.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WFConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Rows used in stage 1; `None` uses every row.
    pub stage1_measurements: Option<usize>,
    /// Step numerator; the step is `step_scale / (mean(b) · mean‖a^m‖² / N)`.
    pub step_scale: f64,
    pub init_seed: u64,
    pub clip_modulus: f64,
}

impl WFConfig {
    /// Schedule by signal size: up to [`SINGLE_STAGE_MAX_N`] a single
    /// 500-iteration pass over all rows, otherwise 500 iterations on `4N`
    /// rows followed by 2000 on all rows.
    pub fn for_signal_len(n: usize) -> Self {
        let staged = n > SINGLE_STAGE_MAX_N;
        WFConfig {
            stage1_iters: 500,
            stage2_iters: if staged { 2000 } else { 0 },
            stage1_measurements: staged.then_some(4 * n),
            step_scale: 0.1,
            init_seed: 0,
            clip_modulus: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    /// 0 is the loss at the stage's starting point.
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WFResult {
    pub x: Vec<Complex64>,
    pub trace: Vec<LossRecord>,
}

impl WFResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }
}

fn forward(tm: ArrayView2<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    tm.rows()
        .into_iter()
        .map(|row| row.iter().zip(x).map(|(a, xi)| a * xi).sum())
        .collect()
}

fn loss_and_gradient(
    tm: ArrayView2<Complex64>,
    b: &[f64],
    x: &[Complex64],
    with_gradient: bool,
) -> (f64, Vec<Complex64>) {
    let m = tm.nrows() as f64;
    let z = forward(tm, x);
    let mut loss = 0.0;
    let mut grad = vec![Complex64::default(); if with_gradient { x.len() } else { 0 }];
    for ((row, zm), bm) in tm.rows().into_iter().zip(&z).zip(b) {
        let r = zm.norm_sqr() - bm;
        loss += r * r;
        if with_gradient {
            let w = zm * (2.0 * r / m);
            for (g, a) in grad.iter_mut().zip(row.iter()) {
                *g += a.conj() * w;
            }
        }
    }
    (loss / m, grad)
}

/// `f(x) = (1/M') Σ (|⟨a^m, x⟩|² − b_m)²` over the given rows.
pub fn loss(tm_rows: ArrayView2<Complex64>, b: &[f64], x: &[Complex64]) -> f64 {
    loss_and_gradient(tm_rows, b, x, false).0
}

/// Wirtinger gradient `∂f/∂x̄ = (2/M') Σ (|⟨a^m,x⟩|² − b_m) ⟨a^m,x⟩ conj(a^m)`.
pub fn gradient_of_loss(tm_rows: ArrayView2<Complex64>, b: &[f64], x: &[Complex64]) -> Vec<Complex64> {
    loss_and_gradient(tm_rows, b, x, true).1
}

/// Rescales entries whose modulus exceeds `modulus`, keeping their phase.
pub fn clip(x: &mut [Complex64], modulus: f64) {
    for z in x.iter_mut() {
        let r = z.norm();
        if r > modulus {
            *z *= modulus / r;
        }
    }
}

fn run_stage(
    tm: ArrayView2<Complex64>,
    b: &[f64],
    mut x: Vec<Complex64>,
    iters: usize,
    config: &WFConfig,
    stage: u8,
    trace: &mut Vec<LossRecord>,
) -> Result<Vec<Complex64>> {
    let n = tm.ncols() as f64;
    let m = tm.nrows() as f64;
    let row_power = tm.iter().map(|z| z.norm_sqr()).sum::<f64>() / m / n;
    let mean_b = b.iter().sum::<f64>() / m;
    let scale = if mean_b > 0.0 {
        mean_b
    } else {
        forward(tm, &x).iter().map(|z| z.norm_sqr()).sum::<f64>() / m
    };
    let denom = scale * row_power;
    let step = if denom > 0.0 { config.step_scale / denom } else { 0.0 };

    let (mut f, mut grad) = loss_and_gradient(tm, b, &x, true);
    trace.push(LossRecord { stage, iter: 0, loss: f });
    for it in 1..=iters {
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi -= g * step;
        }
        clip(&mut x, config.clip_modulus);
        (f, grad) = loss_and_gradient(tm, b, &x, true);
        if !f.is_finite() {
            return Err(Error::Divergence { stage, iteration: it });
        }
        trace.push(LossRecord { stage, iter: it, loss: f });
    }
    Ok(x)
}

/// Staged Wirtinger-flow reconstruction.
pub fn wf_reconstruct(task: &ImagingTask, config: &WFConfig) -> Result<WFResult> {
    let m_rows = task.tm.nrows();
    let n = task.n();
    let m1 = config.stage1_measurements.unwrap_or(m_rows);
    if m1 == 0 || m1 > m_rows {
        return Err(Error::Parameter(format!(
            "stage-1 measurements must be in 1..={m_rows}, got {m1}"
        )));
    }
    if !(config.clip_modulus > 0.0) || !(config.step_scale > 0.0) {
        return Err(Error::Parameter("step scale and clip modulus must be positive".into()));
    }
    let mut rng = crate::rng::seeded(config.init_seed);
    let x0: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen_range(0.0..=1.0), 0.0)).collect();

    let mut trace = Vec::with_capacity(config.stage1_iters + config.stage2_iters + 2);
    let stage1 = task.tm.slice(ndarray::s![..m1, ..]);
    let mut x = run_stage(stage1, &task.intensities[..m1], x0, config.stage1_iters, config, 1, &mut trace)?;
    if config.stage2_iters > 0 {
        let warm: Vec<Complex64> = x.iter().map(|z| Complex64::new(z.norm(), 0.0)).collect();
        x = run_stage(task.tm.view(), &task.intensities, warm, config.stage2_iters, config, 2, &mut trace)?;
    }
    Ok(WFResult { x, trace })
}

/// `‖e^{iφ}·x̂ − x‖ / ‖x‖` with the best global phase `φ`.
pub fn signal_relative_error(estimate: &[Complex64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "estimate has length {}, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    let t: Vec<Complex64> = truth.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if t.iter().all(|z| z.norm() == 0.0) {
        return Err(Error::ZeroReference);
    }
    Ok(align_phase(&t, estimate).residual)
}

/// Relative measurement misfit `‖|A x|² − b‖ / ‖b‖`.
pub fn measurement_residual(tm: &CMatrix, b: &[f64], x: &[Complex64]) -> f64 {
    let z = forward(tm.view(), x);
    let num = z
        .iter()
        .zip(b)
        .map(|(z, b)| (z.norm_sqr() - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opu::TransmissionMatrix;
    use ndarray::array;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn intensities(a: &CMatrix, x: &[f64]) -> Vec<f64> {
        let xc: Vec<Complex64> = x.iter().map(|&v| c(v, 0.0)).collect();
        forward(a.view(), &xc).iter().map(|z| z.norm_sqr()).collect()
    }

    #[test]
    fn gradient_vanishes_at_a_solution() {
        let a = TransmissionMatrix::sample(30, 6, 1).unwrap().into_entries();
        let x: Vec<Complex64> = (0..6).map(|i| c(i as f64 * 0.1, 0.3 - i as f64 * 0.05)).collect();
        let b: Vec<f64> = forward(a.view(), &x).iter().map(|z| z.norm_sqr()).collect();
        let g = gradient_of_loss(a.view(), &b, &x);
        assert!(g.iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn scalar_gradient_matches_hand_formula() {
        let a = array![[c(0.6, -0.8)]];
        let x = [c(1.5, 0.5)];
        let b = [3.0];
        let g = gradient_of_loss(a.view(), &b, &x);
        let expected = x[0] * 2.0 * ((a[[0, 0]] * x[0]).norm_sqr() - 3.0) * a[[0, 0]].norm_sqr();
        assert!((g[0] - expected).norm() < 1e-14);
    }

    #[test]
    fn zero_intensities_keep_zero_fixed() {
        let a = TransmissionMatrix::sample(10, 4, 2).unwrap().into_entries();
        let b = vec![0.0; 10];
        let zero = vec![c(0.0, 0.0); 4];
        assert!(gradient_of_loss(a.view(), &b, &zero).iter().all(|z| z.norm() == 0.0));
        let task = ImagingTask::new(a, b, None).unwrap();
        let cfg = WFConfig { stage1_iters: 200, ..WFConfig::for_signal_len(4) };
        let out = wf_reconstruct(&task, &cfg).unwrap();
        assert!(out.final_loss() < out.initial_loss());
    }

    #[test]
    fn scalar_problem_converges_to_modulus_two() {
        let task = ImagingTask::new(array![[c(1.0, 0.0)]], vec![4.0], None).unwrap();
        let cfg = WFConfig {
            clip_modulus: 10.0,
            stage1_iters: 200,
            ..WFConfig::for_signal_len(1)
        };
        let out = wf_reconstruct(&task, &cfg).unwrap();
        assert!((out.x[0].norm() - 2.0).abs() < 1e-9, "{}", out.x[0]);
    }

    #[test]
    fn clipping_rescales_only_large_entries() {
        let mut x = vec![c(0.3, 0.4), c(3.0, 4.0), c(-1.0, 0.0)];
        clip(&mut x, 1.0);
        assert_eq!(x[0], c(0.3, 0.4));
        assert!((x[1] - c(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(x[2], c(-1.0, 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let a = TransmissionMatrix::sample(20, 4, 3).unwrap().into_entries();
        let b = intensities(&a, &[1.0, 0.0, 1.0, 1.0]);
        let task = ImagingTask::new(a, b, None).unwrap();
        let cfg = WFConfig {
            step_scale: 1e200,
            clip_modulus: f64::MAX,
            ..WFConfig::for_signal_len(4)
        };
        assert!(matches!(wf_reconstruct(&task, &cfg), Err(Error::Divergence { stage: 1, .. })));
    }

    #[test]
    fn stage_one_rows_are_validated() {
        let a = TransmissionMatrix::sample(8, 4, 3).unwrap().into_entries();
        let task = ImagingTask::new(a, vec![1.0; 8], None).unwrap();
        let cfg = WFConfig { stage1_measurements: Some(9), ..WFConfig::for_signal_len(4) };
        assert!(matches!(wf_reconstruct(&task, &cfg), Err(Error::Parameter(_))));
        assert!(ImagingTask::new(CMatrix::zeros((3, 2)), vec![1.0; 2], None).is_err());
    }

    #[test]
    fn schedule_depends_on_signal_size() {
        let small = WFConfig::for_signal_len(1024);
        assert_eq!((small.stage1_iters, small.stage2_iters, small.stage1_measurements), (500, 0, None));
        let large = WFConfig::for_signal_len(4096);
        assert_eq!((large.stage1_iters, large.stage2_iters, large.stage1_measurements), (500, 2000, Some(16384)));
    }

    #[test]
    fn relative_error_cases() {
        let t = [1.0, 0.0, 0.5];
        let tc: Vec<Complex64> = t.iter().map(|&v| c(v, 0.0)).collect();
        assert!(signal_relative_error(&tc, &t).unwrap() < 1e-15);
        let neg: Vec<Complex64> = tc.iter().map(|z| -z).collect();
        assert!(signal_relative_error(&neg, &t).unwrap() < 1e-15);
        assert_eq!(signal_relative_error(&[c(0.0, 0.0); 3], &t).unwrap(), 1.0);
        assert!(matches!(signal_relative_error(&tc, &[0.0; 3]), Err(Error::ZeroReference)));
    }

    fn binary_truth(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::seeded(seed);
        (0..n).map(|_| r.gen_range(0..2) as f64).collect()
    }

    fn noiseless_run(n: usize, m: usize, seed: u64) -> (WFResult, f64, f64) {
        let a = TransmissionMatrix::sample(m, n, seed).unwrap().into_entries();
        let truth = binary_truth(n, seed + 1);
        let b = intensities(&a, &truth);
        let task = ImagingTask::new(a.clone(), b.clone(), Some(truth.clone())).unwrap();
        let out = wf_reconstruct(&task, &WFConfig::for_signal_len(n).with_seed(seed + 2)).unwrap();
        let resid = measurement_residual(&a, &b, &out.x);
        let err = signal_relative_error(&out.x, &truth).unwrap();
        (out, resid, err)
    }

    #[test]
    fn noiseless_baseline_at_eight_times_oversampling() {
        let (out, resid, err) = noiseless_run(64, 512, 31);
        assert!(resid < 1e-6, "{resid}");
        assert!(err < 1e-3, "{err}");
        assert!(out.final_loss() <= 1e-4 * out.initial_loss());
    }

    #[test]
    fn more_measurements_do_not_hurt() {
        let (_, _, err4) = noiseless_run(32, 4 * 32, 41);
        let (_, _, err16) = noiseless_run(32, 16 * 32, 41);
        assert!(err16 <= err4, "{err16} > {err4}");
    }

    #[test]
    fn two_stage_schedule_runs_both_stages() {
        let n = 8;
        let a = TransmissionMatrix::sample(80, n, 4).unwrap().into_entries();
        let truth = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let task = ImagingTask::new(a.clone(), intensities(&a, &truth), None).unwrap();
        let cfg = WFConfig {
            stage1_iters: 50,
            stage2_iters: 300,
            stage1_measurements: Some(4 * n),
            ..WFConfig::for_signal_len(n)
        };
        let out = wf_reconstruct(&task, &cfg).unwrap();
        assert_eq!(out.trace.iter().filter(|r| r.stage == 1).count(), 51);
        assert_eq!(out.trace.iter().filter(|r| r.stage == 2).count(), 301);
        assert!(signal_relative_error(&out.x, &truth).unwrap() < 1e-3);
    }
}
