//! Simulated optical processing unit.
//!
//! A fixed complex transmission matrix is applied to binary DMD patterns and
//! a camera records squared magnitudes, optionally with additive noise and
//! fixed-point quantization.

use std::ops::Range;
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::multilateration::IntensityBundle;
use crate::probes::{AnchorSet, ProbeSet};
use crate::{rng, BinaryMatrix, CMatrix, Complex64, Error, RMatrix, Result};

const STREAM_MEASURE: u64 = 0x6d65_6173;
const STREAM_CALIBRATION: u64 = 0x6361_6c69;

/// Complex `M × N` matrix mapping input light fields to output fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMatrix {
    entries: CMatrix,
}

impl TransmissionMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "transmission matrix must be nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(TransmissionMatrix { entries })
    }

    /// Samples iid standard complex Gaussian entries: real and imaginary
    /// parts are independent with variance 1/2 each.
    pub fn sample(m_rows: usize, n_cols: usize, seed: u64) -> Result<Self> {
        if m_rows == 0 || n_cols == 0 {
            return Err(Error::Dimension(format!(
                "transmission matrix needs m_rows >= 1 and n_cols >= 1, got {m_rows}x{n_cols}"
            )));
        }
        let mut rng = rng::seeded(seed);
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let entries = Array2::from_shape_simple_fn((m_rows, n_cols), || {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        });
        Ok(TransmissionMatrix { entries })
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn m_rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Camera readout model applied to raw intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    /// Bit depth; 0 disables quantization.
    pub bits: u8,
    pub gain: f64,
    /// Standard deviation of additive Gaussian noise on intensities.
    pub noise_sigma: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel::ideal()
    }
}

impl CameraModel {
    pub fn new(bits: u8, gain: f64, noise_sigma: f64) -> Result<Self> {
        let cam = CameraModel {
            bits,
            gain,
            noise_sigma,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Exact squared magnitudes: no gain, noise or quantization.
    pub fn ideal() -> Self {
        CameraModel {
            bits: 0,
            gain: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits > 16 {
            return Err(Error::Validation(format!(
                "camera bits must be in 0..=16, got {}",
                self.bits
            )));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::Validation(format!(
                "camera gain must be positive, got {}",
                self.gain
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Validation(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Largest representable level, `2^bits − 1`, or `None` without quantization.
    pub fn max_level(&self) -> Option<f64> {
        (self.bits > 0).then(|| ((1u32 << self.bits) - 1) as f64)
    }

    /// Same camera with the gain set so that `peak_intensity` reads as the
    /// top level. Without quantization the gain is left unchanged.
    pub fn with_gain_for_peak(self, peak_intensity: f64) -> Self {
        match self.max_level() {
            Some(top) if peak_intensity > 0.0 && peak_intensity.is_finite() => CameraModel {
                gain: top / peak_intensity,
                ..self
            },
            _ => self,
        }
    }

    /// Clips to `[0, 2^bits − 1]` and rounds half up. Identity when `bits == 0`
    /// apart from clipping at zero.
    pub fn quantize(&self, value: f64) -> f64 {
        let v = value.max(0.0);
        match self.max_level() {
            Some(top) => (v.min(top) + 0.5).floor(),
            None => v,
        }
    }

    /// Full readout of one raw intensity; `rng` supplies the noise draw.
    pub fn read<R: Rng>(&self, intensity: f64, rng: &mut R) -> f64 {
        let mut v = self.gain * intensity;
        if self.noise_sigma > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            v += self.noise_sigma * n;
        }
        self.quantize(v)
    }
}

/// Scattering medium plus camera. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SimulatedOPU {
    tm: TransmissionMatrix,
    camera: CameraModel,
    seed: u64,
}

/// Samples a simulator with an iid standard complex Gaussian transmission matrix.
pub fn new_opu(m_rows: usize, n_cols: usize, seed: u64, camera: CameraModel) -> Result<SimulatedOPU> {
    camera.validate()?;
    Ok(SimulatedOPU {
        tm: TransmissionMatrix::sample(m_rows, n_cols, seed)?,
        camera,
        seed,
    })
}

/// Simulator over a caller-provided transmission matrix.
pub fn inject_tm(entries: CMatrix, camera: CameraModel) -> Result<SimulatedOPU> {
    camera.validate()?;
    Ok(SimulatedOPU {
        tm: TransmissionMatrix::new(entries)?,
        camera,
        seed: 0,
    })
}

fn check_binary(inputs: ArrayView2<u8>) -> Result<()> {
    if let Some(((i, j), v)) = inputs.indexed_iter().find(|(_, &v)| v > 1) {
        return Err(Error::Validation(format!(
            "DMD inputs must be binary; entry ({i}, {j}) is {v}"
        )));
    }
    Ok(())
}

impl SimulatedOPU {
    pub fn tm(&self) -> &TransmissionMatrix {
        &self.tm
    }

    pub fn camera(&self) -> CameraModel {
        self.camera
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn m_rows(&self) -> usize {
        self.tm.m_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.tm.n_cols()
    }

    /// Same medium seen through a different camera.
    pub fn with_camera(&self, camera: CameraModel) -> Result<SimulatedOPU> {
        camera.validate()?;
        Ok(SimulatedOPU {
            tm: self.tm.clone(),
            camera,
            seed: self.seed,
        })
    }

    fn check_inputs(&self, inputs: ArrayView2<u8>) -> Result<()> {
        if inputs.nrows() != self.n_cols() {
            return Err(Error::Dimension(format!(
                "input columns have length {}, simulator expects {}",
                inputs.nrows(),
                self.n_cols()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::Dimension("at least one input column is required".into()));
        }
        check_binary(inputs)
    }

    /// Output fields `A · inputs` (no camera) for binary inputs.
    pub fn fields(&self, inputs: &BinaryMatrix) -> Result<CMatrix> {
        self.check_inputs(inputs.view())?;
        Ok(self.fields_rows(inputs.view(), 0..self.m_rows()))
    }

    fn fields_rows(&self, inputs: ArrayView2<u8>, rows: Range<usize>) -> CMatrix {
        let supports: Vec<Vec<usize>> = inputs
            .columns()
            .into_iter()
            .map(|c| c.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect())
            .collect();
        let a = self.tm.entries();
        let mut out = Array2::zeros((rows.len(), supports.len()));
        for (r, m) in rows.enumerate() {
            let row = a.row(m);
            let row = row.as_slice().expect("row-major transmission matrix");
            for (b, supp) in supports.iter().enumerate() {
                out[[r, b]] = supp.iter().map(|&i| row[i]).sum();
            }
        }
        out
    }

    /// Camera readout of `|A · inputs|²` for binary inputs, `M × B`.
    pub fn measure(&self, inputs: &BinaryMatrix) -> Result<RMatrix> {
        let fields = self.fields(inputs)?;
        let mut out = fields.mapv(|z| z.norm_sqr());
        for (m, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut rng = rng::keyed(self.seed, STREAM_MEASURE, m as u64);
            row.mapv_inplace(|v| self.camera.read(v, &mut rng));
        }
        Ok(out)
    }

    /// Fields of every probe column restricted to `rows`, `rows × K`.
    ///
    /// Uses the circulant structure of the probe blocks: each row of the
    /// result is a circular cross-correlation computed with FFTs.
    pub fn probe_fields(&self, probes: &ProbeSet, rows: Range<usize>) -> Result<CMatrix> {
        if probes.n() != self.n_cols() {
            return Err(Error::Dimension(format!(
                "probe set has N = {}, simulator has N = {}",
                probes.n(),
                self.n_cols()
            )));
        }
        let h = probes.half_k();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(h);
        let inv = planner.plan_fft_inverse(h);
        // Row vector times a circulant with first column g: the spectrum of g
        // enters conjugated (g is real).
        let spectrum = |g: &[u8]| -> Vec<Complex64> {
            let mut buf: Vec<Complex64> =
                g.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
            fwd.process(&mut buf);
            buf.iter().map(|z| z.conj() / h as f64).collect()
        };
        let spec_a = spectrum(probes.gen_a());
        let spec_b = spectrum(probes.gen_b());
        let a = self.tm.entries();
        let nz = probes.nonzero_rows();
        let mut out = Array2::zeros((rows.len(), 2 * h));
        let mut scratch = vec![Complex64::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        let mut base = vec![Complex64::default(); h];
        let mut work = vec![Complex64::default(); h];
        for (r, m) in rows.enumerate() {
            for (b, &i) in base.iter_mut().zip(nz) {
                *b = a[[m, i]];
            }
            fwd.process_with_scratch(&mut base, &mut scratch);
            for (block, spec) in [(0usize, &spec_a), (1, &spec_b)] {
                for ((w, b), s) in work.iter_mut().zip(&base).zip(spec.iter()) {
                    *w = b * s;
                }
                inv.process_with_scratch(&mut work, &mut scratch);
                out.slice_mut(s![r, block * h..(block + 1) * h])
                    .iter_mut()
                    .zip(&work)
                    .for_each(|(o, w)| *o = *w);
            }
        }
        Ok(out)
    }

    /// Fields of the nonzero anchors `v_1 … v_{S−1}` restricted to `rows`.
    pub fn anchor_fields(&self, anchors: &AnchorSet, rows: Range<usize>) -> Result<CMatrix> {
        let nonzero = anchors.anchors().slice(s![.., ..anchors.s_count() - 1]);
        self.check_inputs(nonzero)?;
        Ok(self.fields_rows(nonzero, rows))
    }

    /// Raw squared magnitudes of the full calibration plan for `rows`, before
    /// the camera. Differences of patterns are measured through the
    /// difference of their fields, which the linear medium makes exact.
    pub fn calibration_intensities(
        &self,
        probes: &ProbeSet,
        anchors: &AnchorSet,
        rows: Range<usize>,
    ) -> Result<IntensityBundle> {
        let y = self.probe_fields(probes, rows.clone())?;
        let r = self.anchor_fields(anchors, rows.clone())?;
        let k = probes.k();
        let s_count = anchors.s_count();
        let mut bundle = IntensityBundle::zeros(rows.len(), k, s_count);
        for m in 0..rows.len() {
            for q in 0..s_count - 1 {
                bundle.anchor_mags[[m, q]] = r[[m, q]].norm_sqr();
                for s in q + 1..s_count - 1 {
                    let p = IntensityBundle::pair_index(q, s, s_count);
                    bundle.anchor_pairs[[m, p]] = (r[[m, q]] - r[[m, s]]).norm_sqr();
                }
            }
            for kk in 0..k {
                let yk = y[[m, kk]];
                bundle.probe_to_origin[[m, kk]] = yk.norm_sqr();
                for s in 0..s_count - 1 {
                    bundle.probe_to_anchor[[m, kk, s]] = (r[[m, s]] - yk).norm_sqr();
                }
            }
        }
        Ok(bundle)
    }

    /// Camera readout of the calibration plan for `rows`.
    ///
    /// `stream` separates noise draws between probe sets. Noise for a row
    /// depends only on `(seed, stream, row)`, so batching rows differently
    /// gives identical results.
    pub fn measure_calibration(
        &self,
        probes: &ProbeSet,
        anchors: &AnchorSet,
        rows: Range<usize>,
        stream: u64,
    ) -> Result<IntensityBundle> {
        let mut bundle = self.calibration_intensities(probes, anchors, rows.clone())?;
        for (local, m) in rows.enumerate() {
            let mut rng = rng::keyed(self.seed, STREAM_CALIBRATION ^ stream, m as u64);
            bundle.map_row_inplace(local, |v| self.camera.read(v, &mut rng));
        }
        Ok(bundle)
    }
}
