//! Measurement phase retrieval by multilateration in the complex plane.
//!
//! Expanding `|y − r_s|² = |r_s|² + |y|² − 2⟨r_s, y⟩` turns localization of
//! `y` against `S` known anchors into a linear system with a fixed `S × 3`
//! matrix per TM row. Every probe of that row is a right-hand side, so one
//! pseudoinverse per row recovers the complex values of all probes.

use std::ops::Range;

use nalgebra::DMatrix;
use ndarray::{s, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::geometry::AnchorConstellation;
use crate::{CMatrix, Complex64, Error, RMatrix, Result};

/// Rows whose `σ_min / σ_max` falls below this are treated as colinear.
pub const COLINEAR_RATIO: f64 = 1e-8;
/// Relative singular value cutoff for the pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Guard in the residual denominator.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Camera readouts needed for one calibration pass, grouped by role.
///
/// Anchor indices are zero-based and exclude the origin anchor `S−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityBundle {
    /// `M × K × (S−1)`: `|⟨a^m, v_s − ξ_k⟩|²`.
    pub probe_to_anchor: Array3<f64>,
    /// `M × K`: `|⟨a^m, ξ_k⟩|²`.
    pub probe_to_origin: RMatrix,
    /// `M × (S−1)`: `|⟨a^m, v_s⟩|²`.
    pub anchor_mags: RMatrix,
    /// `M × (S−1)(S−2)/2`: `|⟨a^m, v_q − v_s⟩|²` for `q < s`, see [`IntensityBundle::pair_index`].
    pub anchor_pairs: RMatrix,
}

impl IntensityBundle {
    pub fn zeros(rows: usize, k: usize, s_count: usize) -> Self {
        assert!(s_count >= 2, "bundle needs at least one anchor besides the origin");
        let s1 = s_count - 1;
        IntensityBundle {
            probe_to_anchor: Array3::zeros((rows, k, s1)),
            probe_to_origin: RMatrix::zeros((rows, k)),
            anchor_mags: RMatrix::zeros((rows, s1)),
            anchor_pairs: RMatrix::zeros((rows, s1 * (s1 - 1) / 2)),
        }
    }

    /// Column of pair `(q, s)`, `q < s < S−1`, in lexicographic order.
    pub fn pair_index(q: usize, s: usize, s_count: usize) -> usize {
        debug_assert!(q < s && s < s_count - 1);
        let s1 = s_count - 1;
        q * (s1 - 1) - q * q.saturating_sub(1) / 2 + (s - q - 1)
    }

    pub fn rows(&self) -> usize {
        self.probe_to_origin.nrows()
    }

    pub fn k(&self) -> usize {
        self.probe_to_origin.ncols()
    }

    /// Anchor count including the origin.
    pub fn s_count(&self) -> usize {
        self.anchor_mags.ncols() + 1
    }

    /// Checks that the parts agree in shape and hold nonnegative values.
    pub fn validate(&self) -> Result<()> {
        let (m, k, s1) = self.probe_to_anchor.dim();
        let ok = self.probe_to_origin.dim() == (m, k)
            && self.anchor_mags.dim() == (m, s1)
            && self.anchor_pairs.dim() == (m, s1 * s1.saturating_sub(1) / 2);
        if !ok {
            return Err(Error::IncompleteBundle(format!(
                "inconsistent bundle shapes for M = {m}, K = {k}, S = {}",
                s1 + 1
            )));
        }
        let all = self
            .probe_to_anchor
            .iter()
            .chain(self.probe_to_origin.iter())
            .chain(self.anchor_mags.iter())
            .chain(self.anchor_pairs.iter());
        for v in all {
            if !(*v >= 0.0) {
                return Err(Error::Validation(format!("intensity {v} is not nonnegative")));
            }
        }
        Ok(())
    }

    /// Largest readout in the bundle.
    pub fn max_value(&self) -> f64 {
        self.probe_to_anchor
            .iter()
            .chain(self.probe_to_origin.iter())
            .chain(self.anchor_mags.iter())
            .chain(self.anchor_pairs.iter())
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Applies `f` to every value of local row `m` in a fixed order: anchor
    /// magnitudes, anchor pairs, probe-to-origin, probe-to-anchor (probe major).
    pub fn map_row_inplace<F: FnMut(f64) -> f64>(&mut self, m: usize, mut f: F) {
        self.anchor_mags.row_mut(m).mapv_inplace(&mut f);
        self.anchor_pairs.row_mut(m).mapv_inplace(&mut f);
        self.probe_to_origin.row_mut(m).mapv_inplace(&mut f);
        self.probe_to_anchor
            .slice_mut(s![m, .., ..])
            .mapv_inplace(&mut f);
    }

    /// Copy of a contiguous block of rows.
    pub fn slice_rows(&self, rows: Range<usize>) -> IntensityBundle {
        IntensityBundle {
            probe_to_anchor: self.probe_to_anchor.slice(s![rows.clone(), .., ..]).to_owned(),
            probe_to_origin: self.probe_to_origin.slice(s![rows.clone(), ..]).to_owned(),
            anchor_mags: self.anchor_mags.slice(s![rows.clone(), ..]).to_owned(),
            anchor_pairs: self.anchor_pairs.slice(s![rows, ..]).to_owned(),
        }
    }

    /// Largest absolute elementwise difference, or `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &IntensityBundle) -> Option<f64> {
        if self.probe_to_anchor.dim() != other.probe_to_anchor.dim()
            || self.anchor_pairs.dim() != other.anchor_pairs.dim()
        {
            return None;
        }
        let d = |a: f64, b: f64| (a - b).abs();
        let parts = [
            self.probe_to_anchor
                .iter()
                .zip(other.probe_to_anchor.iter())
                .map(|(a, b)| d(*a, *b))
                .fold(0.0, f64::max),
            self.probe_to_origin
                .iter()
                .zip(other.probe_to_origin.iter())
                .map(|(a, b)| d(*a, *b))
                .fold(0.0, f64::max),
            self.anchor_mags
                .iter()
                .zip(other.anchor_mags.iter())
                .map(|(a, b)| d(*a, *b))
                .fold(0.0, f64::max),
            self.anchor_pairs
                .iter()
                .zip(other.anchor_pairs.iter())
                .map(|(a, b)| d(*a, *b))
                .fold(0.0, f64::max),
        ];
        Some(parts.into_iter().fold(0.0, f64::max))
    }
}

/// Recovered complex calibration measurements `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasedMeasurements {
    /// `M × K`; excluded rows are zero.
    pub y: CMatrix,
    /// `M × K` consistency score between `|ŷ|²` and the solved squared norm.
    pub residual: RMatrix,
    pub excluded_rows: Vec<usize>,
}

impl PhasedMeasurements {
    pub fn rows(&self) -> usize {
        self.y.nrows()
    }

    /// Median residual of each row (`NaN` for excluded rows).
    pub fn row_median_residuals(&self) -> Vec<f64> {
        self.residual
            .rows()
            .into_iter()
            .enumerate()
            .map(|(m, r)| {
                if self.excluded_rows.binary_search(&m).is_ok() {
                    f64::NAN
                } else {
                    median(r.iter().cloned().collect())
                }
            })
            .collect()
    }

    /// Median over all residuals of included rows.
    pub fn median_residual(&self) -> f64 {
        let vals: Vec<f64> = self
            .residual
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(m, _)| self.excluded_rows.binary_search(m).is_err())
            .flat_map(|(_, r)| r.to_vec())
            .collect();
        median(vals)
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Multilateration matrix of one row and its pseudoinverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    /// `S × 3`, rows `[−2·Re r_s, −2·Im r_s, 1]`.
    pub matrix: DMatrix<f64>,
    /// `3 × S`.
    pub pinv: DMatrix<f64>,
}

/// Builds the row system from localized anchors (origin included).
pub fn build_system(anchors: &[Complex64]) -> Result<LinearSystem> {
    let s = anchors.len();
    if s < 3 {
        return Err(Error::Parameter(format!("need at least 3 anchors, got {s}")));
    }
    let matrix = DMatrix::from_fn(s, 3, |i, j| match j {
        0 => -2.0 * anchors[i].re,
        1 => -2.0 * anchors[i].im,
        _ => 1.0,
    });
    let svd = matrix.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio < COLINEAR_RATIO {
        return Err(Error::ColinearAnchors { ratio });
    }
    let pinv = svd
        .pseudo_inverse(PINV_CUTOFF * smax)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    Ok(LinearSystem { matrix, pinv })
}

/// Solves one row for all probes.
///
/// `probe_to_anchor` is `K × (S−1)` squared distances to the non-origin
/// anchors, `probe_to_origin` the `K` squared magnitudes and
/// `anchor_sq_norms` the `S−1` squared anchor magnitudes.
pub fn recover_row(
    pinv: &DMatrix<f64>,
    probe_to_anchor: ArrayView2<f64>,
    probe_to_origin: ArrayView1<f64>,
    anchor_sq_norms: &[f64],
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let s = pinv.ncols();
    let (k, s1) = probe_to_anchor.dim();
    if pinv.nrows() != 3 || s1 + 1 != s || anchor_sq_norms.len() != s1 || probe_to_origin.len() != k {
        return Err(Error::Dimension(format!(
            "row system is {}x{}, distances are {k}x{s1}, {} anchor norms, {} origin distances",
            pinv.nrows(),
            s,
            anchor_sq_norms.len(),
            probe_to_origin.len()
        )));
    }
    let mut values = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for kk in 0..k {
        let mut w = [0.0f64; 3];
        for (c, wc) in w.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (sidx, &r2) in anchor_sq_norms.iter().enumerate() {
                acc += pinv[(c, sidx)] * (probe_to_anchor[[kk, sidx]] - r2);
            }
            acc += pinv[(c, s1)] * probe_to_origin[kk];
            *wc = acc;
        }
        let y = Complex64::new(w[0], w[1]);
        values.push(y);
        residuals.push((y.norm_sqr() - w[2]).abs() / w[2].max(RESIDUAL_EPS));
    }
    Ok((values, residuals))
}

/// Recovers `Y` row by row. Rows flagged degenerate by the localization, or
/// whose anchors fail the colinearity test here, are zeroed and listed in
/// `excluded_rows`.
pub fn recover_all_phases(
    bundle: &IntensityBundle,
    constellation: &AnchorConstellation,
) -> Result<PhasedMeasurements> {
    bundle.validate()?;
    if constellation.rows() != bundle.rows() || constellation.s_count() != bundle.s_count() {
        return Err(Error::Dimension(format!(
            "bundle is {} rows with S = {}, constellation is {} rows with S = {}",
            bundle.rows(),
            bundle.s_count(),
            constellation.rows(),
            constellation.s_count()
        )));
    }
    let m_rows = bundle.rows();
    let k = bundle.k();

    let solved: Vec<Option<(Vec<Complex64>, Vec<f64>)>> = (0..m_rows)
        .into_par_iter()
        .map(|m| -> Result<_> {
            if constellation.degenerate[m] {
                return Ok(None);
            }
            let anchors: Vec<Complex64> = constellation.positions.row(m).to_vec();
            let system = match build_system(&anchors) {
                Ok(sys) => sys,
                Err(Error::ColinearAnchors { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let norms = bundle.anchor_mags.row(m).to_vec();
            recover_row(
                &system.pinv,
                bundle.probe_to_anchor.slice(s![m, .., ..]),
                bundle.probe_to_origin.row(m),
                &norms,
            )
            .map(Some)
        })
        .collect::<Result<_>>()?;

    let mut y = CMatrix::zeros((m_rows, k));
    let mut residual = RMatrix::zeros((m_rows, k));
    let mut excluded_rows = Vec::new();
    for (m, row) in solved.into_iter().enumerate() {
        match row {
            Some((vals, res)) => {
                y.row_mut(m).iter_mut().zip(vals).for_each(|(d, v)| *d = v);
                residual.row_mut(m).iter_mut().zip(res).for_each(|(d, v)| *d = v);
            }
            None => excluded_rows.push(m),
        }
    }
    if m_rows > 0 && excluded_rows.len() == m_rows {
        return Err(Error::AllRowsDegenerate { rows: m_rows });
    }
    Ok(PhasedMeasurements {
        y,
        residual,
        excluded_rows,
    })
}
