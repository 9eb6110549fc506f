//! Per-row anchor localization by classical multidimensional scaling.
//!
//! For TM row `m` the anchor fields `r_{s,m}` are points in the complex
//! plane. The camera gives their pairwise squared distances; double-centering
//! that matrix yields a Gram matrix whose two leading eigenpairs place the
//! anchors up to a rotation or reflection about the origin anchor.

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;

use crate::multilateration::IntensityBundle;
use crate::{CMatrix, Complex64, Error, Result};

/// Relative threshold below which the second Gram eigenvalue marks a row as
/// colinear.
pub const COLINEAR_EPS: f64 = 1e-6;

/// `S × S` squared Euclidean distance matrix for one TM row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDistanceMatrix {
    d: Array2<f64>,
}

impl AnchorDistanceMatrix {
    /// Checks symmetry, the zero diagonal and nonnegativity.
    pub fn new(d: Array2<f64>) -> Result<Self> {
        let s = d.nrows();
        if d.ncols() != s {
            return Err(Error::Dimension(format!("distance matrix is {}x{}", s, d.ncols())));
        }
        for q in 0..s {
            if d[[q, q]] != 0.0 {
                return Err(Error::Validation(format!("nonzero diagonal at {q}")));
            }
            for t in q + 1..s {
                let v = d[[q, t]];
                if !(v >= 0.0) || v != d[[t, q]] {
                    return Err(Error::Validation(format!(
                        "distance ({q}, {t}) must be symmetric and nonnegative"
                    )));
                }
            }
        }
        Ok(AnchorDistanceMatrix { d })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.d
    }

    pub fn s_count(&self) -> usize {
        self.d.nrows()
    }

    pub fn max(&self) -> f64 {
        self.d.iter().cloned().fold(0.0, f64::max)
    }
}

/// One distance matrix per TM row, filled from the anchor readouts.
/// Distances to the origin anchor are the anchor magnitudes themselves.
pub fn build_distance_matrices(bundle: &IntensityBundle) -> Result<Vec<AnchorDistanceMatrix>> {
    let s_count = bundle.s_count();
    let s1 = s_count - 1;
    let pairs = s1 * (s1 - 1) / 2;
    if bundle.anchor_pairs.ncols() != pairs {
        return Err(Error::IncompleteBundle(format!(
            "expected {pairs} anchor pairs for S = {s_count}, found {}",
            bundle.anchor_pairs.ncols()
        )));
    }
    if bundle.anchor_pairs.nrows() != bundle.rows() {
        return Err(Error::IncompleteBundle("anchor pair rows do not match".into()));
    }
    (0..bundle.rows())
        .map(|m| {
            let mut d = Array2::zeros((s_count, s_count));
            for q in 0..s1 {
                let mag = bundle.anchor_mags[[m, q]];
                d[[q, s1]] = mag;
                d[[s1, q]] = mag;
                for s in q + 1..s1 {
                    let v = bundle.anchor_pairs[[m, IntensityBundle::pair_index(q, s, s_count)]];
                    d[[q, s]] = v;
                    d[[s, q]] = v;
                }
            }
            AnchorDistanceMatrix::new(d)
        })
        .collect()
}

/// Localized anchors for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConstellation {
    /// `M × S`; column `S−1` is zero.
    pub positions: CMatrix,
    /// `λ₃/λ₂` per row; `+∞` when `λ₂ = 0`.
    pub quality: Vec<f64>,
    /// Rows whose anchors are numerically colinear.
    pub degenerate: Vec<bool>,
}

impl AnchorConstellation {
    pub fn rows(&self) -> usize {
        self.positions.nrows()
    }

    pub fn s_count(&self) -> usize {
        self.positions.ncols()
    }

    pub fn degenerate_rows(&self) -> Vec<usize> {
        self.degenerate
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(m, _)| m)
            .collect()
    }
}

/// MDS result for a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLocalization {
    pub positions: Vec<Complex64>,
    /// Gram eigenvalues, nonincreasing.
    pub eigenvalues: Vec<f64>,
    pub quality: f64,
    pub degenerate: bool,
}

/// `G = −½ J D J` with `J = I − (1/S)·11ᵀ`.
pub fn gram_matrix(d: &AnchorDistanceMatrix) -> DMatrix<f64> {
    let s = d.s_count();
    let m = d.matrix();
    let row_mean: Vec<f64> = (0..s).map(|i| m.row(i).sum() / s as f64).collect();
    let total = row_mean.iter().sum::<f64>() / s as f64;
    DMatrix::from_fn(s, s, |i, j| -0.5 * (m[[i, j]] - row_mean[i] - row_mean[j] + total))
}

/// Classical MDS in the plane, translated so the last anchor sits at 0.
pub fn localize_row(d: &AnchorDistanceMatrix) -> Result<RowLocalization> {
    let s = d.s_count();
    if s < 3 {
        return Err(Error::Parameter(format!("need at least 3 anchors, got {s}")));
    }
    let eig = gram_matrix(d).symmetric_eigen();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let l1 = eigenvalues[0].max(0.0);
    let l2 = eigenvalues[1].max(0.0);
    let u1 = eig.eigenvectors.column(order[0]);
    let u2 = eig.eigenvectors.column(order[1]);
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    let mut positions: Vec<Complex64> =
        (0..s).map(|i| Complex64::new(s1 * u1[i], s2 * u2[i])).collect();
    let origin = positions[s - 1];
    positions.iter_mut().for_each(|p| *p -= origin);

    let degenerate = l1 <= 0.0 || l2 <= COLINEAR_EPS * l1;
    let quality = if l2 <= 0.0 {
        f64::INFINITY
    } else if s == 3 {
        0.0
    } else {
        eigenvalues[2].max(0.0) / l2
    };
    Ok(RowLocalization {
        positions,
        eigenvalues,
        quality,
        degenerate,
    })
}

/// Localizes every row independently (in parallel).
pub fn localize_anchors(dists: &[AnchorDistanceMatrix]) -> Result<AnchorConstellation> {
    let s_count = match dists.first() {
        Some(d) => d.s_count(),
        None => return Err(Error::Dimension("no rows to localize".into())),
    };
    if dists.iter().any(|d| d.s_count() != s_count) {
        return Err(Error::Dimension("distance matrices differ in size".into()));
    }
    let rows: Vec<RowLocalization> = dists.par_iter().map(localize_row).collect::<Result<_>>()?;
    let mut positions = CMatrix::zeros((rows.len(), s_count));
    let mut quality = Vec::with_capacity(rows.len());
    let mut degenerate = Vec::with_capacity(rows.len());
    for (m, row) in rows.into_iter().enumerate() {
        positions
            .row_mut(m)
            .iter_mut()
            .zip(&row.positions)
            .for_each(|(dst, src)| *dst = *src);
        quality.push(row.quality);
        degenerate.push(row.degenerate);
    }
    Ok(AnchorConstellation {
        positions,
        quality,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    fn edm(points: &[Complex64]) -> AnchorDistanceMatrix {
        let s = points.len();
        AnchorDistanceMatrix::new(Array2::from_shape_fn((s, s), |(i, j)| {
            (points[i] - points[j]).norm_sqr()
        }))
        .unwrap()
    }

    /// Orthogonal Procrustes in R² about the origin (rotation or reflection),
    /// via the SVD of the 2×2 cross-covariance.
    fn procrustes_residual(truth: &[Complex64], est: &[Complex64]) -> f64 {
        let mut h = Matrix2::zeros();
        for (t, e) in truth.iter().zip(est) {
            h += nalgebra::Vector2::new(e.re, e.im) * nalgebra::Vector2::new(t.re, t.im).transpose();
        }
        let svd = h.svd(true, true);
        let r = (svd.u.unwrap() * svd.v_t.unwrap()).transpose();
        truth
            .iter()
            .zip(est)
            .map(|(t, e)| {
                let v = r * nalgebra::Vector2::new(e.re, e.im);
                (v.x - t.re).powi(2) + (v.y - t.im).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn recovers_planted_triangle() {
        let plant = [Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0), Complex64::new(0.0, 0.0)];
        let d = edm(&plant);
        assert_eq!(
            d.matrix(),
            &ndarray::array![[0.0, 25.0, 9.0], [25.0, 0.0, 16.0], [9.0, 16.0, 0.0]]
        );
        let loc = localize_row(&d).unwrap();
        assert!(!loc.degenerate);
        assert_eq!(loc.positions[2], Complex64::new(0.0, 0.0));
        assert!(procrustes_residual(&plant, &loc.positions) < 1e-9);
        assert_eq!(loc.quality, 0.0);
    }

    #[test]
    fn zero_distances_are_degenerate() {
        let loc = localize_row(&AnchorDistanceMatrix::new(Array2::zeros((4, 4))).unwrap()).unwrap();
        assert!(loc.degenerate);
        assert!(loc.positions.iter().all(|p| p.norm() == 0.0));
        assert_eq!(loc.quality, f64::INFINITY);
    }

    #[test]
    fn colinear_anchors_are_degenerate() {
        let plant = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)];
        assert!(localize_row(&edm(&plant)).unwrap().degenerate);
    }

    #[test]
    fn malformed_distance_matrices_are_rejected() {
        assert!(AnchorDistanceMatrix::new(ndarray::array![[0.0, 1.0], [2.0, 0.0]]).is_err());
        assert!(AnchorDistanceMatrix::new(ndarray::array![[1.0, 1.0], [1.0, 0.0]]).is_err());
        assert!(AnchorDistanceMatrix::new(ndarray::array![[0.0, -1.0], [-1.0, 0.0]]).is_err());
    }

    #[test]
    fn bundle_rows_become_distance_matrices() {
        let mut b = IntensityBundle::zeros(2, 1, 3);
        b.anchor_mags[[0, 0]] = 9.0;
        b.anchor_mags[[0, 1]] = 16.0;
        b.anchor_pairs[[0, 0]] = 25.0;
        let d = build_distance_matrices(&b).unwrap();
        assert_eq!(
            d[0].matrix(),
            &ndarray::array![[0.0, 25.0, 9.0], [25.0, 0.0, 16.0], [9.0, 16.0, 0.0]]
        );
        assert_eq!(d[1].matrix(), &Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn truncated_pairs_are_an_incomplete_bundle() {
        let mut b = IntensityBundle::zeros(2, 1, 4);
        b.anchor_pairs = crate::RMatrix::zeros((2, 2));
        assert!(matches!(build_distance_matrices(&b), Err(Error::IncompleteBundle(_))));
    }
}
