//! Transmission matrix recovery from phased measurements.
//!
//! Each probe set yields the TM columns at its nonzero rows, either through
//! the FFT right inverse of the circulant blocks or a dense least-squares
//! fit. Two partial results are then brought into a common row phase and
//! conjugation using the columns they share, and merged.

use nalgebra::DMatrix;
use ndarray::{s, Zip};
use rayon::prelude::*;

use crate::align::{align_row, Alignment};
use crate::circulant::{apply_row_inverse, CirculantSpectrum, FftPair};
use crate::multilateration::PhasedMeasurements;
use crate::probes::{min_shared, ProbeSet};
use crate::{BinaryMatrix, CMatrix, Complex64, Error, Result};

/// Default right-inverse weight for the first block.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Rows whose relative alignment residual exceeds this are flagged.
pub const REJECT_THRESHOLD: f64 = 0.5;

/// Columns of the TM recovered from one probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialTM {
    /// `M × (K/2)`.
    pub columns: CMatrix,
    /// Sorted TM column index of each recovered column.
    pub column_indices: Vec<usize>,
    pub source_id: u8,
}

/// FFT recovery of the columns at `probes.nonzero_rows()`.
pub fn recover_tm_fft(y: &PhasedMeasurements, probes: &ProbeSet, alpha: f64) -> Result<PartialTM> {
    let h = probes.half_k();
    if y.y.ncols() != 2 * h {
        return Err(Error::Dimension(format!(
            "phased measurements have {} columns, probe set has K = {}",
            y.y.ncols(),
            2 * h
        )));
    }
    let spectrum = CirculantSpectrum::from_probes(probes, alpha)?;
    let weights = spectrum.row_weights();
    let fft = FftPair::new(h);
    let mut columns = CMatrix::zeros((y.rows(), h));
    Zip::from(columns.rows_mut())
        .and(y.y.rows())
        .par_for_each(|mut out, yrow| {
            let mut work = vec![Complex64::default(); h];
            let mut scratch = vec![Complex64::default(); fft.scratch_len()];
            let yrow = yrow.to_vec();
            let out = out.as_slice_mut().expect("row-major output");
            apply_row_inverse(&fft, &weights, &yrow[..h], &yrow[h..], out, &mut work, &mut scratch);
        });
    Ok(PartialTM {
        columns,
        column_indices: probes.nonzero_rows().to_vec(),
        source_id: probes.set_id(),
    })
}

/// Dense least-squares recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct LsqRecovery {
    /// `M × N`; columns at all-zero probe rows are zero.
    pub entries: CMatrix,
    /// Columns no probe touches.
    pub unrecoverable: Vec<usize>,
}

/// Minimum-norm least-squares fit `Â = Y Ξ†`, with `Ξ` restricted to its
/// nonzero rows and pseudo-inverted through an SVD.
pub fn recover_tm_lsq(y: &PhasedMeasurements, xi: &BinaryMatrix) -> Result<LsqRecovery> {
    let (n, k) = xi.dim();
    if y.y.ncols() != k {
        return Err(Error::Dimension(format!(
            "phased measurements have {} columns, probe matrix has {k}",
            y.y.ncols()
        )));
    }
    let nonzero: Vec<usize> = (0..n).filter(|&r| xi.row(r).iter().any(|&v| v != 0)).collect();
    let unrecoverable: Vec<usize> = (0..n).filter(|r| nonzero.binary_search(r).is_err()).collect();
    let h = nonzero.len();
    let mut entries = CMatrix::zeros((y.rows(), n));
    if h == 0 {
        return Ok(LsqRecovery { entries, unrecoverable });
    }
    let reduced = DMatrix::from_fn(h, k, |i, j| xi[[nonzero[i], j]] as f64);
    let svd = reduced.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (h.max(k) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < h {
        return Err(Error::RankDeficient {
            dependent_rows: dependent_rows(&reduced, &nonzero, tol),
        });
    }
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    // pinv is K × h; row-major copy for the inner loop.
    let pinv: Vec<f64> = (0..k).flat_map(|i| (0..h).map(move |j| (i, j))).map(|(i, j)| pinv[(i, j)]).collect();

    Zip::from(entries.rows_mut())
        .and(y.y.rows())
        .par_for_each(|mut out, yrow| {
            let mut acc = vec![Complex64::default(); h];
            for (kk, yk) in yrow.iter().enumerate() {
                let prow = &pinv[kk * h..(kk + 1) * h];
                for (a, p) in acc.iter_mut().zip(prow) {
                    *a += yk * p;
                }
            }
            for (j, &col) in nonzero.iter().enumerate() {
                out[col] = acc[j];
            }
        });
    Ok(LsqRecovery { entries, unrecoverable })
}

/// Rows of `m` that lie in the span of earlier rows (modified Gram–Schmidt),
/// reported by their original row index.
fn dependent_rows(m: &DMatrix<f64>, labels: &[usize], tol: f64) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (i, &label) in labels.iter().enumerate().take(m.nrows()) {
        let mut v: Vec<f64> = m.row(i).iter().cloned().collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= tol.max(1e-9) {
            dependent.push(label);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    dependent
}

/// Full TM assembled from two partial recoveries.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredTM {
    /// `M × N`. Each row matches the true TM up to a unit phase and optional
    /// conjugation.
    pub entries: CMatrix,
    /// Probe set that supplied each column, `None` when uncovered.
    pub provenance: Vec<Option<u8>>,
    /// Transform applied to each row of the second partial result.
    pub alignments: Vec<Alignment>,
    /// Relative alignment residual per row on the shared columns.
    pub alignment_residuals: Vec<f64>,
    /// Rows whose residual exceeds [`REJECT_THRESHOLD`].
    pub flagged_rows: Vec<usize>,
    /// Mean absolute disagreement on shared columns after alignment.
    pub shared_disagreement: f64,
    pub unrecovered_columns: Vec<usize>,
}

/// Aligns `part2` row by row to `part1` on their shared columns and merges.
/// On shared columns `part1` is kept.
pub fn align_and_merge(part1: &PartialTM, part2: &PartialTM, n_cols: usize) -> Result<RecoveredTM> {
    let m_rows = part1.columns.nrows();
    if part2.columns.nrows() != m_rows {
        return Err(Error::Dimension(format!(
            "partial TMs differ in rows: {} vs {}",
            m_rows,
            part2.columns.nrows()
        )));
    }
    for p in [part1, part2] {
        if p.column_indices.len() != p.columns.ncols()
            || p.column_indices.windows(2).any(|w| w[0] >= w[1])
            || p.column_indices.last().is_some_and(|&c| c >= n_cols)
        {
            return Err(Error::Dimension(format!(
                "partial TM {} has invalid column indices",
                p.source_id
            )));
        }
    }
    // (position in part1, position in part2) for every shared column.
    let shared: Vec<(usize, usize)> = part1
        .column_indices
        .iter()
        .enumerate()
        .filter_map(|(i, c)| part2.column_indices.binary_search(c).ok().map(|j| (i, j)))
        .collect();
    let needed = min_shared(n_cols).min(n_cols);
    if shared.len() < needed {
        return Err(Error::Merge(format!(
            "probe sets share {} columns, at least {needed} are required",
            shared.len()
        )));
    }

    let alignments: Vec<Alignment> = (0..m_rows)
        .into_par_iter()
        .map(|m| {
            let p: Vec<Complex64> = shared.iter().map(|&(i, _)| part1.columns[[m, i]]).collect();
            let q: Vec<Complex64> = shared.iter().map(|&(_, j)| part2.columns[[m, j]]).collect();
            align_row(&p, &q)
        })
        .collect();

    let mut provenance = vec![None; n_cols];
    part2.column_indices.iter().for_each(|&c| provenance[c] = Some(part2.source_id));
    part1.column_indices.iter().for_each(|&c| provenance[c] = Some(part1.source_id));
    // Columns only part2 recovered, as (position in part2, TM column).
    let from2: Vec<(usize, usize)> = part2
        .column_indices
        .iter()
        .enumerate()
        .filter(|(_, c)| part1.column_indices.binary_search(c).is_err())
        .map(|(j, &c)| (j, c))
        .collect();

    let mut entries = CMatrix::zeros((m_rows, n_cols));
    let row_disagreement: Vec<f64> = entries
        .outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .map(|(m, mut row)| {
            let a = alignments[m];
            for &(j, c) in &from2 {
                row[c] = a.apply(part2.columns[[m, j]]);
            }
            for (i, &c) in part1.column_indices.iter().enumerate() {
                row[c] = part1.columns[[m, i]];
            }
            shared
                .iter()
                .map(|&(i, j)| (part1.columns[[m, i]] - a.apply(part2.columns[[m, j]])).norm())
                .sum()
        })
        .collect();
    let disagreement: f64 = row_disagreement.iter().sum();
    let count = (shared.len() * m_rows).max(1) as f64;
    let alignment_residuals: Vec<f64> = alignments.iter().map(|a| a.residual).collect();
    let flagged_rows = alignment_residuals
        .iter()
        .enumerate()
        .filter(|(_, &r)| !(r <= REJECT_THRESHOLD))
        .map(|(m, _)| m)
        .collect();
    let unrecovered_columns = (0..n_cols).filter(|&c| provenance[c].is_none()).collect();
    Ok(RecoveredTM {
        entries,
        provenance,
        alignments,
        alignment_residuals,
        flagged_rows,
        shared_disagreement: disagreement / count,
        unrecovered_columns,
    })
}

/// Expands a partial result to a full-width matrix (zero elsewhere).
pub fn partial_to_full(part: &PartialTM, n_cols: usize) -> CMatrix {
    let mut out = CMatrix::zeros((part.columns.nrows(), n_cols));
    for (j, &col) in part.column_indices.iter().enumerate() {
        out.column_mut(col).assign(&part.columns.column(j));
    }
    out
}

/// Relative Frobenius error after aligning each row of `estimate` to `truth`
/// by phase and conjugation.
pub fn tm_relative_error(estimate: &CMatrix, truth: &CMatrix) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    let total = truth.iter().map(|z| z.norm_sqr()).sum::<f64>();
    if total == 0.0 {
        return Err(Error::ZeroReference);
    }
    let mut err = 0.0;
    for (e, t) in estimate.rows().into_iter().zip(truth.rows()) {
        let e = e.to_vec();
        let t = t.to_vec();
        let a = align_row(&t, &e);
        err += t.iter().zip(&e).map(|(t, e)| (a.apply(*e) - t).norm_sqr()).sum::<f64>();
    }
    Ok((err / total).sqrt())
}

/// Restricts a full matrix to the given columns.
pub fn select_columns(a: &CMatrix, columns: &[usize]) -> CMatrix {
    let mut out = CMatrix::zeros((a.nrows(), columns.len()));
    for (j, &c) in columns.iter().enumerate() {
        out.slice_mut(s![.., j]).assign(&a.column(c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::circulant_matrix;
    use crate::opu::TransmissionMatrix;
    use crate::probes::{design_dual_probe_sets, design_probe_set};
    use crate::RMatrix;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn exact_phased(a: &CMatrix, xi: &BinaryMatrix) -> PhasedMeasurements {
        let xi_c = xi.mapv(|v| Complex64::new(v as f64, 0.0));
        let y = a.dot(&xi_c);
        PhasedMeasurements {
            residual: RMatrix::zeros(y.dim()),
            y,
            excluded_rows: vec![],
        }
    }

    fn fro(a: &CMatrix) -> f64 {
        a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Dense right inverse `[α C_A⁻¹; β C_B⁻¹]` by direct matrix inversion.
    fn dense_right_inverse_recovery(y: &CMatrix, p: &ProbeSet, alpha: f64) -> CMatrix {
        let h = p.half_k();
        let inv = |g: &[u8]| {
            let g: Vec<f64> = g.iter().map(|&v| v as f64).collect();
            circulant_matrix(&g).try_inverse().expect("invertible block")
        };
        let ia = inv(p.gen_a()) * alpha;
        let ib = inv(p.gen_b()) * (1.0 - alpha);
        let mut out = CMatrix::zeros((y.nrows(), h));
        for m in 0..y.nrows() {
            for j in 0..h {
                let mut acc = Complex64::default();
                for i in 0..h {
                    acc += y[[m, i]] * ia[(i, j)] + y[[m, h + i]] * ib[(i, j)];
                }
                out[[m, j]] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_blocks_average_the_halves() {
        let p = ProbeSet::from_parts(4, vec![1, 0, 0, 0], vec![1, 0, 0, 0], vec![], 0).unwrap();
        let a = TransmissionMatrix::sample(3, 4, 1).unwrap().into_entries();
        let y = exact_phased(&a, p.xi());
        let part = recover_tm_fft(&y, &p, 0.5).unwrap();
        assert!(fro(&(&part.columns - &a)) < 1e-14);
        let lsq = recover_tm_lsq(&y, p.xi()).unwrap();
        assert!(fro(&(&lsq.entries - &a)) < 1e-12);
    }

    #[test]
    fn fft_recovery_is_exact_on_square_probes() {
        let p = design_probe_set(8, 16, 4).unwrap();
        let a = TransmissionMatrix::sample(8, 8, 2).unwrap().into_entries();
        let part = recover_tm_fft(&exact_phased(&a, p.xi()), &p, 0.5).unwrap();
        assert!(fro(&(&part.columns - &a)) / fro(&a) < 1e-10);
    }

    #[test]
    fn fft_path_matches_dense_right_inverse() {
        for (h, seed) in [(4usize, 1u64), (12, 2), (15, 3)] {
            let p = design_probe_set(h + 3, 2 * h, seed).unwrap();
            let a = TransmissionMatrix::sample(5, h + 3, seed).unwrap().into_entries();
            let y = exact_phased(&a, p.xi());
            for alpha in [0.5, 0.3] {
                let fast = recover_tm_fft(&y, &p, alpha).unwrap().columns;
                let dense = dense_right_inverse_recovery(&y.y, &p, alpha);
                assert!(fro(&(&fast - &dense)) / fro(&dense) < 1e-9, "h={h}");
            }
        }
    }

    #[test]
    fn lsq_reproduces_measurements_and_fft_columns() {
        for (n, h, seed) in [(12usize, 8usize, 5u64), (20, 15, 6)] {
            let p = design_probe_set(n, 2 * h, seed).unwrap();
            let a = TransmissionMatrix::sample(7, n, seed).unwrap().into_entries();
            let y = exact_phased(&a, p.xi());
            let lsq = recover_tm_lsq(&y, p.xi()).unwrap();
            assert_eq!(lsq.unrecoverable, p.zero_rows());
            let xi_c = p.xi().mapv(|v| Complex64::new(v as f64, 0.0));
            assert!(fro(&(&y.y - &lsq.entries.dot(&xi_c))) < 1e-9 * fro(&y.y));
            let fast = recover_tm_fft(&y, &p, 0.5).unwrap();
            let lsq_cols = select_columns(&lsq.entries, &fast.column_indices);
            assert!(fro(&(&lsq_cols - &fast.columns)) / fro(&fast.columns) < 1e-8);
        }
    }

    #[test]
    fn lsq_reports_dependent_rows() {
        let mut xi = BinaryMatrix::zeros((4, 6));
        xi.row_mut(0).assign(&ndarray::array![1, 0, 1, 0, 1, 0]);
        xi.row_mut(1).assign(&ndarray::array![0, 1, 0, 1, 0, 1]);
        xi.row_mut(3).assign(&ndarray::array![1, 1, 1, 1, 1, 1]);
        let y = PhasedMeasurements {
            y: CMatrix::zeros((2, 6)),
            residual: RMatrix::zeros((2, 6)),
            excluded_rows: vec![],
        };
        match recover_tm_lsq(&y, &xi) {
            Err(Error::RankDeficient { dependent_rows }) => assert_eq!(dependent_rows, vec![3]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    fn partial(columns: CMatrix, idx: Vec<usize>, id: u8) -> PartialTM {
        PartialTM {
            columns,
            column_indices: idx,
            source_id: id,
        }
    }

    #[test]
    fn merge_detects_conjugation_and_phase() {
        let base = TransmissionMatrix::sample(1, 10, 8).unwrap().into_entries();
        let idx: Vec<usize> = (0..10).collect();
        let twisted = base.mapv(|z| z.conj() * Complex64::from_polar(1.0, 0.7));
        let merged = align_and_merge(&partial(base.clone(), idx.clone(), 1), &partial(twisted, idx, 2), 10).unwrap();
        let a = merged.alignments[0];
        assert!(a.conjugate);
        assert!((a.phase - 0.7).abs() < 1e-12);
        assert!(merged.alignment_residuals[0] < 1e-12);
    }

    #[test]
    fn merging_a_partial_with_itself_is_identity() {
        let base = TransmissionMatrix::sample(5, 12, 8).unwrap().into_entries();
        let idx: Vec<usize> = (0..12).collect();
        let part = partial(base.clone(), idx, 1);
        let merged = align_and_merge(&part, &part, 12).unwrap();
        assert_eq!(merged.entries, base);
        assert!(merged.alignment_residuals.iter().all(|&r| r == 0.0));
        assert!(merged.flagged_rows.is_empty());
    }

    #[test]
    fn merge_requires_enough_shared_columns() {
        let a = partial(CMatrix::zeros((2, 10)), (0..10).collect(), 1);
        let b = partial(CMatrix::zeros((2, 10)), (3..13).collect(), 2);
        assert!(matches!(align_and_merge(&a, &b, 13), Err(Error::Merge(_))));
    }

    #[test]
    fn dual_set_pipeline_on_exact_measurements() {
        let n = 16;
        let a = TransmissionMatrix::sample(20, n, 3).unwrap().into_entries();
        let (p1, p2) = design_dual_probe_sets(n, 24, 9).unwrap();
        let mut rng = crate::rng::seeded(4);
        // Scramble each row of the second set's Y with its own phase and conjugation.
        let mut y2 = exact_phased(&a, p2.xi());
        for mut row in y2.y.rows_mut() {
            let rot = Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
            let conj = rng.gen_bool(0.5);
            row.mapv_inplace(|z| if conj { rot * z.conj() } else { rot * z });
        }
        let part1 = recover_tm_fft(&exact_phased(&a, p1.xi()), &p1, 0.5).unwrap();
        let part2 = recover_tm_fft(&y2, &p2, 0.5).unwrap();
        let merged = align_and_merge(&part1, &part2, n).unwrap();
        assert!(merged.unrecovered_columns.is_empty());
        assert!(tm_relative_error(&merged.entries, &a).unwrap() < 1e-7);
        assert!(merged.flagged_rows.is_empty());
    }

    #[test]
    fn relative_error_ignores_row_ambiguity() {
        let t = TransmissionMatrix::sample(6, 5, 1).unwrap().into_entries();
        assert_eq!(tm_relative_error(&t, &t).unwrap(), 0.0);
        let mut rng = crate::rng::seeded(2);
        let mut e = t.clone();
        for mut row in e.rows_mut() {
            let rot = Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
            row.mapv_inplace(|z| rot * z.conj());
        }
        assert!(tm_relative_error(&e, &t).unwrap() < 1e-14);
        assert!(matches!(
            tm_relative_error(&CMatrix::zeros((2, 2)), &CMatrix::zeros((2, 2))),
            Err(Error::ZeroReference)
        ));
    }

    #[test]
    fn relative_error_of_small_perturbation() {
        let t = TransmissionMatrix::sample(64, 32, 1).unwrap().into_entries();
        let mut rng = crate::rng::seeded(3);
        let g = Array2::from_shape_simple_fn(t.dim(), || {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        });
        let eps = 1e-3;
        let e = &t + &g.mapv(|z| z * eps);
        let expected = eps * fro(&g) / fro(&t);
        let got = tm_relative_error(&e, &t).unwrap();
        // Row alignment can only lower the error, and only at second order.
        assert!(got <= expected * (1.0 + 1e-9));
        assert!(got >= expected * 0.95, "got {got}, expected {expected}");
    }
}
