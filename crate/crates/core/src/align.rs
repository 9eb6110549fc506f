//! Phase and conjugation alignment between complex vectors.
//!
//! Rows of a recovered transmission matrix are only determined up to a unit
//! phase factor and an optional complex conjugation. Everything that compares
//! rows (set merging, error metrics, test oracles) goes through
//! [`align_row`].

use crate::Complex64;

/// Transform mapping a candidate row onto a reference row:
/// `reference ≈ exp(i·phase) · op(candidate)`, where `op` conjugates when
/// `conjugate` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub conjugate: bool,
    pub phase: f64,
    /// `‖reference − aligned‖ / ‖reference‖`, or the absolute residual when
    /// the reference is zero.
    pub residual: f64,
}

impl Alignment {
    pub const IDENTITY: Alignment = Alignment {
        conjugate: false,
        phase: 0.0,
        residual: 0.0,
    };

    pub fn apply(&self, z: Complex64) -> Complex64 {
        let rot = Complex64::from_polar(1.0, self.phase);
        if self.conjugate {
            rot * z.conj()
        } else {
            rot * z
        }
    }
}

fn candidate(reference: &[Complex64], cand: &[Complex64], conjugate: bool) -> (f64, f64) {
    let op = |z: Complex64| if conjugate { z.conj() } else { z };
    let inner: Complex64 = reference
        .iter()
        .zip(cand)
        .map(|(p, q)| op(*q).conj() * p)
        .sum();
    let phase = if inner.norm() > 0.0 { inner.arg() } else { 0.0 };
    let rot = Complex64::from_polar(1.0, phase);
    let dist = reference
        .iter()
        .zip(cand)
        .map(|(p, q)| (p - rot * op(*q)).norm_sqr())
        .sum::<f64>()
        .sqrt();
    (phase, dist)
}

/// Best phase and conjugation flag aligning `cand` to `reference`.
///
/// Panics if the slices differ in length.
pub fn align_row(reference: &[Complex64], cand: &[Complex64]) -> Alignment {
    assert_eq!(reference.len(), cand.len(), "align_row: length mismatch");
    let (phase_p, dist_p) = candidate(reference, cand, false);
    let (phase_c, dist_c) = candidate(reference, cand, true);
    let ref_norm = reference.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let scale = if ref_norm > 0.0 { ref_norm } else { 1.0 };
    if dist_p <= dist_c {
        Alignment {
            conjugate: false,
            phase: phase_p,
            residual: dist_p / scale,
        }
    } else {
        Alignment {
            conjugate: true,
            phase: phase_c,
            residual: dist_c / scale,
        }
    }
}

/// Best global phase (no conjugation) aligning `cand` to `reference`.
pub fn align_phase(reference: &[Complex64], cand: &[Complex64]) -> Alignment {
    assert_eq!(reference.len(), cand.len(), "align_phase: length mismatch");
    let (phase, dist) = candidate(reference, cand, false);
    let ref_norm = reference.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    Alignment {
        conjugate: false,
        phase,
        residual: if ref_norm > 0.0 { dist / ref_norm } else { dist },
    }
}
