//! Binary calibration inputs.
//!
//! A probe set is two circulant blocks side by side, with all-zero rows
//! inserted so that the set spans `N` input pixels. Anchors are built on top
//! of the probe supports so that every difference the camera has to measure
//! (anchor minus anchor, anchor minus probe) is itself a binary DMD pattern.

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::multilateration::IntensityBundle;
use crate::{rng, BinaryMatrix, Complex64, Error, RMatrix, Result};

/// Smallest eigenvalue magnitude accepted for a probe circulant block.
pub const MIN_EIGENVALUE: f64 = 1e-9;

/// Default fraction of the remaining zero set switched on per anchor.
pub const DEFAULT_FILL_FRACTION: f64 = 0.15;

const MAX_GENERATOR_DRAWS: usize = 10_000;

/// Minimum number of nonzero rows two probe sets must share so their
/// recovered columns can be aligned: `max(8, ⌈0.05·N⌉)`.
pub fn min_shared(n: usize) -> usize {
    8.max((n as f64 * 0.05).ceil() as usize)
}

/// `N × K` binary probe matrix `[Ξ_A, Ξ_B]` with its circulant generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    xi: BinaryMatrix,
    gen_a: Vec<u8>,
    gen_b: Vec<u8>,
    zero_rows: Vec<usize>,
    nonzero_rows: Vec<usize>,
    seed: u64,
    set_id: u8,
}

fn is_binary(v: &[u8]) -> bool {
    v.iter().all(|&b| b <= 1)
}

fn min_dft_magnitude(g: &[u8]) -> f64 {
    let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(g.len()).process(&mut buf);
    buf.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min)
}

fn sample_generator(rng: &mut ChaCha8Rng, len: usize) -> Result<Vec<u8>> {
    for _ in 0..MAX_GENERATOR_DRAWS {
        let g: Vec<u8> = (0..len).map(|_| rng.gen_bool(0.5) as u8).collect();
        let ones = g.iter().filter(|&&b| b == 1).count();
        if ones == 0 || ones == len {
            continue;
        }
        if min_dft_magnitude(&g) < MIN_EIGENVALUE {
            continue;
        }
        return Ok(g);
    }
    Err(Error::Parameter(format!(
        "no invertible binary circulant generator of length {len} found"
    )))
}

impl ProbeSet {
    /// Assembles a probe set from explicit generators and zero-row indices.
    ///
    /// Invertibility of the circulant blocks is not checked here; it is
    /// enforced when the spectrum is formed.
    pub fn from_parts(
        n: usize,
        gen_a: Vec<u8>,
        gen_b: Vec<u8>,
        mut zero_rows: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let h = gen_a.len();
        if gen_b.len() != h {
            return Err(Error::Parameter(format!(
                "generators differ in length: {} vs {}",
                h,
                gen_b.len()
            )));
        }
        if h == 0 || h > n {
            return Err(Error::Parameter(format!(
                "generator length {h} must be in 1..={n}"
            )));
        }
        if !is_binary(&gen_a) || !is_binary(&gen_b) {
            return Err(Error::Validation("generators must be binary".into()));
        }
        zero_rows.sort_unstable();
        zero_rows.dedup();
        if zero_rows.len() != n - h || zero_rows.last().is_some_and(|&r| r >= n) {
            return Err(Error::Parameter(format!(
                "expected {} distinct zero rows below {n}, got {:?}",
                n - h,
                zero_rows
            )));
        }
        let mut is_zero = vec![false; n];
        zero_rows.iter().for_each(|&r| is_zero[r] = true);
        let nonzero_rows: Vec<usize> = (0..n).filter(|&r| !is_zero[r]).collect();

        let mut xi = Array2::zeros((n, 2 * h));
        for (i, &row) in nonzero_rows.iter().enumerate() {
            for j in 0..h {
                let t = (i + h - j) % h;
                xi[[row, j]] = gen_a[t];
                xi[[row, h + j]] = gen_b[t];
            }
        }
        Ok(ProbeSet {
            xi,
            gen_a,
            gen_b,
            zero_rows,
            nonzero_rows,
            seed,
            set_id: 1,
        })
    }

    pub fn xi(&self) -> &BinaryMatrix {
        &self.xi
    }

    pub fn gen_a(&self) -> &[u8] {
        &self.gen_a
    }

    pub fn gen_b(&self) -> &[u8] {
        &self.gen_b
    }

    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    pub fn nonzero_rows(&self) -> &[usize] {
        &self.nonzero_rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Identifies which of the calibration probe sets this is (1 or 2).
    pub fn set_id(&self) -> u8 {
        self.set_id
    }

    pub fn with_set_id(mut self, id: u8) -> Self {
        self.set_id = id;
        self
    }

    pub fn n(&self) -> usize {
        self.xi.nrows()
    }

    pub fn k(&self) -> usize {
        self.xi.ncols()
    }

    /// Size of each circulant block, `K/2`.
    pub fn half_k(&self) -> usize {
        self.gen_a.len()
    }

    /// Probe column `k`.
    pub fn probe(&self, k: usize) -> ArrayView1<'_, u8> {
        self.xi.column(k)
    }

    /// Indicator of rows touched by at least one probe.
    pub fn support(&self) -> Vec<bool> {
        let mut supp = vec![false; self.n()];
        for (r, row) in self.xi.rows().into_iter().enumerate() {
            supp[r] = row.iter().any(|&v| v == 1);
        }
        supp
    }
}

/// Random probe set: Bernoulli(1/2) generators and uniformly placed zero rows.
pub fn design_probe_set(n: usize, k: usize, seed: u64) -> Result<ProbeSet> {
    check_probe_params(n, k)?;
    let h = k / 2;
    let mut rng = rng::seeded(seed);
    let gen_a = sample_generator(&mut rng, h)?;
    let gen_b = sample_generator(&mut rng, h)?;
    let zero_rows = index::sample(&mut rng, n, n - h).into_vec();
    ProbeSet::from_parts(n, gen_a, gen_b, zero_rows, seed)
}

fn check_probe_params(n: usize, k: usize) -> Result<()> {
    if !k.is_multiple_of(2) {
        return Err(Error::Parameter(format!("K must be even, got {k}")));
    }
    let h = k / 2;
    if h < 4 || h > n {
        return Err(Error::Parameter(format!(
            "K/2 must satisfy 4 <= K/2 <= N; got K/2 = {h}, N = {n}"
        )));
    }
    Ok(())
}

/// Two probe sets for a full calibration.
///
/// The first set is `design_probe_set(n, k, seed)`. The second takes its
/// zero rows from the first set's nonzero rows as far as the
/// [`min_shared`] overlap allows, so the union of supports covers as many
/// columns as possible. Columns left uncovered are reported by
/// [`uncovered_columns`].
pub fn design_dual_probe_sets(n: usize, k: usize, seed: u64) -> Result<(ProbeSet, ProbeSet)> {
    check_probe_params(n, k)?;
    let h = k / 2;
    let shared_min = min_shared(n).min(n);
    if h < shared_min {
        return Err(Error::Parameter(format!(
            "K/2 = {h} is below the {shared_min} rows the two probe sets must share"
        )));
    }
    let first = design_probe_set(n, k, seed)?.with_set_id(1);
    let mut rng = rng::keyed(seed, 2, 0);
    let gen_a = sample_generator(&mut rng, h)?;
    let gen_b = sample_generator(&mut rng, h)?;

    let z = n - h;
    let from_nonzero = z.min(h - shared_min);
    let from_zero = z - from_nonzero;
    let nz1 = first.nonzero_rows();
    let z1 = first.zero_rows();
    let mut zero_rows: Vec<usize> = index::sample(&mut rng, nz1.len(), from_nonzero)
        .into_iter()
        .map(|i| nz1[i])
        .collect();
    zero_rows.extend(
        index::sample(&mut rng, z1.len(), from_zero)
            .into_iter()
            .map(|i| z1[i]),
    );
    let second = ProbeSet::from_parts(n, gen_a, gen_b, zero_rows, seed)?.with_set_id(2);
    Ok((first, second))
}

/// Columns of the transmission matrix that no probe set touches.
pub fn uncovered_columns(sets: &[&ProbeSet]) -> Vec<usize> {
    let Some(n) = sets.first().map(|p| p.n()) else {
        return Vec::new();
    };
    let mut covered = vec![false; n];
    for p in sets {
        p.nonzero_rows().iter().for_each(|&r| covered[r] = true);
    }
    (0..n).filter(|&r| !covered[r]).collect()
}

/// `N × S` binary anchor patterns; column `S−1` is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: BinaryMatrix,
    fill_fraction: f64,
    seed: u64,
}

impl AnchorSet {
    /// Wraps explicit anchor columns after checking the pairwise dominance
    /// structure.
    pub fn from_matrix(anchors: BinaryMatrix, fill_fraction: f64, seed: u64) -> Result<Self> {
        let set = AnchorSet {
            anchors,
            fill_fraction,
            seed,
        };
        set.check_structure()?;
        Ok(set)
    }

    pub fn anchors(&self) -> &BinaryMatrix {
        &self.anchors
    }

    pub fn anchor(&self, s: usize) -> ArrayView1<'_, u8> {
        self.anchors.column(s)
    }

    pub fn s_count(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn n(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.fill_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_structure(&self) -> Result<()> {
        let s_count = self.s_count();
        if s_count < 3 {
            return Err(Error::Parameter(format!("need at least 3 anchors, got {s_count}")));
        }
        if !self.anchors.iter().all(|&v| v <= 1) {
            return Err(Error::Validation("anchors must be binary".into()));
        }
        if self.anchor(s_count - 1).iter().any(|&v| v != 0) {
            return Err(Error::Validation("last anchor must be the origin".into()));
        }
        for q in 0..s_count {
            for s in q + 1..s_count {
                if binary_difference(self.anchor(q), self.anchor(s)).is_none()
                    && binary_difference(self.anchor(s), self.anchor(q)).is_none()
                {
                    return Err(Error::Validation(format!(
                        "anchors {q} and {s} do not dominate one another"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that every nonzero anchor dominates every probe elementwise.
    pub fn check_against(&self, probes: &ProbeSet) -> Result<()> {
        if probes.n() != self.n() {
            return Err(Error::Dimension(format!(
                "probe set has N = {}, anchors have N = {}",
                probes.n(),
                self.n()
            )));
        }
        let supp = probes.support();
        for s in 0..self.s_count() - 1 {
            if let Some(r) = (0..self.n()).find(|&r| supp[r] && self.anchors[[r, s]] == 0) {
                return Err(Error::Validation(format!(
                    "anchor {s} does not cover probe support at row {r}"
                )));
            }
        }
        Ok(())
    }
}

/// `a − b` when it is binary, `None` otherwise.
fn binary_difference(a: ArrayView1<u8>, b: ArrayView1<u8>) -> Option<Vec<u8>> {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x.checked_sub(y))
        .collect()
}

/// `⌈fraction · count⌉`, ignoring floating-point noise just above an integer.
fn fill_count(fraction: f64, count: usize) -> usize {
    let x = fraction * count as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Largest anchor count (origin included) the greedy construction supports
/// when `zero_count` indices lie outside the probe supports.
pub fn max_anchor_count(zero_count: usize, fill_fraction: f64) -> usize {
    let mut z = zero_count;
    let mut built = 0;
    while z > 0 {
        z -= fill_count(fill_fraction, z).clamp(1, z);
        built += 1;
    }
    built + 1
}

/// Greedy anchor pyramid over the given probe sets.
///
/// Each new anchor is the thresholded sum of all probes and previously built
/// anchors, with `⌈fill_fraction · |zeros|⌉` of the remaining zero indices
/// switched on at random. Anchors are stored largest support first; the
/// last column is the origin.
pub fn design_anchor_pyramid(
    probes: &[ProbeSet],
    s_count: usize,
    fill_fraction: f64,
    seed: u64,
) -> Result<AnchorSet> {
    if s_count < 3 {
        return Err(Error::Parameter(format!("need at least 3 anchors, got {s_count}")));
    }
    if !(fill_fraction > 0.0 && fill_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "fill fraction must be in (0, 1), got {fill_fraction}"
        )));
    }
    let Some(n) = probes.first().map(|p| p.n()) else {
        return Err(Error::Parameter("at least one probe set is required".into()));
    };
    if probes.iter().any(|p| p.n() != n) {
        return Err(Error::Dimension("probe sets differ in N".into()));
    }
    let mut current = vec![0u8; n];
    for p in probes {
        for (c, covered) in current.iter_mut().zip(p.support()) {
            *c |= covered as u8;
        }
    }
    let zero_count = current.iter().filter(|&&v| v == 0).count();
    if zero_count == 0 {
        return Err(Error::Parameter(
            "probe supports cover every input index; anchors would all be ones".into(),
        ));
    }

    let mut rng = rng::seeded(seed);
    let mut built: Vec<Vec<u8>> = Vec::with_capacity(s_count - 1);
    for _ in 0..s_count - 1 {
        let zeros: Vec<usize> = (0..n).filter(|&i| current[i] == 0).collect();
        if zeros.is_empty() {
            return Err(Error::AnchorCapacity {
                requested: s_count,
                max_feasible: max_anchor_count(zero_count, fill_fraction),
            });
        }
        let fill = fill_count(fill_fraction, zeros.len()).clamp(1, zeros.len());
        for i in index::sample(&mut rng, zeros.len(), fill) {
            current[zeros[i]] = 1;
        }
        built.push(current.clone());
    }

    let mut anchors = Array2::zeros((n, s_count));
    for (col, anchor) in built.iter().rev().enumerate() {
        for (r, &v) in anchor.iter().enumerate() {
            anchors[[r, col]] = v;
        }
    }
    AnchorSet::from_matrix(anchors, fill_fraction, seed)
}

/// What a measured pattern contributes to the intensity bundle. Anchor
/// indices are zero-based; the origin has index `S−1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// `v_s`, i.e. the difference to the origin anchor.
    AnchorMagnitude { anchor: usize },
    /// `v_first − v_second` with `first < second < S−1`.
    AnchorPair { first: usize, second: usize },
    /// `ξ_k`, the distance to the origin anchor.
    ProbeToOrigin { probe: usize },
    /// `v_s − ξ_k`.
    ProbeToAnchor { probe: usize, anchor: usize },
}

/// Number of patterns in a measurement plan for `K` probes and `S` anchors.
pub fn plan_len(k: usize, s_count: usize) -> usize {
    let s1 = s_count - 1;
    s1 + s1 * (s1 - 1) / 2 + k + k * s1
}

/// Ordered binary patterns to display, each tagged with its role.
#[derive(Debug, Clone)]
pub struct MeasurementPlan {
    roles: Vec<Role>,
    patterns: BinaryMatrix,
    k: usize,
    s_count: usize,
}

impl MeasurementPlan {
    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    /// `N × len` matrix; column `i` is the pattern for `roles()[i]`.
    pub fn patterns(&self) -> &BinaryMatrix {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Scatters an `M × len` readout of the plan into an intensity bundle.
    pub fn unpack(&self, readout: &RMatrix) -> Result<IntensityBundle> {
        if readout.ncols() != self.len() {
            return Err(Error::Dimension(format!(
                "readout has {} columns, plan has {} patterns",
                readout.ncols(),
                self.len()
            )));
        }
        let mut bundle = IntensityBundle::zeros(readout.nrows(), self.k, self.s_count);
        for (col, role) in self.roles.iter().enumerate() {
            let values = readout.column(col);
            match *role {
                Role::AnchorMagnitude { anchor } => {
                    bundle.anchor_mags.column_mut(anchor).assign(&values)
                }
                Role::AnchorPair { first, second } => bundle
                    .anchor_pairs
                    .column_mut(IntensityBundle::pair_index(first, second, self.s_count))
                    .assign(&values),
                Role::ProbeToOrigin { probe } => {
                    bundle.probe_to_origin.column_mut(probe).assign(&values)
                }
                Role::ProbeToAnchor { probe, anchor } => {
                    for (m, &v) in values.iter().enumerate() {
                        bundle.probe_to_anchor[[m, probe, anchor]] = v;
                    }
                }
            }
        }
        Ok(bundle)
    }
}

/// Every pattern the camera must see to calibrate with `probes` and `anchors`.
pub fn measurement_plan(probes: &ProbeSet, anchors: &AnchorSet) -> Result<MeasurementPlan> {
    anchors.check_against(probes)?;
    let k = probes.k();
    let s_count = anchors.s_count();
    let s1 = s_count - 1;
    let mut roles = Vec::with_capacity(plan_len(k, s_count));
    let mut columns: Vec<Vec<u8>> = Vec::with_capacity(plan_len(k, s_count));

    let diff = |a: ArrayView1<u8>, b: ArrayView1<u8>, what: &str| -> Result<Vec<u8>> {
        binary_difference(a, b)
            .ok_or_else(|| Error::Consistency(format!("{what} is not a binary pattern")))
    };

    for s in 0..s1 {
        roles.push(Role::AnchorMagnitude { anchor: s });
        columns.push(anchors.anchor(s).to_vec());
    }
    for q in 0..s1 {
        for s in q + 1..s1 {
            roles.push(Role::AnchorPair { first: q, second: s });
            columns.push(diff(anchors.anchor(q), anchors.anchor(s), "anchor difference")?);
        }
    }
    for kk in 0..k {
        roles.push(Role::ProbeToOrigin { probe: kk });
        columns.push(probes.probe(kk).to_vec());
    }
    for kk in 0..k {
        for s in 0..s1 {
            roles.push(Role::ProbeToAnchor { probe: kk, anchor: s });
            columns.push(diff(anchors.anchor(s), probes.probe(kk), "anchor minus probe")?);
        }
    }

    let n = probes.n();
    let patterns = Array2::from_shape_fn((n, columns.len()), |(r, c)| columns[c][r]);
    Ok(MeasurementPlan {
        roles,
        patterns,
        k,
        s_count,
    })
}
