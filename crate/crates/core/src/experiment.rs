//! End-to-end experiments against the simulator: calibration, imaging and
//! timing sweeps.

use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;

use crate::calibrate::{align_and_merge, recover_tm_fft, tm_relative_error, PartialTM, RecoveredTM};
use crate::geometry::{build_distance_matrices, localize_anchors};
use crate::imaging::{measurement_residual, signal_relative_error, wf_reconstruct, ImagingTask, LossRecord, WFConfig};
use crate::multilateration::{median, recover_all_phases, IntensityBundle};
use crate::nif::{self, parse_value, RowReport, SweepRow};
use crate::opu::{new_opu, CameraModel, SimulatedOPU};
use crate::probes::{design_anchor_pyramid, design_dual_probe_sets, AnchorSet, ProbeSet, DEFAULT_FILL_FRACTION};
use crate::{rng, BinaryMatrix, CMatrix, Complex64, Error, Result};

/// Stage names in reporting order.
pub const STAGES: [&str; 6] = ["measure", "mds", "multilaterate", "invert", "merge", "wf"];
/// Stages counted as computation in benchmark totals. Measurement stands in
/// for the optical hardware and imaging is reported separately.
pub const COMPUTE_STAGES: [&str; 4] = ["mds", "multilaterate", "invert", "merge"];

/// Target number of intensity values held per row block.
const BLOCK_VALUES: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    /// `M / N`.
    pub oversampling: usize,
    pub k_per_set: usize,
    pub s_anchors: usize,
    pub bits: u8,
    pub noise_sigma: f64,
    pub seed_probe: u64,
    pub seed_anchor: u64,
    pub seed_tm: u64,
    pub seed_wf: u64,
    pub seed_scene: u64,
    pub alpha: f64,
    pub fill_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 256,
            oversampling: 16,
            k_per_set: 384,
            s_anchors: 20,
            bits: 0,
            noise_sigma: 0.0,
            seed_probe: 1,
            seed_anchor: 2,
            seed_tm: 3,
            seed_wf: 4,
            seed_scene: 5,
            alpha: 0.5,
            fill_fraction: DEFAULT_FILL_FRACTION,
            out: None,
        }
    }
}

/// Even probe count closest to `ratio · n`.
pub fn k_for_ratio(n: usize, ratio: f64) -> usize {
    2 * ((ratio * n as f64 / 2.0).round() as usize)
}

impl ExperimentConfig {
    pub fn m_rows(&self) -> usize {
        self.n * self.oversampling
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(self.bits, 1.0, self.noise_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.oversampling == 0 || self.k_per_set == 0 {
            return Err(Error::Validation("n, oversampling and k_per_set must be positive".into()));
        }
        if !self.k_per_set.is_multiple_of(2) {
            return Err(Error::Validation(format!("k_per_set must be even, got {}", self.k_per_set)));
        }
        if self.k_per_set / 2 > self.n {
            return Err(Error::Validation(format!(
                "k_per_set / 2 = {} exceeds n = {}",
                self.k_per_set / 2,
                self.n
            )));
        }
        if self.s_anchors < 3 {
            return Err(Error::Validation(format!("need at least 3 anchors, got {}", self.s_anchors)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        self.camera()?;
        Ok(())
    }

    /// Applies `key=value` overrides. `k_ratio` is resolved against the
    /// final `n`; an explicit `k_per_set` wins over it.
    pub fn apply_key_values(&mut self, text: &str) -> Result<()> {
        let kv = nif::parse_key_values(text)?;
        let mut k_ratio = None;
        if kv.contains_key("n") && self.n > 0 {
            k_ratio = Some(self.k_per_set as f64 / self.n as f64);
        }
        for (k, v) in &kv {
            match k.as_str() {
                "n" => self.n = parse_value(k, v)?,
                "oversampling" => self.oversampling = parse_value(k, v)?,
                "k_per_set" => {}
                "k_ratio" => k_ratio = Some(parse_value::<f64>(k, v)?),
                "s_anchors" | "anchors" => self.s_anchors = parse_value(k, v)?,
                "bits" => self.bits = parse_value(k, v)?,
                "noise" | "noise_sigma" => self.noise_sigma = parse_value(k, v)?,
                "seed_probe" => self.seed_probe = parse_value(k, v)?,
                "seed_anchor" => self.seed_anchor = parse_value(k, v)?,
                "seed_tm" => self.seed_tm = parse_value(k, v)?,
                "seed_wf" => self.seed_wf = parse_value(k, v)?,
                "seed_scene" => self.seed_scene = parse_value(k, v)?,
                "alpha" => self.alpha = parse_value(k, v)?,
                "fill_fraction" => self.fill_fraction = parse_value(k, v)?,
                "out" => self.out = Some(PathBuf::from(v)),
                _ => return Err(Error::Format(format!("unknown config key `{k}`"))),
            }
        }
        if let Some(r) = k_ratio {
            if !(r > 0.0) {
                return Err(Error::Validation(format!("k_ratio must be positive, got {r}")));
            }
            self.k_per_set = k_for_ratio(self.n, r);
        }
        if let Some(v) = kv.get("k_per_set") {
            self.k_per_set = parse_value("k_per_set", v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// `(stage, seconds)` in [`STAGES`] order; stages not run are absent.
    pub timings: Vec<(String, f64)>,
    pub tm_rel_err: f64,
    pub img_rel_err: Option<f64>,
    /// Median over included rows of the per-row multilateration residual.
    pub median_row_residual: f64,
    pub max_row_residual: f64,
    pub excluded_rows: usize,
    pub flagged_rows: usize,
    pub unrecovered_columns: usize,
    /// Camera gain used for calibration and imaging.
    pub gain: f64,
}

impl RunReport {
    pub fn seconds(&self, stage: &str) -> f64 {
        self.timings.iter().filter(|(s, _)| s == stage).map(|(_, t)| t).sum()
    }

    pub fn compute_seconds(&self) -> f64 {
        COMPUTE_STAGES.iter().map(|s| self.seconds(s)).sum()
    }
}

#[derive(Default)]
struct StageClock {
    seconds: [f64; STAGES.len()],
    ran: [bool; STAGES.len()],
}

impl StageClock {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let i = STAGES.iter().position(|s| *s == stage).expect("known stage");
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.seconds[i] += t.elapsed().as_secs_f64();
        self.ran[i] = true;
        out
    }

    fn report(&self) -> Vec<(String, f64)> {
        STAGES
            .iter()
            .zip(self.seconds.iter().zip(&self.ran))
            .filter(|(_, (_, &ran))| ran)
            .map(|(s, (&t, _))| (s.to_string(), t))
            .collect()
    }
}

/// Everything designed and simulated for one calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationSetup {
    pub opu: SimulatedOPU,
    pub probes: [ProbeSet; 2],
    pub anchors: [AnchorSet; 2],
}

pub fn setup(config: &ExperimentConfig) -> Result<CalibrationSetup> {
    config.validate()?;
    let (p1, p2) = design_dual_probe_sets(config.n, config.k_per_set, config.seed_probe)
        .map_err(|e| e.in_stage("probe-design"))?;
    let a1 = design_anchor_pyramid(std::slice::from_ref(&p1), config.s_anchors, config.fill_fraction, config.seed_anchor)
        .map_err(|e| e.in_stage("anchor-design"))?;
    let a2 = design_anchor_pyramid(
        std::slice::from_ref(&p2),
        config.s_anchors,
        config.fill_fraction,
        config.seed_anchor.wrapping_add(1),
    )
    .map_err(|e| e.in_stage("anchor-design"))?;
    let opu = new_opu(config.m_rows(), config.n, config.seed_tm, config.camera()?).map_err(|e| e.in_stage("simulate"))?;
    Ok(CalibrationSetup {
        opu,
        probes: [p1, p2],
        anchors: [a1, a2],
    })
}

fn row_blocks(m_rows: usize, k: usize, s_count: usize) -> Vec<Range<usize>> {
    let per_row = (k * s_count).max(1);
    let block = (BLOCK_VALUES / per_row).clamp(1, m_rows.max(1));
    (0..m_rows).step_by(block).map(|a| a..(a + block).min(m_rows)).collect()
}

/// Camera gain mapping the brightest calibration intensity to the top
/// level, 1 without quantization.
fn calibration_gain(setup: &CalibrationSetup) -> Result<f64> {
    let camera = setup.opu.camera();
    if camera.max_level().is_none() {
        return Ok(camera.gain);
    }
    let m_rows = setup.opu.m_rows();
    let mut peak: f64 = 0.0;
    for (p, a) in setup.probes.iter().zip(&setup.anchors) {
        for rows in row_blocks(m_rows, p.k(), a.s_count()) {
            peak = peak.max(setup.opu.calibration_intensities(p, a, rows)?.max_value());
        }
    }
    Ok(camera.with_gain_for_peak(peak).gain)
}

struct SetOutcome {
    partial: PartialTM,
    row_residuals: Vec<f64>,
    excluded: usize,
}

fn calibrate_set(
    opu: &SimulatedOPU,
    probes: &ProbeSet,
    anchors: &AnchorSet,
    alpha: f64,
    clock: &mut StageClock,
) -> Result<SetOutcome> {
    let m_rows = opu.m_rows();
    let h = probes.half_k();
    let gain = opu.camera().gain;
    let mut columns = CMatrix::zeros((m_rows, h));
    let mut row_residuals = Vec::with_capacity(m_rows);
    let mut excluded = 0;
    for rows in row_blocks(m_rows, probes.k(), anchors.s_count()) {
        let bundle: IntensityBundle = clock.time("measure", || {
            let mut b = opu.measure_calibration(probes, anchors, rows.clone(), probes.set_id() as u64)?;
            for m in 0..b.rows() {
                b.map_row_inplace(m, |v| v / gain);
            }
            Ok(b)
        })?;
        let constellation = clock.time("mds", || localize_anchors(&build_distance_matrices(&bundle)?))?;
        let phased = clock.time("multilaterate", || recover_all_phases(&bundle, &constellation))?;
        let part = clock.time("invert", || recover_tm_fft(&phased, probes, alpha))?;
        columns.slice_mut(s![rows.clone(), ..]).assign(&part.columns);
        row_residuals.extend(phased.row_median_residuals());
        excluded += phased.excluded_rows.len();
    }
    Ok(SetOutcome {
        partial: PartialTM {
            columns,
            column_indices: probes.nonzero_rows().to_vec(),
            source_id: probes.set_id(),
        },
        row_residuals,
        excluded,
    })
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub setup: CalibrationSetup,
    pub recovered: RecoveredTM,
    pub report: RunReport,
}

/// Calibrates the simulated medium with two probe sets and merges the
/// results. Writes outputs when `config.out` is set.
pub fn run_calibration(config: &ExperimentConfig) -> Result<CalibrationRun> {
    let mut clock = StageClock::default();
    let mut setup = setup(config)?;
    let gain = clock.time("measure", || calibration_gain(&setup))?;
    setup.opu = setup.opu.with_camera(CameraModel { gain, ..setup.opu.camera() })?;

    let mut outcomes = Vec::with_capacity(2);
    for (p, a) in setup.probes.iter().zip(&setup.anchors) {
        outcomes.push(calibrate_set(&setup.opu, p, a, config.alpha, &mut clock)?);
    }
    let recovered = clock.time("merge", || align_and_merge(&outcomes[0].partial, &outcomes[1].partial, config.n))?;
    let tm_rel_err = tm_relative_error(&recovered.entries, setup.opu.tm().entries())?;

    let residuals: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.row_residuals.iter().copied())
        .filter(|r| !r.is_nan())
        .collect();
    let report = RunReport {
        timings: clock.report(),
        tm_rel_err,
        img_rel_err: None,
        median_row_residual: median(residuals.clone()),
        max_row_residual: residuals.iter().copied().fold(0.0, f64::max),
        excluded_rows: outcomes.iter().map(|o| o.excluded).sum(),
        flagged_rows: recovered.flagged_rows.len(),
        unrecovered_columns: recovered.unrecovered_columns.len(),
        gain,
    };
    let run = CalibrationRun {
        setup,
        recovered,
        report,
    };
    if let Some(dir) = &config.out {
        write_calibration(dir, config, &run)?;
    }
    Ok(run)
}

pub const TM_FILE: &str = "tm.nif";
pub const META_FILE: &str = "meta.txt";

fn write_calibration(dir: &Path, config: &ExperimentConfig, run: &CalibrationRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    nif::save_complex(&dir.join(TM_FILE), &run.recovered.entries)?;
    for (i, (p, a)) in run.setup.probes.iter().zip(&run.setup.anchors).enumerate() {
        std::fs::write(dir.join(format!("probes{}.txt", i + 1)), nif::probe_sidecar(p))?;
        std::fs::write(dir.join(format!("anchors{}.txt", i + 1)), nif::anchor_sidecar(a))?;
    }
    std::fs::write(dir.join(META_FILE), meta_text(config, run.report.gain))?;
    nif::write_timings(BufWriter::new(File::create(dir.join("timings.csv"))?), &run.report.timings)?;
    let rows: Vec<RowReport> = run
        .recovered
        .alignments
        .iter()
        .enumerate()
        .map(|(m, a)| RowReport {
            row_index: m,
            residual: a.residual,
            conjugate: a.conjugate,
            phase: a.phase,
        })
        .collect();
    nif::write_row_report(BufWriter::new(File::create(dir.join("rows.csv"))?), &rows)?;
    Ok(())
}

/// Run parameters plus the camera gain, as `key=value` lines that
/// [`ExperimentConfig::apply_key_values`] accepts after removing `gain`.
pub fn meta_text(config: &ExperimentConfig, gain: f64) -> String {
    format!(
        "n={}\noversampling={}\nk_per_set={}\ns_anchors={}\nbits={}\nnoise={}\nseed_probe={}\nseed_anchor={}\nseed_tm={}\nseed_wf={}\nseed_scene={}\nalpha={}\nfill_fraction={}\ngain={}\n",
        config.n,
        config.oversampling,
        config.k_per_set,
        config.s_anchors,
        config.bits,
        config.noise_sigma,
        config.seed_probe,
        config.seed_anchor,
        config.seed_tm,
        config.seed_wf,
        config.seed_scene,
        config.alpha,
        config.fill_fraction,
        gain
    )
}

/// Reads a meta file back into a config and gain.
pub fn parse_meta(text: &str) -> Result<(ExperimentConfig, f64)> {
    let kv = nif::parse_key_values(text)?;
    let gain = kv
        .get("gain")
        .ok_or_else(|| Error::Format("meta file has no `gain`".into()))
        .and_then(|v| parse_value("gain", v))?;
    let rest: String = kv
        .iter()
        .filter(|(k, _)| k.as_str() != "gain")
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let mut config = ExperimentConfig::default();
    config.apply_key_values(&rest)?;
    Ok((config, gain))
}

/// Random binary scene with roughly half the pixels on.
pub fn random_scene(n: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.gen_bool(0.5) as u8).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagingRun {
    pub x: Vec<Complex64>,
    pub trace: Vec<LossRecord>,
    pub img_rel_err: Option<f64>,
    pub measurement_residual: f64,
    pub seconds: f64,
}

/// Measures `scene` through the true medium with the calibration camera
/// and reconstructs it with the estimated TM.
pub fn run_imaging(opu: &SimulatedOPU, tm_estimate: &CMatrix, scene: &[u8], wf_seed: u64) -> Result<ImagingRun> {
    if scene.len() != opu.n_cols() || tm_estimate.ncols() != opu.n_cols() || tm_estimate.nrows() != opu.m_rows() {
        return Err(Error::Dimension(format!(
            "scene of length {}, TM estimate {:?}, simulator {} x {}",
            scene.len(),
            tm_estimate.dim(),
            opu.m_rows(),
            opu.n_cols()
        )));
    }
    let input = BinaryMatrix::from_shape_vec((scene.len(), 1), scene.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let gain = opu.camera().gain;
    let b: Vec<f64> = opu.measure(&input)?.iter().map(|v| v / gain).collect();
    let truth: Vec<f64> = scene.iter().map(|&v| v as f64).collect();
    let task = ImagingTask::new(tm_estimate.clone(), b, Some(truth.clone()))?;
    let config = WFConfig::for_signal_len(scene.len()).with_seed(wf_seed);
    let t = Instant::now();
    let out = wf_reconstruct(&task, &config).map_err(|e| e.in_stage("wf"))?;
    let seconds = t.elapsed().as_secs_f64();
    let img_rel_err = match signal_relative_error(&out.x, &truth) {
        Ok(e) => Some(e),
        Err(Error::ZeroReference) => None,
        Err(e) => return Err(e),
    };
    Ok(ImagingRun {
        measurement_residual: measurement_residual(&task.tm, &task.intensities, &out.x),
        x: out.x,
        trace: out.trace,
        img_rel_err,
        seconds,
    })
}

/// Calibration followed by imaging of the configured random scene.
pub fn run_calibrate_and_image(config: &ExperimentConfig) -> Result<(CalibrationRun, ImagingRun)> {
    let mut cal = run_calibration(config)?;
    let scene = random_scene(config.n, config.seed_scene);
    let img = run_imaging(&cal.setup.opu, &cal.recovered.entries, &scene, config.seed_wf)?;
    cal.report.img_rel_err = img.img_rel_err;
    cal.report.timings.push(("wf".into(), img.seconds));
    if let Some(dir) = &config.out {
        nif::write_loss_trace(BufWriter::new(File::create(dir.join("loss.csv"))?), &img.trace)?;
        nif::write_timings(BufWriter::new(File::create(dir.join("timings.csv"))?), &cal.report.timings)?;
    }
    Ok((cal, img))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSweep {
    pub ns: Vec<usize>,
    pub oversamplings: Vec<usize>,
    /// `K / N` per probe set.
    pub k_ratio: f64,
    /// Also reconstruct a scene and report its error.
    pub with_imaging: bool,
}

/// Times calibration over the sweep after one discarded warm-up run.
/// `seconds_total` counts [`COMPUTE_STAGES`] only; `img_rel_err` is `NaN`
/// without imaging.
pub fn run_bench(base: &ExperimentConfig, sweep: &BenchSweep) -> Result<Vec<SweepRow>> {
    let configs: Vec<ExperimentConfig> = sweep
        .ns
        .iter()
        .flat_map(|&n| {
            sweep.oversamplings.iter().map(move |&os| ExperimentConfig {
                n,
                oversampling: os,
                k_per_set: k_for_ratio(n, sweep.k_ratio),
                out: None,
                ..base.clone()
            })
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let Some(first) = configs.first() else {
        return Ok(Vec::new());
    };
    run_calibration(first)?;
    configs
        .iter()
        .map(|c| {
            let (report, img) = if sweep.with_imaging {
                let (cal, _) = run_calibrate_and_image(c)?;
                let img = cal.report.img_rel_err.unwrap_or(f64::NAN);
                (cal.report, img)
            } else {
                (run_calibration(c)?.report, f64::NAN)
            };
            Ok(SweepRow {
                n: c.n,
                oversampling: c.oversampling,
                tm_rel_err: report.tm_rel_err,
                img_rel_err: img,
                seconds_total: report.compute_seconds(),
            })
        })
        .collect()
}

/// Writes the true TM, probe and anchor sidecars and the measurement plan
/// patterns of each set.
pub fn run_simulate(config: &ExperimentConfig, dir: &Path) -> Result<CalibrationSetup> {
    let setup = setup(config)?;
    std::fs::create_dir_all(dir)?;
    nif::save_complex(&dir.join("tm_true.nif"), setup.opu.tm().entries())?;
    for (i, (p, a)) in setup.probes.iter().zip(&setup.anchors).enumerate() {
        std::fs::write(dir.join(format!("probes{}.txt", i + 1)), nif::probe_sidecar(p))?;
        std::fs::write(dir.join(format!("anchors{}.txt", i + 1)), nif::anchor_sidecar(a))?;
        let plan = crate::probes::measurement_plan(p, a)?;
        nif::save_byte(&dir.join(format!("plan{}.nif", i + 1)), plan.patterns())?;
    }
    std::fs::write(dir.join(META_FILE), meta_text(config, 1.0))?;
    Ok(setup)
}

/// Loads a TM estimate and the scene, if given, as an `N × 1` u8 NIF1 file.
pub fn load_scene(path: &Path, n: usize) -> Result<Vec<u8>> {
    let m: Array2<u8> = nif::load_matrix(path)?.into_byte()?;
    if m.len() != n || m.iter().any(|&v| v > 1) {
        return Err(Error::Dimension(format!(
            "scene must be {n} binary pixels, got {:?}",
            m.dim()
        )));
    }
    Ok(m.iter().copied().collect())
}
