use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use numint_core::experiment::{
    self, k_for_ratio, parse_meta, run_bench, run_calibrate_and_image, run_calibration, run_imaging, run_simulate,
    BenchSweep, ExperimentConfig, RunReport,
};
use numint_core::nif;
use numint_core::opu::CameraModel;
use numint_core::{Error, Result};

/// Transmission matrix calibration and imaging against a simulated medium.
#[derive(Parser)]
#[command(name = "numint", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the simulated medium and write the recovered TM.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Also image a random scene through the recovered TM.
        #[arg(long)]
        image: bool,
    },
    /// Image a scene through a previously calibrated TM.
    Image {
        #[command(flatten)]
        common: Common,
        /// Calibration output directory (holds tm.nif and meta.txt).
        #[arg(long)]
        tm_dir: PathBuf,
        /// N x 1 u8 NIF1 scene; a random scene is used when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Time calibration over a sweep and write a CSV table.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Signal sizes, comma separated.
        #[arg(long, default_value = "256,1024", value_parser = parse_sizes)]
        ns: Sizes,
        /// Oversampling factors, comma separated.
        #[arg(long, default_value = "4,8,16", value_parser = parse_sizes)]
        oversamplings: Sizes,
        /// Reconstruct a scene per point and report its error.
        #[arg(long)]
        imaging: bool,
    },
    /// Write the true TM, probe/anchor sidecars and measurement plans.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Debug)]
struct Sizes(Vec<usize>);

/// Comma-separated positive integers; an empty string is an empty list.
fn parse_sizes(s: &str) -> std::result::Result<Sizes, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("not a size: {t:?}")))
        .collect::<std::result::Result<_, _>>()
        .map(Sizes)
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    n: Option<usize>,
    /// Measurements per unknown, M / N.
    #[arg(long)]
    oversampling: Option<usize>,
    /// Probes per set relative to N; rounded to an even count.
    #[arg(long)]
    k_ratio: Option<f64>,
    #[arg(long)]
    anchors: Option<usize>,
    /// Camera bit depth, 0 for exact intensities.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed_probe: Option<u64>,
    #[arg(long)]
    seed_anchor: Option<u64>,
    #[arg(long)]
    seed_tm: Option<u64>,
    #[arg(long)]
    seed_wf: Option<u64>,
    #[arg(long)]
    seed_scene: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file; its entries override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(n => n, oversampling => oversampling, anchors => s_anchors, bits => bits, noise => noise_sigma,
             seed_probe => seed_probe, seed_anchor => seed_anchor, seed_tm => seed_tm, seed_wf => seed_wf,
             seed_scene => seed_scene);
        if let Some(r) = self.k_ratio {
            c.k_per_set = k_for_ratio(c.n, r);
        } else if self.n.is_some() {
            c.k_per_set = k_for_ratio(c.n, 1.5);
        }
        if let Some(out) = &self.out {
            c.out = Some(out.clone());
        }
        if let Some(path) = &self.config {
            c.apply_key_values(&std::fs::read_to_string(path)?)?;
        }
        Ok(c)
    }

    fn k_ratio(&self) -> f64 {
        self.k_ratio.unwrap_or(1.5)
    }
}

fn print_report(r: &RunReport) -> io::Result<()> {
    let mut out = io::stdout().lock();
    for (stage, secs) in &r.timings {
        writeln!(out, "time_{stage}={secs:.6}")?;
    }
    writeln!(out, "tm_rel_err={:e}", r.tm_rel_err)?;
    if let Some(e) = r.img_rel_err {
        writeln!(out, "img_rel_err={e:e}")?;
    }
    writeln!(out, "median_row_residual={:e}", r.median_row_residual)?;
    writeln!(out, "max_row_residual={:e}", r.max_row_residual)?;
    writeln!(out, "excluded_rows={}", r.excluded_rows)?;
    writeln!(out, "flagged_rows={}", r.flagged_rows)?;
    writeln!(out, "unrecovered_columns={}", r.unrecovered_columns)?;
    writeln!(out, "gain={:e}", r.gain)
}

fn image(common: &Common, tm_dir: &Path, scene: Option<&Path>) -> Result<()> {
    let (meta, gain) = parse_meta(&std::fs::read_to_string(tm_dir.join(experiment::META_FILE))?)?;
    let config = common.resolve(meta)?;
    let tm = nif::load_matrix(&tm_dir.join(experiment::TM_FILE))?.into_complex()?;
    let setup = experiment::setup(&config)?;
    let opu = setup.opu.with_camera(CameraModel { gain, ..setup.opu.camera() })?;
    let scene = match scene {
        Some(p) => experiment::load_scene(p, config.n)?,
        None => experiment::random_scene(config.n, config.seed_scene),
    };
    let run = run_imaging(&opu, &tm, &scene, config.seed_wf)?;
    let mut out = io::stdout().lock();
    writeln!(out, "time_wf={:.6}", run.seconds)?;
    match run.img_rel_err {
        Some(e) => writeln!(out, "img_rel_err={e:e}")?,
        None => writeln!(out, "img_rel_err=undefined")?,
    }
    writeln!(out, "measurement_residual={:e}", run.measurement_residual)?;
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir)?;
        let x = numint_core::CMatrix::from_shape_fn((run.x.len(), 1), |(i, _)| run.x[i]);
        nif::save_complex(&dir.join("image.nif"), &x)?;
        nif::write_loss_trace(BufWriter::new(File::create(dir.join("loss.csv"))?), &run.trace)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { common, image } => {
            let config = common.resolve(ExperimentConfig::default())?;
            let report = if image {
                run_calibrate_and_image(&config)?.0.report
            } else {
                run_calibration(&config)?.report
            };
            print_report(&report)?;
        }
        Command::Image { common, tm_dir, scene } => image(&common, &tm_dir, scene.as_deref())?,
        Command::Bench {
            common,
            ns,
            oversamplings,
            imaging,
        } => {
            let base = common.resolve(ExperimentConfig::default())?;
            let sweep = BenchSweep {
                ns: ns.0,
                oversamplings: oversamplings.0,
                k_ratio: common.k_ratio(),
                with_imaging: imaging,
            };
            let rows = run_bench(&base, &sweep)?;
            match &base.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    nif::write_sweep(BufWriter::new(File::create(dir.join("bench.csv"))?), &rows)?;
                }
                None => nif::write_sweep(io::stdout().lock(), &rows)?,
            }
        }
        Command::Simulate { common } => {
            let config = common.resolve(ExperimentConfig::default())?;
            let dir = config
                .out
                .clone()
                .ok_or_else(|| Error::Validation("simulate requires --out".into()))?;
            run_simulate(&config, &dir)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NUMINT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("NUMINT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
