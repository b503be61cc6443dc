//! Command-line driver: `simulate`, `invert`, `bench` and `render`.

mod bench;
mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use bench::{BenchRow, BenchSpec};
pub use config::{GridSpec, ModelSource, RunConfig, VelocityBounds};

use crate::error::{Error, Result};
use crate::formats::{decode_data, encode_data, encode_model, model_section, read_model, render_pgm, write_model, DataFile};
use crate::inversion::{run_inversion, synthesize, InversionMode, InversionState, ObservedData};
use crate::mesh::{slowness_squared_to_velocity, RegularGrid};

#[derive(Debug, Parser)]
#[command(name = "seistomo", version, about = "Joint waveform inversion and travel-time tomography")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// fwi_only, tomo_then_fwi or joint_two_stage.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate noisy waveform and travel-time data for the truth model.
    Simulate,
    /// Invert observed data starting from the start model.
    Invert,
    /// Time the multigrid solvers for several block sizes.
    Bench,
    /// Render a JSSM1 model as a PGM image.
    Render {
        model: PathBuf,
        /// Index along the middle axis for 3D models.
        #[arg(long)]
        slice: Option<usize>,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Convergence { .. } | Error::Breakdown { .. } | Error::Factorization(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = Some(InversionMode::parse(m).map_err(|e| Error::Config(e.to_string()))?);
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Render { model, slice } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| model.with_extension("pgm"));
        return cmd_render(model, *slice, &out);
    }
    let cfg = load_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate => cmd_simulate(&cfg).map(|_| ()),
        Command::Invert => cmd_invert(&cfg).map(|_| ()),
        Command::Bench => cmd_bench(&cfg).map(|_| ()),
        Command::Render { .. } => unreachable!(),
    })
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::from(e).context(&cfg.output.display().to_string()))?;
    fs::write(cfg.output.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn write_velocity(path: &Path, grid: &RegularGrid, m: &[f64]) -> Result<()> {
    write_model(path, grid, &slowness_squared_to_velocity(m)).map_err(|e| e.context(&path.display().to_string()))
}

fn write_snapshot(path: &Path, grid: &RegularGrid, m: &[f64]) -> Result<()> {
    let (section, w, h) = model_section(grid, &slowness_squared_to_velocity(m), None)?;
    fs::write(path, render_pgm(&section, w, h)?).map_err(|e| Error::from(e).context(&path.display().to_string()))
}

/// Writes `files` or none of them.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (i, (path, bytes)) in files.iter().enumerate() {
        if let Err(e) = fs::write(path, bytes) {
            for (p, _) in &files[..i] {
                let _ = fs::remove_file(p);
            }
            return Err(Error::from(e).context(&path.display().to_string()));
        }
    }
    Ok(())
}

/// Simulated, noisy data for the configured truth model; returns the data path.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    let survey = cfg.validate()?;
    let m_true = cfg.truth_model()?;
    let data = synthesize(&survey, &m_true, cfg.noise, cfg.seed, cfg.travel_times)?;
    prepare_output(cfg)?;
    let path = cfg.data_path();
    let file = DataFile { fwi: data.fwi, travel_times: data.travel_times };
    write_all(&[
        (path.clone(), encode_data(&file)?),
        (cfg.output.join("truth.jssm"), encode_model(survey.core(), &slowness_squared_to_velocity(&m_true))?),
    ])?;
    Ok(path)
}

/// Reads observed data and checks it against the survey.
pub fn load_data(cfg: &RunConfig, survey: &crate::inversion::Survey) -> Result<ObservedData> {
    let path = cfg.data_path();
    let bytes = fs::read(&path).map_err(|e| Error::from(e).context(&path.display().to_string()))?;
    let file = decode_data(&bytes).map_err(|e| e.context(&path.display().to_string()))?;
    let data = ObservedData::new(file.fwi, file.travel_times, cfg.noise);
    data.validate(survey).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(data)
}

/// Result of an inversion run.
#[derive(Clone, Debug)]
pub struct InversionRun {
    pub mode: InversionMode,
    pub state: InversionState,
    pub grid: RegularGrid,
}

pub fn cmd_invert(cfg: &RunConfig) -> Result<InversionRun> {
    let survey = cfg.validate()?;
    let mode = cfg.mode.unwrap_or(InversionMode::JointTwoStage);
    let data = load_data(cfg, &survey)?;
    if mode != InversionMode::FwiOnly && data.travel_times.is_none() {
        return Err(Error::Config(format!("mode {} needs travel-time data", mode.name())));
    }
    let m0 = cfg.start_model()?;
    let mut state = InversionState::new(m0, cfg.model_bounds()?).map_err(|e| Error::Config(e.to_string()))?;
    prepare_output(cfg)?;
    let grid = survey.core().clone();
    let checkpoints = cfg.output.join("checkpoints");
    fs::create_dir_all(&checkpoints)?;
    let snapshots = cfg.output.join("snapshots");
    if cfg.snapshots {
        fs::create_dir_all(&snapshots)?;
    }
    write_velocity(&cfg.output.join("model_start.jssm"), &grid, &state.m)?;
    let mut csv = BufWriter::new(File::create(cfg.output.join("history.csv"))?);
    writeln!(csv, "{}", crate::inversion::HistoryRow::CSV_HEADER)?;
    let mut observer = |row: &crate::inversion::HistoryRow, m: &[f64]| -> Result<()> {
        writeln!(csv, "{}", row.to_csv())?;
        csv.flush()?;
        let stem = format!("iter_{:04}", row.iter);
        write_velocity(&checkpoints.join(format!("{stem}.jssm")), &grid, m)?;
        if cfg.snapshots {
            write_snapshot(&snapshots.join(format!("{stem}.pgm")), &grid, m)?;
        }
        Ok(())
    };
    run_inversion(mode, &mut state, &survey, &data, &cfg.schedule, &mut observer)?;
    drop(csv);
    write_velocity(&cfg.output.join("model_final.jssm"), &grid, &state.m)?;
    write_snapshot(&cfg.output.join("model_final.pgm"), &grid, &state.m)?;
    let mut stages = String::from("label,phi_fwi,phi_eik\n");
    for s in &state.stage_misfits {
        let eik = s.phi_eik.map_or(String::new(), |v| format!("{v:e}"));
        stages += &format!("{},{:e},{eik}\n", s.label, s.phi_fwi);
    }
    fs::write(cfg.output.join("stage_misfits.csv"), stages)?;
    Ok(InversionRun { mode, state, grid })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let spec = cfg.bench.clone().unwrap_or_default();
    spec.validate()?;
    prepare_output(cfg)?;
    let mut csv = BufWriter::new(File::create(cfg.output.join("bench.csv"))?);
    writeln!(csv, "{}", BenchRow::CSV_HEADER)?;
    spec.run(|row| {
        writeln!(csv, "{}", row.to_csv())?;
        csv.flush()?;
        Ok(())
    })
}

pub fn cmd_render(model: &Path, slice: Option<usize>, out: &Path) -> Result<()> {
    let (grid, v) = read_model(model).map_err(|e| e.context(&model.display().to_string()))?;
    let (section, w, h) = model_section(&grid, &v, slice)?;
    fs::write(out, render_pgm(&section, w, h)?).map_err(|e| Error::from(e).context(&out.display().to_string()))
}
