mod config;
mod io;

use clap::{Args, Parser, Subcommand};
use config::{ExperimentConfig, SchemeName};
use io::{
    file_entries, projection_sidecar, read_json, sha256_str, volume_sidecar, write_alignment_csv, write_csv_file, write_json,
    write_metrics_csv, write_raw, Manifest, ReportFile, Seeds,
};
use log::info;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tomoalign::align::com_prealign;
use tomoalign::driver::DriverError;
use tomoalign::phantom::{make_misalignment, make_phantom, simulate_data};
use tomoalign::recon::{choose_alpha, reconstruct};
use tomoalign::{AlignStack, ProjectionStack, Projector, ReconConfig, ReconMethod, Truth, Volume};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "tomoalign", version, about = "Joint tomographic alignment and reconstruction")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single worker thread, so repeated runs are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long = "config", value_name = "PATH")]
    config_flag: Option<PathBuf>,
    #[arg(value_name = "CONFIG", conflicts_with = "config_flag")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides the phantom, misalignment and noise seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Interpolation scheme of the reconstruction model.
    #[arg(long, value_enum)]
    scheme: Option<SchemeName>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the phantom volume.
    Phantom(ExperimentArgs),
    /// Phantom, misalignment and simulated projections.
    Simulate(ExperimentArgs),
    /// Full experiment: simulate, then jointly align and reconstruct.
    Run(ExperimentArgs),
    /// Print the per-iteration metrics of a run as CSV.
    Metrics {
        /// `report.json` or the run directory containing it.
        report: PathBuf,
    },
    /// Write plot-ready CSV files from a run report.
    ExportPlots {
        report: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

struct Context {
    command: &'static str,
    cfg: ExperimentConfig,
    out: PathBuf,
    threads: usize,
    deterministic: bool,
    files: Vec<PathBuf>,
}

impl Context {
    fn new(command: &'static str, args: &ExperimentArgs, threads: usize, deterministic: bool) -> Result<Self, CliError> {
        let path = args
            .config_flag
            .as_ref()
            .or(args.config.as_ref())
            .ok_or_else(|| CliError::Schema("missing: pass a config file".into()))?;
        let mut cfg = ExperimentConfig::load(path)?.with_seed(args.seed);
        if let Some(s) = args.scheme {
            cfg.reconstruction.scheme = s;
        }
        let out = args
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("tomoalign-out"));
        cfg.output_dir = Some(out.clone());
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        Ok(Self {
            command,
            cfg,
            out,
            threads,
            deterministic,
            files: Vec::new(),
        })
    }

    fn volume(&mut self, stem: &str, u: &Volume<f64>) -> Result<(), CliError> {
        self.files.extend(write_raw(&self.out, stem, u.data(), volume_sidecar(u))?);
        Ok(())
    }

    fn projections(&mut self, stem: &str, p: &ProjectionStack<f64>) -> Result<(), CliError> {
        let n = self.cfg.phantom.n;
        self.files.extend(write_raw(&self.out, stem, &p.images, projection_sidecar(p, [n, n]))?);
        Ok(())
    }

    fn alignment(&mut self, name: &str, a: &AlignStack<f64>) -> Result<(), CliError> {
        let path = self.out.join(name);
        write_csv_file(&path, |f| write_alignment_csv(f, a))?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, alpha: Option<f64>) -> Result<(), CliError> {
        let config = serde_json::to_value(&self.cfg).map_err(|e| CliError::Io(e.to_string()))?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            config_sha256: sha256_str(&config.to_string()),
            config,
            seeds: Seeds {
                phantom: self.cfg.phantom.seed,
                misalignment: self.cfg.misalignment.seed,
                noise: self.cfg.simulation.noise_seed,
            },
            threads: self.threads,
            deterministic: self.deterministic,
            alpha,
            files: file_entries(&self.out, &self.files)?,
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        info!("wrote {} files to {}", self.files.len() + 1, self.out.display());
        Ok(())
    }
}

struct Simulated {
    truth: Volume<f64>,
    a_true: AlignStack<f64>,
    data: ProjectionStack<f64>,
}

fn simulate(ctx: &Context) -> Result<Simulated, CliError> {
    let cfg = &ctx.cfg;
    let truth = make_phantom::<f64>(&cfg.phantom);
    let a_true = make_misalignment(&cfg.nominal_angles(), &cfg.misalignment).map_err(|e| CliError::Numerical(e.to_string()))?;
    let data = simulate_data(
        &truth,
        &a_true,
        cfg.simulation.scheme.scheme(),
        cfg.simulation.noise_sigma,
        cfg.roi(),
        cfg.simulation.noise_seed,
    );
    info!(
        "simulated {} projections of {}x{} pixels",
        data.n_proj(),
        data.width,
        data.height
    );
    Ok(Simulated { truth, a_true, data })
}

fn cmd_phantom(mut ctx: Context) -> Result<(), CliError> {
    let u = make_phantom::<f64>(&ctx.cfg.phantom);
    ctx.volume("phantom", &u)?;
    ctx.finish(None)
}

fn cmd_simulate(mut ctx: Context) -> Result<(), CliError> {
    let s = simulate(&ctx)?;
    ctx.volume("phantom", &s.truth)?;
    ctx.projections("projections", &s.data)?;
    ctx.alignment("alignment_true.csv", &s.a_true)?;
    ctx.finish(None)
}

fn driver_error(e: DriverError<f64>) -> CliError {
    match e {
        DriverError::Config(c) => CliError::Schema(format!("at `driver`: {c}")),
        other => CliError::Numerical(other.to_string()),
    }
}

fn cmd_run(mut ctx: Context) -> Result<(), CliError> {
    let s = simulate(&ctx)?;
    let cfg = &ctx.cfg;
    let proj = Projector::new(cfg.shape(), cfg.nominal_angles(), cfg.reconstruction.scheme.scheme(), cfg.roi())
        .map_err(|e| CliError::Schema(format!("at `acquisition`: {e}")))?;
    let alpha = cfg
        .reconstruction
        .alpha
        .unwrap_or_else(|| choose_alpha(cfg.reconstruction.alpha_delta, &proj));
    info!("regularization weight {alpha:.6e}");

    let reference_cfg = ReconConfig {
        alpha,
        epsilon: 1e-8,
        max_iter: cfg.reconstruction.max_iter,
        method: ReconMethod::Cg,
        nonneg: false,
        ..ReconConfig::default()
    };
    let reference = reconstruct(&proj, &s.data, &s.a_true, &reference_cfg, None)
        .map_err(|e| CliError::Numerical(format!("reference reconstruction: {e}")))?
        .volume;

    let a0 = if cfg.driver.com_prealign {
        com_prealign(&s.data, proj.detector()).map_err(|e| CliError::Numerical(e.to_string()))?
    } else {
        AlignStack::zeros(cfg.nominal_angles())
    };
    let weights = cfg.weights();
    let dcfg = cfg.driver_config(alpha, weights);
    let truth = Truth {
        volume: Some(reference.clone()),
        align: Some(s.a_true.clone()),
    };
    let report = tomoalign::run_joint(&proj, &s.data, &a0, &dcfg, Some(&truth)).map_err(driver_error)?;
    if let Some(last) = report.records.last() {
        info!(
            "stopped ({:?}) after {} iterations, max increment {:.3e}",
            report.stop,
            report.records.len(),
            last.max_increment
        );
    }

    ctx.volume("phantom", &s.truth)?;
    ctx.projections("projections", &s.data)?;
    ctx.volume("reference", &reference)?;
    ctx.volume("reconstruction", &report.volume)?;
    ctx.alignment("alignment.csv", &report.align)?;
    ctx.alignment("alignment_true.csv", &s.a_true)?;
    let metrics = ctx.out.join("metrics.csv");
    write_csv_file(&metrics, |f| write_metrics_csv(f, &report.records))?;
    ctx.files.push(metrics);
    let file = ReportFile {
        alpha,
        stop: report.stop,
        weights: report.weights,
        records: report.records,
        alignment: report.align,
        true_alignment: Some(s.a_true),
    };
    let report_path = ctx.out.join("report.json");
    write_json(&report_path, &file)?;
    ctx.files.push(report_path);
    ctx.finish(Some(alpha))
}

fn load_report(path: &Path) -> Result<ReportFile, CliError> {
    let path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    if !path.is_file() {
        return Err(CliError::Io(format!("{}: no such report", path.display())));
    }
    read_json(&path)
}

fn cmd_metrics(report: &Path) -> Result<(), CliError> {
    let r = load_report(report)?;
    write_metrics_csv(std::io::stdout().lock(), &r.records).map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_export_plots(report: &Path, out: &Path) -> Result<(), CliError> {
    let r = load_report(report)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_csv_file(&out.join("metrics.csv"), |f| write_metrics_csv(f, &r.records))?;
    write_csv_file(&out.join("alignment.csv"), |f| write_alignment_csv(f, &r.alignment))?;
    if let Some(t) = &r.true_alignment {
        write_csv_file(&out.join("alignment_true.csv"), |f| write_alignment_csv(f, t))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let threads = if cli.deterministic { 1 } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    let threads = rayon::current_num_threads();
    let det = cli.deterministic;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(Context::new("phantom", a, threads, det)?),
        Command::Simulate(a) => cmd_simulate(Context::new("simulate", a, threads, det)?),
        Command::Run(a) => cmd_run(Context::new("run", a, threads, det)?),
        Command::Metrics { report } => cmd_metrics(report),
        Command::ExportPlots { report, out } => cmd_export_plots(report, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOMOALIGN_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tomoalign: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
