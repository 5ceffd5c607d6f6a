//! Command-line pipeline. Each stage reads and writes files so the stages
//! can be chained; every emitted file carries the resolved configuration and
//! the version stamp in its header.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chain::{Boundary, Sublattice};
use crate::error::{Error, Result};
use crate::io::{version_stamp, write_json, CsvTable};
use crate::lattice::{
    hubbard_parameters, lattice_header, measurement_matrix, solve_bands, wannier_function,
    LatticeSpec, ProbeMode, ProbeSpec,
};
use crate::model::{ground_state, MeasurementKind, Model, ModelSpec};
use crate::perturbative::{ratio_scan, scan_spectra_csv, scan_summary_csv, FrequencyGrid};
use crate::spectrum::{
    maximize_overlap_with, periodogram, OverlapSearch, PeriodogramOptions, Spectrum, Window,
};
use crate::sweep::{log_spaced, run_sweep, SweepPlan};
use crate::trajectory::{run_trajectory, MeasurementRecord, Scheme, TrajectoryConfig};

/// Default worker count for sweeps when `--workers` is absent.
pub const WORKERS_ENV: &str = "PHASESCOPE_WORKERS";

/// Largest dimension whose eigenvalues `model` prints by default.
const PRINT_EIGENVALUES_UP_TO: usize = 32;

#[derive(Debug, Parser)]
#[command(
    name = "phasescope",
    version,
    about = "Measurement-record phase diagnostics for the Bose-Hubbard chain"
)]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate the Fock basis.
    Basis(BasisArgs),
    /// Build and diagonalize the Hamiltonian and measurement operator.
    Model(ModelCmd),
    /// Perturbative spectra and Lorentzian fits over a U/J grid.
    Perturbative(PerturbativeCmd),
    /// Integrate one measured trajectory from the ground state.
    Trajectory(TrajectoryCmd),
    /// Periodogram of a record file.
    Psd(PsdCmd),
    /// Lorentzian-overlap fit of a spectrum file.
    Fit(FitCmd),
    /// Run or resume a (U/J, gamma) sweep.
    Sweep(SweepCmd),
    /// Wannier integrals and the probe measurement matrix.
    Lattice(LatticeCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Pop,
    Coh,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SublatticeArg {
    Even,
    Odd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BoundaryArg {
    Open,
    Periodic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Euler,
    SplitStep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeArg {
    HalfPeriod,
    ShiftedSamePeriod,
}

impl From<ProbeArg> for ProbeMode {
    fn from(p: ProbeArg) -> Self {
        match p {
            ProbeArg::HalfPeriod => ProbeMode::HalfPeriod,
            ProbeArg::ShiftedSamePeriod => ProbeMode::ShiftedSamePeriod,
        }
    }
}

/// Model options shared by every stage that builds a Hamiltonian. Flags
/// override the `model` section of `--config`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of sites.
    #[arg(long = "L", allow_negative_numbers = true)]
    pub sites: Option<i64>,
    /// Number of bosons.
    #[arg(long = "N", allow_negative_numbers = true)]
    pub particles: Option<i64>,
    /// Interaction ratio; `inf` selects J = 0.
    #[arg(long = "u-over-j", allow_negative_numbers = true)]
    pub u_over_j: Option<f64>,
    #[arg(long, value_enum)]
    pub measurement: Option<KindArg>,
    #[arg(long, value_enum)]
    pub sublattice: Option<SublatticeArg>,
    #[arg(long, value_enum)]
    pub boundary: Option<BoundaryArg>,
    /// Spectral span after rescaling.
    #[arg(long, conflicts_with = "no_rescale")]
    pub span: Option<f64>,
    /// Keep the bare J^2 + U^2 = 1 units.
    #[arg(long)]
    pub no_rescale: bool,
    /// Replace the idealized operator with the probe matrix at this lattice depth.
    #[arg(long, value_enum, requires = "depth")]
    pub probe: Option<ProbeArg>,
    /// Lattice depth in recoil energies for `--probe`.
    #[arg(long)]
    pub depth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BasisArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the occupation table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print every eigenvalue regardless of dimension.
    #[arg(long)]
    pub eigenvalues: bool,
    /// Directory for spectrum and operator CSV dumps.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbativeCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Explicit comma-separated U/J values.
    #[arg(long, value_delimiter = ',', conflicts_with = "u_grid")]
    pub u_values: Option<Vec<f64>>,
    /// Log-spaced grid `lo:hi:points`.
    #[arg(long, default_value = "0.2:50:12")]
    pub u_grid: String,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pop,coh")]
    pub kinds: Vec<KindArg>,
    #[arg(long, default_value_t = 40.0)]
    pub cap: f64,
    #[arg(long, default_value_t = 0.01)]
    pub spacing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub total_time: Option<f64>,
    /// Step; defaults to the scheme's policy.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// `ground` or `fock:n1,n2,...`.
    #[arg(long)]
    pub initial: Option<String>,
    /// Logging stride for the observable table.
    #[arg(long)]
    pub log_stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrajectoryCmd {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub trajectory: TrajectoryArgs,
    /// Record file.
    #[arg(long)]
    pub out: PathBuf,
    /// Observable log (M, H) file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PsdCmd {
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_mean_removal: bool,
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long)]
    pub hann: bool,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[arg(long)]
    pub psd: PathBuf,
    /// Smallest width scanned; defaults to one bin.
    #[arg(long)]
    pub width_lower: Option<f64>,
    #[arg(long)]
    pub width_upper: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    /// Plan JSON; see `--print-default-plan` for the schema.
    #[arg(long, required_unless_present = "print_default_plan")]
    pub plan: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_plan")]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to the PHASESCOPE_WORKERS variable.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write per-cell record files.
    #[arg(long)]
    pub save_records: bool,
    /// Print the desk-scale plan for `--L`/`--N` and exit.
    #[arg(long)]
    pub print_default_plan: bool,
    #[arg(long = "L", default_value_t = 6)]
    pub sites: usize,
    #[arg(long = "N", default_value_t = 6)]
    pub particles: usize,
}

#[derive(Debug, Args)]
pub struct LatticeCmd {
    #[arg(long, default_value_t = 5.0)]
    pub depth: f64,
    #[arg(long, default_value_t = 6)]
    pub sites: usize,
    #[arg(long, value_enum, default_value = "shifted-same-period")]
    pub probe: ProbeArg,
    #[arg(long, value_enum, default_value = "even")]
    pub sublattice: SublatticeArg,
    /// 1D interaction coupling in E_r / k_l.
    #[arg(long, default_value_t = 0.0)]
    pub coupling: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Probe matrix source for a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lattice: LatticeSpec,
    pub probe: ProbeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySettings {
    pub gamma: f64,
    pub total_time: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default = "default_log_stride")]
    pub log_stride: usize,
}

fn default_scheme() -> Scheme {
    Scheme::SplitStepExponential
}

fn default_log_stride() -> usize {
    crate::trajectory::DEFAULT_LOG_STRIDE
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            total_time: 2000.0,
            dt: None,
            scheme: default_scheme(),
            seed: 0,
            initial: InitialState::Ground,
            log_stride: default_log_stride(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialState {
    #[default]
    Ground,
    Fock {
        occupations: Vec<u16>,
    },
}

impl std::str::FromStr for InitialState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ground" {
            return Ok(Self::Ground);
        }
        let list = s.strip_prefix("fock:").ok_or_else(|| {
            Error::Parse(format!(
                "initial state `{s}`: expected `ground` or `fock:n1,n2,...`"
            ))
        })?;
        let occupations = list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u16>()
                    .map_err(|e| Error::Parse(format!("occupation `{t}`: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self::Fock { occupations })
    }
}

/// Resolved configuration of a run; the `--config` file uses the same schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<PeriodogramOptions>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(p) = &self.probe {
            p.lattice.validate()?;
            if p.lattice.num_sites != self.model.num_sites {
                return Err(Error::InvalidSpec(format!(
                    "probe lattice has {} sites, model has {}",
                    p.lattice.num_sites, self.model.num_sites
                )));
            }
        }
        if let Some(t) = &self.trajectory {
            if !(t.gamma >= 0.0 && t.gamma.is_finite())
                || !(t.total_time > 0.0)
                || t.log_stride == 0
            {
                return Err(Error::InvalidSpec(
                    "trajectory needs gamma >= 0, T > 0, stride >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Build the model, computing the probe matrix when one is configured.
    pub fn build_model(&self) -> Result<Model> {
        let mut spec = self.model.clone();
        if let Some(p) = &self.probe {
            let bloch = solve_bands(&p.lattice)?;
            let wannier = wannier_function(&bloch)?;
            spec.measurement_matrix = Some(measurement_matrix(&wannier, &p.probe)?);
        }
        Model::build(&spec)
    }

    pub fn model_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.model).unwrap_or_default());
        hasher.update(serde_json::to_vec(&self.probe).unwrap_or_default());
        hex::encode(hasher.finalize())
    }

    fn header(&self) -> Value {
        json!({ "version": version_stamp(), "config": self })
    }
}

fn positive_count(value: i64, name: &str) -> Result<usize> {
    if value < 1 {
        return Err(Error::InvalidSpec(format!(
            "{name} must be >= 1, got {value}"
        )));
    }
    Ok(value as usize)
}

/// Merge `--config` with command-line overrides into a validated config.
pub fn resolve_config(args: &ModelArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig {
            model: ModelSpec::new(6, 6, 1.0, MeasurementKind::Coherence),
            probe: None,
            trajectory: None,
            spectrum: None,
        },
    };
    let model = &mut config.model;
    if let Some(l) = args.sites {
        model.num_sites = positive_count(l, "L")?;
    }
    if let Some(n) = args.particles {
        model.num_particles = positive_count(n, "N")?;
    }
    if let Some(r) = args.u_over_j {
        model.u_over_j = r;
    }
    if let Some(b) = args.boundary {
        model.boundary = match b {
            BoundaryArg::Open => Boundary::Open,
            BoundaryArg::Periodic => Boundary::Periodic,
        };
    }
    let sublattice = args.sublattice.map(|s| match s {
        SublatticeArg::Even => Sublattice::Even,
        SublatticeArg::Odd => Sublattice::Odd,
    });
    match args.measurement {
        Some(KindArg::Coh) => model.measurement = MeasurementKind::Coherence,
        Some(KindArg::Pop) => {
            model.measurement = MeasurementKind::Population {
                sublattice: sublattice.unwrap_or_default(),
            }
        }
        None => {
            if let (Some(s), MeasurementKind::Population { .. }) = (sublattice, model.measurement) {
                model.measurement = MeasurementKind::Population { sublattice: s };
            }
        }
    }
    if args.no_rescale {
        model.rescale_span = None;
    }
    if let Some(span) = args.span {
        model.rescale_span = Some(span);
    }
    if let Some(mode) = args.probe {
        let depth = args.depth.unwrap_or(5.0);
        let mut probe = ProbeSpec::new(mode.into());
        if let MeasurementKind::Population { sublattice } = model.measurement {
            probe.sublattice = sublattice;
        }
        config.probe = Some(ProbeConfig {
            lattice: LatticeSpec::new(depth, model.num_sites),
            probe,
        });
    } else if let (Some(depth), Some(p)) = (args.depth, config.probe.as_mut()) {
        p.lattice.depth = depth;
    }
    if let Some(p) = config.probe.as_mut() {
        p.lattice.num_sites = config.model.num_sites;
    }
    config.validate()?;
    Ok(config)
}

/// Parse, dispatch and map errors to the exit-code contract: 0 success,
/// 1 invalid input or failure, 2 partial sweep.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if informational {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Basis(a) => cmd_basis(&a),
        Command::Model(a) => cmd_model(&a),
        Command::Perturbative(a) => cmd_perturbative(&a),
        Command::Trajectory(a) => cmd_trajectory(&a, seed),
        Command::Psd(a) => cmd_psd(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Sweep(a) => cmd_sweep(&a, seed),
        Command::Lattice(a) => cmd_lattice(&a),
    }
}

pub fn cmd_basis(args: &BasisArgs) -> Result<ExitCode> {
    let config = resolve_config(&args.model)?;
    let basis = config.model.basis()?;
    println!("dimension {}", basis.dim());
    if let Some(out) = &args.out {
        let columns: Vec<String> = (1..=basis.num_sites()).map(|j| format!("n{j}")).collect();
        let mut names = vec!["index"];
        names.extend(columns.iter().map(String::as_str));
        let mut table = CsvTable::new(config.header(), &names);
        for (i, state) in basis.states().iter().enumerate() {
            let mut row = vec![i as f64];
            row.extend(state.iter().map(|&n| n as f64));
            table.push(row);
        }
        table.write(out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn operator_table(op: &crate::fock::HermitianOperator, header: Value) -> CsvTable {
    let mut table = CsvTable::new(header, &["row", "col", "value"]);
    for r in 0..op.dim() {
        for (c, v) in op.row(r) {
            table.push(vec![r as f64, c as f64, v]);
        }
    }
    table
}

pub fn cmd_model(args: &ModelCmd) -> Result<ExitCode> {
    let config = resolve_config(&args.model)?;
    let model = config.build_model()?;
    let spectral = model.spectral()?;
    let energies = &spectral.eigenvalues;
    let span = energies[energies.len() - 1] - energies[0];
    let (hopping, interaction) = (model.hamiltonian.hopping, model.hamiltonian.interaction);
    println!("dimension {}", model.basis.dim());
    println!("hopping {hopping:.12} interaction {interaction:.12}");
    println!("bare span {:.12}", model.hamiltonian.bare_span);
    println!("rescale factor {:.12}", model.hamiltonian.rescale_factor);
    println!("spectral span {span:.12}");
    println!(
        "measurement {} raw norm {:.12} commutator {:.3e}",
        model.measurement.kind.tag(),
        model.measurement.raw_norm,
        model.measurement.commutator_check
    );
    if args.eigenvalues || energies.len() <= PRINT_EIGENVALUES_UP_TO {
        for e in energies {
            println!("{e:.12}");
        }
    }
    if let Some(dir) = &args.out {
        let header = json!({
            "version": version_stamp(),
            "config": config,
            "rescale_factor": model.hamiltonian.rescale_factor,
            "bare_span": model.hamiltonian.bare_span,
            "hopping": hopping,
            "interaction": interaction,
            "measurement_raw_norm": model.measurement.raw_norm,
            "measurement_commutator": model.measurement.commutator_check,
            "model_hash": config.model_hash(),
        });
        let mut spectrum = CsvTable::new(header.clone(), &["index", "energy"]);
        for (i, &e) in energies.iter().enumerate() {
            spectrum.push(vec![i as f64, e]);
        }
        spectrum.write(&dir.join("spectrum.csv"))?;
        operator_table(&model.hamiltonian.operator, header.clone())
            .write(&dir.join("hamiltonian.csv"))?;
        operator_table(&model.measurement.operator, header).write(&dir.join("measurement.csv"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Parse(format!("grid `{text}`: expected lo:hi:points"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let points: usize = parts[2].parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && points >= 1) {
        return Err(bad());
    }
    Ok(log_spaced(lo, hi, points))
}

fn kind_of(arg: KindArg, model: &ModelSpec) -> MeasurementKind {
    match (arg, model.measurement) {
        (KindArg::Coh, _) => MeasurementKind::Coherence,
        (KindArg::Pop, MeasurementKind::Population { sublattice }) => {
            MeasurementKind::Population { sublattice }
        }
        (KindArg::Pop, _) => MeasurementKind::population(),
    }
}

pub fn cmd_perturbative(args: &PerturbativeCmd) -> Result<ExitCode> {
    let config = resolve_config(&args.model)?;
    if config.probe.is_some() {
        return Err(Error::InvalidSpec(
            "perturbative scans use the idealized operators".into(),
        ));
    }
    let u_values = match &args.u_values {
        Some(v) => v.clone(),
        None => parse_grid(&args.u_grid)?,
    };
    let kinds: Vec<MeasurementKind> = args
        .kinds
        .iter()
        .map(|&k| kind_of(k, &config.model))
        .collect();
    let grid = FrequencyGrid {
        cap: args.cap,
        spacing: args.spacing,
    };
    let entries = ratio_scan(&config.model, &u_values, &kinds, &grid)?;
    let header = json!({
        "version": version_stamp(),
        "config": config,
        "u_over_j": u_values,
        "grid": grid,
        "normalization": "unit_square",
    });
    for &kind in &kinds {
        let tag = kind.tag();
        scan_spectra_csv(&entries, kind, header.clone())
            .write(&args.out.join(format!("perturbative_{tag}.csv")))?;
        scan_summary_csv(&entries, kind, header.clone())
            .write(&args.out.join(format!("perturbative_{tag}_summary.csv")))?;
        for (idx, e) in entries.iter().filter(|e| e.kind == kind).enumerate() {
            let mut h = header.clone();
            h["u_over_j_point"] = json!(e.u_over_j);
            e.psd.components_csv(h).write(
                &args
                    .out
                    .join("components")
                    .join(format!("{tag}_u{idx:02}.csv")),
            )?;
            println!(
                "{tag} U/J={:.4} delta_fraction={:.6} F={:.6} Gamma_max={:.6}{}",
                e.u_over_j,
                e.psd.delta_fraction(),
                e.fit.overlap,
                e.fit.gamma_max,
                if e.fit.boundary_flag { " boundary" } else { "" }
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_trajectory(args: &TrajectoryCmd, seed: Option<u64>) -> Result<ExitCode> {
    let mut config = resolve_config(&args.model)?;
    let mut settings = config.trajectory.clone().unwrap_or_default();
    let t = &args.trajectory;
    if let Some(g) = t.gamma {
        settings.gamma = g;
    }
    if let Some(total) = t.total_time {
        settings.total_time = total;
    }
    if t.dt.is_some() {
        settings.dt = t.dt;
    }
    if let Some(s) = t.scheme {
        settings.scheme = match s {
            SchemeArg::Euler => Scheme::EulerMaruyama,
            SchemeArg::SplitStep => Scheme::SplitStepExponential,
        };
    }
    if let Some(init) = &t.initial {
        settings.initial = init.parse()?;
    }
    if let Some(stride) = t.log_stride {
        settings.log_stride = stride;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    let model = config.build_model()?;
    let span = model
        .spec
        .rescale_span
        .unwrap_or(model.hamiltonian.bare_span);
    settings.dt = Some(
        settings
            .dt
            .unwrap_or_else(|| settings.scheme.default_dt(span, settings.gamma)),
    );
    config.trajectory = Some(settings.clone());
    config.validate()?;

    let h = &model.hamiltonian.operator;
    let m = &model.measurement.operator;
    let initial = match &settings.initial {
        InitialState::Ground => ground_state(h)?.vector,
        InitialState::Fock { occupations } => model.basis.fock_state(occupations)?,
    };
    let mut traj = TrajectoryConfig::new(
        settings.dt.unwrap_or_default(),
        settings.total_time,
        settings.gamma,
        settings.seed,
        settings.scheme,
    );
    traj.log_stride = settings.log_stride;
    traj.observables = vec!["M".into(), "H".into()];
    let (mut record, log) = run_trajectory(h, m, &initial, &traj, &[])?;
    record.operator = model.measurement.kind.tag().to_string();
    record.model_hash = Some(config.model_hash());
    let extra = json!({
        "version": version_stamp(),
        "config": config,
        "measurement_raw_norm": model.measurement.raw_norm,
        "rescale_factor": model.hamiltonian.rescale_factor,
    });
    record.to_csv(extra.clone()).write(&args.out)?;
    if let Some(path) = &args.log {
        let mut header = extra;
        header["max_norm_drift"] = json!(log.max_norm_drift);
        log.to_csv(header).write(path)?;
    }
    println!(
        "steps {} dt {} record_hash {}",
        record.len(),
        record.dt,
        record.content_hash()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_psd(args: &PsdCmd) -> Result<ExitCode> {
    let table = CsvTable::read(&args.record)?;
    let record = MeasurementRecord::from_csv(&table)?;
    let mut options = PeriodogramOptions {
        remove_mean: !args.no_mean_removal,
        ..Default::default()
    };
    if let Some(cap) = args.cap {
        options.frequency_cap = cap;
    }
    if args.hann {
        options.window = Window::Hann;
    }
    let spectrum = periodogram(&record, &options)?;
    let extra = json!({
        "version": version_stamp(),
        "options": options,
        "record": table.header,
    });
    spectrum.to_csv(extra).write(&args.out)?;
    println!(
        "bins {} spacing {:.6e} integral {:.6e}",
        spectrum.len(),
        spectrum.spacing,
        spectrum.integral()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_fit(args: &FitCmd) -> Result<ExitCode> {
    let table = CsvTable::read(&args.psd)?;
    let spectrum = Spectrum::from_csv(&table)?;
    let mut search = OverlapSearch::default();
    if args.width_lower.is_some() {
        search.width_lower = args.width_lower;
    }
    if let Some(upper) = args.width_upper {
        search.width_upper = upper;
    }
    let fit = maximize_overlap_with(&spectrum, &search)?;
    let summary = json!({
        "gamma_max": fit.gamma_max,
        "overlap": fit.overlap,
        "boundary_flag": fit.boundary_flag,
    });
    println!("{summary}");
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "version": version_stamp(),
                "fit": fit,
                "search": search,
                "spectrum": table.header,
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_sweep(args: &SweepCmd, seed: Option<u64>) -> Result<ExitCode> {
    if args.print_default_plan {
        let plan = SweepPlan::desk_scale(args.sites, args.particles);
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(ExitCode::SUCCESS);
    }
    let (Some(plan_path), Some(out)) = (&args.plan, &args.out) else {
        return Err(Error::InvalidSpec("--plan and --out are required".into()));
    };
    let text = std::fs::read_to_string(plan_path)?;
    let mut plan: SweepPlan = serde_json::from_str(&text)?;
    if let Some(s) = seed {
        plan.base_seed = s;
    }
    if args.save_records {
        plan.save_records = true;
    }
    plan.validate()?;
    let workers = match args.workers {
        Some(n) => Some(n),
        None => std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()),
    };
    let diagram = run_sweep(&plan, out, workers)?;
    println!(
        "cells {} failed {} plan_hash {}",
        diagram.cells.len(),
        diagram.failures.len(),
        diagram.plan_hash
    );
    Ok(if diagram.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

pub fn cmd_lattice(args: &LatticeCmd) -> Result<ExitCode> {
    let spec = LatticeSpec::new(args.depth, args.sites);
    spec.validate()?;
    let mut probe = ProbeSpec::new(args.probe.into());
    probe.sublattice = match args.sublattice {
        SublatticeArg::Even => Sublattice::Even,
        SublatticeArg::Odd => Sublattice::Odd,
    };
    let bloch = solve_bands(&spec)?;
    let wannier = wannier_function(&bloch)?;
    let params = hubbard_parameters(&wannier, args.coupling)?;
    let matrix = measurement_matrix(&wannier, &probe)?;
    let nearest = matrix.entries[0][1].abs();
    let next = if args.sites > 2 {
        matrix.entries[0][2].abs()
    } else {
        0.0
    };
    println!(
        "J {:.10} U {:.10} bandwidth {:.10}",
        params.j,
        params.u,
        bloch.bandwidth()
    );
    println!(
        "diagonal {:?}",
        (0..args.sites)
            .map(|j| matrix.entries[j][j])
            .collect::<Vec<_>>()
    );
    println!(
        "nearest {nearest:.6e} next_nearest {next:.6e} ratio {:.6}",
        next / nearest.max(f64::MIN_POSITIVE)
    );
    if let Some(out) = &args.out {
        let mut header = lattice_header(&spec, &probe);
        header["hubbard"] = json!(params);
        header["coupling"] = json!(args.coupling);
        header["matrix_normalization"] = json!(matrix.normalization);
        matrix.to_csv(header).write(out)?;
    }
    Ok(ExitCode::SUCCESS)
}
