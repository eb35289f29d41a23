//! Command-line front end: argument parsing, config ingestion and file IO.
//!
//! Exit codes are 0 on success, 1 for usage or validation errors and 2 when a
//! numerical abort (non-finite loss or iterate) stops a run.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

pub use config::RunConfig;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::io::{meta, pfm, pgm};
use crate::phantom::{self, PhantomSpec};

#[derive(Debug, Parser)]
#[command(name = "usdeconv", version, about = "Ultrasound B-mode deconvolution toolkit")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantoms.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Render a B-mode image from an echogenicity map.
    Render(RenderArgs),
    /// Deconvolve a B-mode image.
    #[command(subcommand)]
    Deconv(DeconvCmd),
    /// PSF parameter estimation.
    #[command(subcommand)]
    Psf(PsfCmd),
    /// Quality metrics and wire-target analysis.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    /// Full-size CIRS-like phantom: 3 inclusions and 12 wires.
    Cirs,
    /// 10.24 mm square wire phantom for desk-scale runs.
    DeskWires,
    /// 10.24 mm square inclusion phantom for desk-scale runs.
    DeskInclusions,
}

impl Builtin {
    pub fn spec(self) -> PhantomSpec {
        match self {
            Builtin::Cirs => phantom::default_cirs_spec(),
            Builtin::DeskWires => phantom::desk_wire_spec(),
            Builtin::DeskInclusions => phantom::desk_inclusion_spec(),
        }
    }
}

/// A phantom given either as an INI file or by built-in name.
#[derive(Clone, Debug, Args)]
pub struct SpecSource {
    /// Phantom spec file.
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    pub spec: Option<PathBuf>,
    /// Built-in phantom instead of a spec file.
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
}

impl SpecSource {
    /// The spec and whether it pins its own seed.
    pub fn load(&self) -> Result<(PhantomSpec, bool)> {
        match (&self.spec, self.builtin) {
            (Some(path), _) => {
                let text = read_text(path)?;
                let spec = PhantomSpec::from_ini(&text).map_err(|e| in_file(path, e))?;
                Ok((spec, meta::lookup(&text, "phantom", "seed").is_some()))
            }
            (None, Some(b)) => Ok((b.spec(), true)),
            (None, None) => Err(Error::invalid("either --spec or --builtin is required")),
        }
    }
}

/// Pixel spacing overrides for inputs without a sidecar (PGM frames, say).
#[derive(Clone, Debug, Default, Args)]
pub struct GeometryArgs {
    /// Lateral pixel spacing of the input in mm.
    #[arg(long)]
    pub dx: Option<f64>,
    /// Axial pixel spacing of the input in mm.
    #[arg(long)]
    pub dz: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Rasterise a phantom to an echogenicity map.
    Gen(PhantomGenArgs),
    /// Write a built-in phantom as an editable spec file.
    Spec {
        #[arg(long, value_enum)]
        builtin: Builtin,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[command(flatten)]
    pub source: SpecSource,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an 8-bit PGM preview of the log-compressed map.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct RenderArgs {
    #[command(subcommand)]
    pub sub: Option<RenderCmd>,
    #[command(flatten)]
    pub opts: RenderOpts,
}

#[derive(Debug, Subcommand)]
pub enum RenderCmd {
    /// Re-render at another center frequency.
    Rebeam {
        #[command(flatten)]
        opts: RenderOpts,
        /// Center frequency in MHz.
        #[arg(long)]
        freq: f64,
    },
}

#[derive(Clone, Debug, Args)]
pub struct RenderOpts {
    /// Echogenicity map (PFM with sidecar, or PGM plus --dx/--dz).
    #[arg(long, required = true)]
    pub echo: Option<PathBuf>,
    /// PSF config file; the 8 MHz defaults apply when omitted.
    #[arg(long)]
    pub psf: Option<PathBuf>,
    /// Standard deviation of additive envelope noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    /// Dynamic range of the log compression in dB.
    #[arg(long, default_value_t = crate::render::DEFAULT_DYNAMIC_RANGE)]
    pub dr: f64,
    /// Average-pool the envelope by this factor before compression.
    #[arg(long, default_value_t = 1)]
    pub pool: usize,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, required = true)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Subcommand)]
pub enum DeconvCmd {
    /// Richardson-Lucy baseline.
    Rl(RlArgs),
    /// Implicit neural representation fitted through the renderer.
    Inr(Box<InrArgs>),
}

#[derive(Debug, Args)]
pub struct RlArgs {
    /// B-mode image in [0, 1].
    #[arg(long)]
    pub bmode: PathBuf,
    #[arg(long)]
    pub psf: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    /// Denominator floor.
    #[arg(long, default_value_t = 1e-9)]
    pub eps: f64,
    /// Early-stop tolerance on the relative L1 change (0 runs all iterations).
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    /// Undo the log compression before deconvolving.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, default_value_t = crate::render::DEFAULT_DYNAMIC_RANGE)]
    pub dr: f64,
    /// Nearest-neighbour upsampling of the estimate.
    #[arg(long, default_value_t = 1)]
    pub upsample: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Args)]
pub struct InrArgs {
    /// B-mode image in [0, 1].
    #[arg(long)]
    pub bmode: PathBuf,
    #[arg(long)]
    pub psf: Option<PathBuf>,
    /// Run config with [train] and [model] sections; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// SSIM weight in the loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total-variation weight.
    #[arg(long)]
    pub tv_weight: Option<f64>,
    /// Use the summed squared error instead of the mean.
    #[arg(long)]
    pub l2_sum: bool,
    #[arg(long)]
    pub oversample: Option<usize>,
    /// Sample pixel centers instead of jittered positions.
    #[arg(long)]
    pub no_jitter: bool,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Hash table size as a power of two.
    #[arg(long)]
    pub table_log2: Option<u32>,
    /// Use 2^22-entry tables.
    #[arg(long, conflicts_with = "table_log2")]
    pub full_table: bool,
    #[arg(long)]
    pub base_res: Option<usize>,
    /// Finest grid resolution (defaults to the fine sampling grid size).
    #[arg(long)]
    pub max_res: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Echogenicity estimate on the fine grid.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Subcommand)]
pub enum PsfCmd {
    /// Pick f-number and cycle count by short INR fits.
    GridSearch(GridArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// Base PSF config; its f_number and n_cycles are searched over.
    #[arg(long)]
    pub psf: Option<PathBuf>,
    #[arg(long, default_value = "1.0:4.0:0.5")]
    pub fnum: String,
    #[arg(long, default_value = "1:5")]
    pub cycles: String,
    #[arg(long, default_value_t = 500)]
    pub short_iters: usize,
    /// Final iterations averaged into each score.
    #[arg(long, default_value_t = config::GRID_SCORE_WINDOW)]
    pub score_window: usize,
    /// Candidates within this factor of the best score count as consistent;
    /// the widest consistent kernel is chosen (1 picks the lowest score).
    #[arg(long, default_value_t = config::GRID_CONSISTENCY)]
    pub consistency: f64,
    #[arg(long, default_value_t = config::GRID_LEVELS)]
    pub levels: usize,
    #[arg(long, default_value_t = config::GRID_TABLE_LOG2)]
    pub table_log2: u32,
    #[arg(long, default_value_t = config::GRID_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub oversample: usize,
    #[arg(long, default_value_t = crate::render::DEFAULT_DYNAMIC_RANGE)]
    pub dr: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Best PSF config.
    #[arg(long)]
    pub out: PathBuf,
    /// Score table CSV (defaults to the config path with a .csv extension).
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// PSNR and SSIM between log-compressed maps.
    Metrics(MetricsArgs),
    /// Detect wire targets and match them to a phantom spec.
    Wires(WiresArgs),
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Linear echogenicity estimate.
    #[arg(long)]
    pub pred: PathBuf,
    /// Linear ground-truth echogenicity.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = crate::render::DEFAULT_DYNAMIC_RANGE)]
    pub dr: f64,
    /// Write the record as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WiresArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long, default_value_t = crate::eval::DEFAULT_THRESHOLD_FRAC)]
    pub threshold: f64,
    #[arg(long, default_value_t = crate::eval::DEFAULT_MIN_PIXELS)]
    pub min_pixels: usize,
    /// Matching tolerance in mm.
    #[arg(long, default_value_t = crate::eval::DEFAULT_MATCH_TOL)]
    pub tol: f64,
    /// The input is a log-compressed B-mode; expand it to envelope first.
    #[arg(long)]
    pub bmode: bool,
    #[arg(long, default_value_t = crate::render::DEFAULT_DYNAMIC_RANGE)]
    pub dr: f64,
    /// Write the detected clusters as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(PhantomCmd::Gen(a)) => commands::phantom_gen(&a),
        Command::Phantom(PhantomCmd::Spec { builtin, out }) => write_text(&out, &builtin.spec().to_ini()),
        Command::Render(a) => match a.sub {
            None => commands::render(&a.opts, None),
            Some(RenderCmd::Rebeam { opts, freq }) => commands::render(&opts, Some(freq)),
        },
        Command::Deconv(DeconvCmd::Rl(a)) => commands::deconv_rl(&a),
        Command::Deconv(DeconvCmd::Inr(a)) => commands::deconv_inr(&a),
        Command::Psf(PsfCmd::GridSearch(a)) => commands::grid_search(&a),
        Command::Eval(EvalCmd::Metrics(a)) => commands::eval_metrics(&a),
        Command::Eval(EvalCmd::Wires(a)) => commands::eval_wires(&a),
    }
}

/// The given seed, or a fresh one that is logged so the run can be replayed.
pub fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        info!("no --seed given; using random seed {s}");
        s
    })
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Reads a PFM (or PGM by extension), applies its sidecar geometry if one
/// exists and then any spacing overrides.
pub fn load_image(path: &Path, geometry: &GeometryArgs) -> Result<Image2D> {
    if !path.exists() {
        return Err(io_error(path, std::io::ErrorKind::NotFound.into()));
    }
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let mut img = if is_pgm { pgm::read(path)? } else { pfm::read(path)? };
    if let Some(text) = meta::read_optional(path)? {
        img = meta::apply(&text, img)?;
    }
    if let Some(dx) = geometry.dx {
        img.dx = dx;
    }
    if let Some(dz) = geometry.dz {
        img.dz = dz;
    }
    if !(img.dx > 0.0 && img.dz > 0.0) {
        return Err(Error::invalid(format!("pixel spacing must be positive, got {} x {}", img.dx, img.dz)));
    }
    Ok(img)
}

/// Writes `img` as PFM with a metadata sidecar.
pub fn save_image(path: &Path, img: &Image2D, extra: &meta::Extra) -> Result<()> {
    pfm::write(path, img)?;
    meta::write(path, img, extra)
}

fn load_psf(path: Option<&Path>) -> Result<crate::psf::PsfParams> {
    match path {
        Some(p) => crate::psf::PsfParams::from_ini(&read_text(p)?).map_err(|e| in_file(p, e)),
        None => {
            info!("no --psf given; using the 8 MHz defaults");
            Ok(crate::psf::PsfParams::default())
        }
    }
}
