//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 internal invariant violation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::{info, Level};

use crate::error::{Error, Result};
use crate::eval::{
    adapt_ground_truth_edges, add_noise, closest_point_rmse, make_shape, msae,
    shape_face_normals, NoiseDirection, NoiseSpec, ShapeKind,
};
use crate::io::{read_cloud, read_mesh, read_raw_cloud, write_cloud, write_mesh, write_points, RunManifest};
use crate::normals::{estimate_mesh_normals, estimate_normals, FeatureProfile, FilterConfig, MatrixSolver};
use crate::position::{filter_positions, mesh_vertex_update};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wnnm-normals", version, about = "Feature-preserving normal estimation and point filtering")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for commands that draw random numbers.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Re-estimate the normals of a point cloud.
    EstimateNormals(EstimateArgs),
    /// Estimate normals, then move points onto the recovered tangent planes.
    Filter(FilterArgs),
    /// Filter the face normals of an OBJ mesh and update its vertices.
    DenoiseMesh(MeshArgs),
    /// Perturb point positions with Gaussian noise.
    AddNoise(NoiseArgs),
    /// Sample a synthetic shape with analytic normals.
    MakeShape(ShapeArgs),
    /// Compare a result against a ground-truth cloud.
    Evaluate(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Sharp,
    LowDihedral,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Wnnm,
    RowAverage,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Msae,
    Rmse,
}

#[derive(Debug, Args)]
struct NormalFlags {
    /// Neighbors per local structure.
    #[arg(long, default_value_t = 60)]
    k_local: usize,
    /// Candidates searched for similar structures.
    #[arg(long, default_value_t = 150)]
    k_non: usize,
    /// Initial isotropy threshold in degrees (default from --profile).
    #[arg(long)]
    theta_init: Option<f64>,
    /// Lower bound of the threshold schedule in degrees (default from --profile).
    #[arg(long)]
    theta_low: Option<f64>,
    /// Shrinkage strength; larger keeps fewer ranks.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Normal estimation iterations.
    #[arg(long, default_value_t = 6)]
    iters: usize,
    /// Threshold defaults: 30/15 for sharp, 20/8 for low-dihedral models.
    #[arg(long, value_enum, default_value_t = ProfileArg::Sharp)]
    profile: ProfileArg,
    /// How stacked normals are denoised.
    #[arg(long, value_enum, default_value_t = SolverArg::Wnnm)]
    solver: SolverArg,
}

impl NormalFlags {
    fn config(&self) -> FilterConfig {
        let profile = match self.profile {
            ProfileArg::Sharp => FeatureProfile::Sharp,
            ProfileArg::LowDihedral => FeatureProfile::LowDihedral,
        };
        let base = FilterConfig::for_profile(profile);
        FilterConfig {
            k_local: self.k_local,
            k_non: self.k_non,
            theta_init: self.theta_init.unwrap_or(base.theta_init),
            theta_low: self.theta_low.unwrap_or(base.theta_low),
            beta: self.beta,
            n_nor: self.iters,
            solver: match self.solver {
                SolverArg::Wnnm => MatrixSolver::Wnnm,
                SolverArg::RowAverage => MatrixSolver::RowAverage,
            },
            ..base
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Input file (.ply, .xyz or .obj).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file; the format follows the extension.
    #[arg(long = "out")]
    output: PathBuf,
    #[command(flatten)]
    normal: NormalFlags,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Input file (.ply, .xyz or .obj).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file; the format follows the extension.
    #[arg(long = "out")]
    output: PathBuf,
    #[command(flatten)]
    normal: NormalFlags,
    /// Position update steps.
    #[arg(long, default_value_t = 15)]
    pos_iters: usize,
    /// Ball radius for the position update, or `auto`.
    #[arg(long, default_value = "auto")]
    ball_radius: String,
}

#[derive(Debug, Args)]
struct MeshArgs {
    /// Input mesh (.obj).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output mesh (.obj).
    #[arg(long = "out")]
    output: PathBuf,
    #[command(flatten)]
    normal: NormalFlags,
    /// Vertex update rounds.
    #[arg(long, default_value_t = 20)]
    pos_iters: usize,
    /// Split polygons with more than three corners into fans.
    #[arg(long)]
    triangulate_fan: bool,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    /// Input file (.ply, .xyz or .obj).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file; the format follows the extension.
    #[arg(long = "out")]
    output: PathBuf,
    /// Standard deviation as a fraction of the bounding-box diagonal.
    #[arg(long, default_value_t = 0.005)]
    sigma: f64,
    /// Displace along the input normals instead of isotropically.
    #[arg(long)]
    along_normal: bool,
    /// Write the input normals to the output instead of dropping them.
    #[arg(long)]
    keep_normals: bool,
}

#[derive(Debug, Args)]
struct ShapeArgs {
    /// cube, dodecahedron, sphere, plane, wedge, wedge:ANGLE or two-density-wedge.
    #[arg(long)]
    kind: String,
    /// Number of samples.
    #[arg(long, default_value_t = 6000)]
    samples: usize,
    /// Output file; the format follows the extension.
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Cloud to score.
    #[arg(long)]
    result: PathBuf,
    /// Ground-truth cloud.
    #[arg(long)]
    truth: PathBuf,
    /// msae compares normals, rmse compares positions.
    #[arg(long, value_enum, default_value_t = MetricArg::Msae)]
    metric: MetricArg,
    /// Snap truth normals on sharp edges to one of the incident planes.
    #[arg(long)]
    edge_adapted: bool,
    /// Shape of the truth cloud, when its manifest does not record it.
    #[arg(long)]
    kind: Option<String>,
    /// Also write the metrics as a `key=value` file.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::Internal(_) | Error::ConvergenceViolation { .. } => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli);
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidConfig("--threads must be at least 1".into())),
        Some(n) => with_threads(n, || dispatch(&cli)),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        Level::ERROR
    } else {
        match cli.verbose {
            0 => Level::WARN,
            1 => Level::INFO,
            _ => Level::DEBUG,
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .without_time()
        .try_init();
}

fn with_threads(n: usize, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::EstimateNormals(a) => cmd_estimate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::DenoiseMesh(a) => cmd_denoise_mesh(a),
        Command::AddNoise(a) => cmd_add_noise(a, cli.seed),
        Command::MakeShape(a) => cmd_make_shape(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn manifest_for(command: &str, input: Option<&Path>, output: &Path) -> RunManifest {
    let mut m = RunManifest::new(command);
    if let Some(i) = input {
        m.set("input", i.display());
    }
    m.set("output", output.display());
    m
}

fn timed<T>(m: &mut RunManifest, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    m.record_timing(stage, t.elapsed());
    Ok(out)
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let cfg = a.normal.config();
    cfg.validate()?;
    let mut m = manifest_for("estimate-normals", Some(&a.input), &a.output);
    m.record_config(&cfg);
    let cloud = timed(&mut m, "read", || read_cloud(&a.input))?;
    m.set("points", cloud.len());
    let field = timed(&mut m, "normals", || estimate_normals(&cloud, &cfg))?;
    m.set_real("normal_change_msae", msae(&field.normals, cloud.normals())?);
    let out = cloud.with_normals(field.normals)?;
    timed(&mut m, "write", || write_cloud(&a.output, &out))?;
    m.write_next_to(&a.output)?;
    info!(output = %a.output.display(), "normals written");
    Ok(())
}

fn parse_radius(s: &str) -> Result<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|r| *r > 0.0 && r.is_finite())
        .map(Some)
        .ok_or_else(|| Error::InvalidConfig(format!("--ball-radius: expected 'auto' or a positive number, got '{s}'")))
}

fn cmd_filter(a: &FilterArgs) -> Result<()> {
    let cfg = FilterConfig {
        n_pos: a.pos_iters,
        ball_radius: parse_radius(&a.ball_radius)?,
        ..a.normal.config()
    };
    cfg.validate()?;
    let mut m = manifest_for("filter", Some(&a.input), &a.output);
    m.record_config(&cfg);
    let cloud = timed(&mut m, "read", || read_cloud(&a.input))?;
    m.set("points", cloud.len());
    let field = timed(&mut m, "normals", || estimate_normals(&cloud, &cfg))?;
    let (out, report) = timed(&mut m, "positions", || filter_positions(&cloud, &field, &cfg))?;
    if let (Some(first), Some(last)) = (report.per_iteration_energy.first(), report.per_iteration_energy.last()) {
        m.set_real("energy_initial", *first);
        m.set_real("energy_final", *last);
    }
    timed(&mut m, "write", || write_cloud(&a.output, &out))?;
    m.write_next_to(&a.output)?;
    Ok(())
}

fn cmd_denoise_mesh(a: &MeshArgs) -> Result<()> {
    let cfg = FilterConfig {
        n_pos: a.pos_iters,
        ..a.normal.config()
    };
    cfg.validate()?;
    let mut m = manifest_for("denoise-mesh", Some(&a.input), &a.output);
    m.record_config(&cfg);
    m.set("triangulate_fan", a.triangulate_fan);
    let mesh = timed(&mut m, "read", || read_mesh(&a.input, a.triangulate_fan))?;
    m.set("vertices", mesh.vertices().len());
    m.set("faces", mesh.num_faces());
    let field = timed(&mut m, "normals", || estimate_mesh_normals(&mesh, &cfg))?;
    let out = timed(&mut m, "vertices", || mesh_vertex_update(&mesh, &field, cfg.n_pos))?;
    timed(&mut m, "write", || write_mesh(&a.output, &out))?;
    m.write_next_to(&a.output)?;
    Ok(())
}

fn cmd_add_noise(a: &NoiseArgs, seed: u64) -> Result<()> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("--sigma must be >= 0, got {}", a.sigma)));
    }
    let mut m = manifest_for("add-noise", Some(&a.input), &a.output);
    let cloud = read_cloud(&a.input)?;
    let spec = NoiseSpec {
        sigma: a.sigma,
        seed,
        direction: if a.along_normal {
            NoiseDirection::AlongNormal
        } else {
            NoiseDirection::Isotropic
        },
    };
    m.set("seed", seed);
    m.set("sigma", a.sigma);
    m.set("direction", if a.along_normal { "along-normal" } else { "isotropic" });
    m.set("keep_normals", a.keep_normals);
    m.set("points", cloud.len());
    m.set_real("diagonal", cloud.bounding_box_diagonal());
    let noisy = add_noise(&cloud, &spec)?;
    let normals = a.keep_normals.then(|| noisy.normals());
    write_points(&a.output, noisy.positions(), normals)?;
    m.write_next_to(&a.output)?;
    Ok(())
}

fn cmd_make_shape(a: &ShapeArgs, seed: u64) -> Result<()> {
    let kind: ShapeKind = a.kind.parse()?;
    let cloud = make_shape(kind, a.samples, seed)?;
    write_cloud(&a.output, &cloud)?;
    let mut m = manifest_for("make-shape", None, &a.output);
    m.set("kind", kind);
    m.set("samples", a.samples);
    m.set("seed", seed);
    m.write_next_to(&a.output)?;
    Ok(())
}

/// Shape named by `--kind` or by the truth file's manifest.
fn truth_kind(a: &EvalArgs) -> Result<ShapeKind> {
    if let Some(k) = &a.kind {
        return k.parse();
    }
    let path = RunManifest::path_for(&a.truth);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::InvalidConfig(format!(
            "--edge-adapted needs --kind or a shape manifest at {}",
            path.display()
        ))
    })?;
    let kind = RunManifest::parse(&text)?
        .get("kind")
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidConfig(format!("{}: no 'kind' entry; pass --kind", path.display())))?;
    kind.parse()
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let mut lines: Vec<(String, String)> = Vec::new();
    match a.metric {
        MetricArg::Msae => {
            let result = read_cloud(&a.result)?;
            let mut truth = read_cloud(&a.truth)?;
            if result.len() != truth.len() {
                return Err(Error::InvalidInput(format!(
                    "{} has {} points but {} has {}",
                    a.result.display(),
                    result.len(),
                    a.truth.display(),
                    truth.len()
                )));
            }
            let mut variant = "original";
            if a.edge_adapted {
                variant = "edge_adapted";
                if let Some(faces) = shape_face_normals(truth_kind(a)?) {
                    truth = adapt_ground_truth_edges(&truth, &faces)?.reference;
                }
            }
            lines.push(("msae_rad2".into(), msae(result.normals(), truth.normals())?.to_string()));
            lines.push(("variant".into(), variant.into()));
        }
        MetricArg::Rmse => {
            let result = read_raw_cloud(&a.result)?;
            let truth = read_raw_cloud(&a.truth)?;
            let rmse = closest_point_rmse(&result.positions, &truth.positions)?;
            lines.push(("rmse".into(), rmse.to_string()));
        }
    }
    for (k, v) in &lines {
        println!("{k}={v}");
    }
    if let Some(report) = &a.report {
        let mut m = RunManifest::new("evaluate");
        m.set("result", a.result.display());
        m.set("truth", a.truth.display());
        for (k, v) in &lines {
            m.set(k, v);
        }
        std::fs::write(report, m.to_text()).map_err(|source| Error::Io {
            path: report.clone(),
            source,
        })?;
        m.write_next_to(report)?;
    }
    Ok(())
}
