//! Command-line front end.
//!
//! Input layouts (comma-separated, `.` decimal, one header row):
//!
//! - `mu`: `w,u1,...,u{d_y}`
//! - `nu`: `w,x1,...,x{d_x},y1,...,y{d_y}`
//!
//! Exit codes: 0 success, 2 validation or feasibility failure, 3 convergence
//! failure, 4 I/O or parse error. Numbers are written with 17 significant
//! digits.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianModel, GaussianModelFile};
use crate::measures::{validate_problem, DiscreteMeasure, Problem, ValidationReport};
use crate::oracle::{self, OracleComparison};
use crate::solver::{self, Potentials, Solution, SolveReport, SolverOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "evqr", version, about = "Entropic vector quantile regression solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a discrete instance by block-coordinate dual ascent.
    Solve(SolveArgs),
    /// Closed-form solution for a Gaussian model.
    Gaussian(GaussianArgs),
    /// Tabulate W2^2 between the entropic and limit Gaussian couplings over an epsilon grid.
    Sweep(SweepArgs),
    /// Load, center and check a discrete instance.
    Validate(ValidateArgs),
    /// Cross-check the solver against the dense Newton oracle.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub mu: PathBuf,
    #[arg(long)]
    pub nu: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Start from random potentials drawn with this seed instead of zeros.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_coupling: Option<PathBuf>,
    /// f/g file; h is written next to it with an `_h` suffix.
    #[arg(long)]
    pub out_potentials: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GaussianArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for the density-identity sample points and the Monte Carlo check.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub density_points: usize,
    /// Monte Carlo draws for the limit regression check (0 disables it).
    #[arg(long, default_value_t = 100_000)]
    pub mc_draws: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub eps_grid: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        Error::NoConvergence(_) | Error::NotConverged(_) | Error::Overflow(_) => EXIT_NOT_CONVERGED,
        Error::DimensionMismatch(_)
        | Error::InvalidWeights(_)
        | Error::NonFinite(_)
        | Error::InvalidParameter(_)
        | Error::NotPsd { .. }
        | Error::SingularMatrix(_)
        | Error::NotSymmetric { .. }
        | Error::ConstraintInfeasible(_)
        | Error::DomainError(_)
        | Error::SizeGuard { .. } => EXIT_INVALID,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Gaussian(a) => cmd_gaussian(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Oracle(a) => cmd_oracle(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// number formatting

/// `{:.16e}`: 17 significant digits, round-trips any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Compact JSON with every float written at 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt17(value).as_bytes())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17);
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// CSV input

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Header and numeric rows of a CSV file.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .enumerate()
            .map(|(k, field)| {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line,
                    msg: format!("column {} ({}): cannot parse {field:?} as a number", k + 1, header[k]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Ok((header, rows))
}

fn header_error(path: &Path, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg,
    }
}

fn measure_from_rows(rows: &[Vec<f64>]) -> Result<DiscreteMeasure> {
    let d = rows[0].len() - 1;
    let weights = rows.iter().map(|r| r[0]).collect();
    let points = DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k + 1]);
    DiscreteMeasure::new(weights, points)
}

/// Reads a `w,u1,...` file.
pub fn read_mu_csv(path: &Path) -> Result<DiscreteMeasure> {
    let (header, rows) = read_table(path)?;
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("w".to_string())
        .chain((1..=d).map(|k| format!("u{k}")))
        .collect();
    if d == 0 || header != expected {
        return Err(header_error(path, format!("expected header w,u1,...,u{{d}}, got {}", header.join(","))));
    }
    measure_from_rows(&rows)
}

/// Reads a `w,x1,...,y1,...` file. Returns the measure and `d_x`.
pub fn read_nu_csv(path: &Path) -> Result<(DiscreteMeasure, usize)> {
    let (header, rows) = read_table(path)?;
    let d_x = header.iter().filter(|h| h.starts_with('x')).count();
    let d_y = header.len().saturating_sub(1 + d_x);
    let expected: Vec<String> = std::iter::once("w".to_string())
        .chain((1..=d_x).map(|k| format!("x{k}")))
        .chain((1..=d_y).map(|k| format!("y{k}")))
        .collect();
    if d_x == 0 || d_y == 0 || header != expected {
        return Err(header_error(
            path,
            format!("expected header w,x1,...,x{{d_x}},y1,...,y{{d_y}}, got {}", header.join(",")),
        ));
    }
    Ok((measure_from_rows(&rows)?, d_x))
}

pub fn load_problem(input: &InputArgs, epsilon: f64) -> Result<Problem> {
    let mu = read_mu_csv(&input.mu)?;
    let (nu, d_x) = read_nu_csv(&input.nu)?;
    Problem::new(mu, nu, d_x, epsilon)
}

// ---------------------------------------------------------------------------
// CSV output

/// Dense matrix, no header, one row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::new();
    if let Some(h) = header {
        body.push_str(&h.join(","));
        body.push('\n');
    }
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a header-less numeric CSV written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(
            rec.iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!("cannot parse {f:?}"),
                    })
                })
                .collect::<Result<_>>()?,
        );
    }
    let nc = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), nc, |i, j| rows[i][j]))
}

/// `pots.csv` -> `pots_h.csv`.
pub fn h_path(fg_path: &Path) -> PathBuf {
    let stem = fg_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = fg_path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}_h.{ext}"),
        None => format!("{stem}_h"),
    };
    fg_path.with_file_name(name)
}

pub fn write_potentials(path: &Path, pots: &Potentials) -> Result<()> {
    let d_x = pots.g.ncols();
    let mut fg = DMatrix::zeros(pots.f.len(), 1 + d_x);
    fg.set_column(0, &pots.f);
    fg.view_mut((0, 1), (pots.f.len(), d_x)).copy_from(&pots.g);
    let header: Vec<String> = std::iter::once("f".to_string())
        .chain((1..=d_x).map(|k| format!("g{k}")))
        .collect();
    write_matrix_csv(path, &fg, Some(&header))?;
    let h = DMatrix::from_column_slice(pots.h.len(), 1, pots.h.as_slice());
    write_matrix_csv(&h_path(path), &h, Some(&["h".to_string()]))
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub epsilon: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub threads: usize,
    pub seed: Option<u64>,
    pub mu: String,
    pub nu: String,
    pub out_coupling: Option<String>,
    pub out_potentials: Option<String>,
}

#[derive(Debug, Serialize)]
struct ProblemSummary {
    n: usize,
    m: usize,
    d_x: usize,
    d_y: usize,
    epsilon: f64,
    centering_shift: Vec<f64>,
}

impl ProblemSummary {
    fn of(p: &Problem) -> Self {
        Self {
            n: p.n(),
            m: p.m(),
            d_x: p.d_x(),
            d_y: p.d_y(),
            epsilon: p.epsilon(),
            centering_shift: p.centering_shift().iter().copied().collect(),
        }
    }
}

#[derive(Debug, Serialize)]
struct SolveDocument<'a> {
    config: &'a RunConfig,
    seed: Option<u64>,
    problem: ProblemSummary,
    validation: ValidationReport,
    solve: &'a SolveReport,
}

fn random_potentials(p: &Problem, seed: u64) -> Potentials {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(-1.0..1.0);
    Potentials {
        f: DVector::from_fn(p.n(), |_, _| draw()),
        g: DMatrix::from_fn(p.n(), p.d_x(), |_, _| draw()),
        h: DVector::from_fn(p.m(), |_, _| draw()),
    }
}

pub fn cmd_solve(args: &SolveArgs) -> Result<i32> {
    let p = load_problem(&args.input, args.epsilon)?;
    let opts = SolverOptions {
        tol: args.tol,
        max_sweeps: args.max_sweeps,
        threads: args.threads,
        ..Default::default()
    };
    let init = match args.seed {
        Some(seed) => random_potentials(&p, seed),
        None => Potentials::zeros(&p),
    };
    let (solution, code): (Solution, i32) = match solver::solve_from(&p, &opts, init) {
        Ok(s) => (s, EXIT_OK),
        Err(Error::NotConverged(s)) => {
            eprintln!("error: solver did not converge within {} sweeps", s.report.sweeps);
            (*s, EXIT_NOT_CONVERGED)
        }
        Err(e) => return Err(e),
    };

    if let Some(path) = &args.out_coupling {
        write_matrix_csv(path, &solution.coupling.pi, None)?;
    }
    if let Some(path) = &args.out_potentials {
        write_potentials(path, &solution.potentials)?;
    }
    let config = RunConfig {
        epsilon: args.epsilon,
        tol: args.tol,
        max_sweeps: args.max_sweeps,
        threads: args.threads,
        seed: args.seed,
        mu: args.input.mu.display().to_string(),
        nu: args.input.nu.display().to_string(),
        out_coupling: args.out_coupling.as_ref().map(|p| p.display().to_string()),
        out_potentials: args.out_potentials.as_ref().map(|p| p.display().to_string()),
    };
    let doc = SolveDocument {
        config: &config,
        seed: args.seed,
        problem: ProblemSummary::of(&p),
        validation: validate_problem(&p),
        solve: &solution.report,
    };
    let text = to_json(&doc);
    match &args.report {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(code)
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<i32> {
    // epsilon does not enter the checks
    let p = load_problem(&args.input, 1.0)?;
    let report = validate_problem(&p);
    print!("{}", to_json(&report));
    Ok(if report.feasible { EXIT_OK } else { EXIT_INVALID })
}

#[derive(Debug, Serialize)]
struct PotentialsDocument {
    f_quad: Vec<Vec<f64>>,
    f_lin: Vec<f64>,
    f_const: f64,
    g: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    h_shift: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct LimitDocument {
    lambda_o: Vec<Vec<f64>>,
    conditional_covariance_norm: f64,
    monte_carlo: Option<gaussian::MonteCarloReport>,
}

#[derive(Debug, Serialize)]
struct GaussianDocument {
    model: GaussianModelFile,
    epsilon: f64,
    seed: u64,
    lambda: Vec<Vec<f64>>,
    mean: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    potentials: PotentialsDocument,
    riccati_residual: f64,
    commutator_norm: f64,
    precision_residuals: gaussian::PrecisionResiduals,
    delta_theta_residual: f64,
    density_identity_residual: f64,
    density_points: usize,
    w2_first_order_coefficient: f64,
    w2_exact: f64,
    limit: LimitDocument,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn load_model(path: &Path) -> Result<GaussianModel> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: GaussianModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    GaussianModel::from_file(&file)
}

pub fn cmd_gaussian(args: &GaussianArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let eps = args.epsilon;
    let coupling = gaussian::optimal_gaussian_coupling(&model, eps)?;
    let pots = gaussian::gaussian_dual_potentials(&model, eps)?;

    let dim = 2 * model.d_y() + model.d_x();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let points: Vec<DVector<f64>> = (0..args.density_points)
        .map(|_| DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng)))
        .collect();

    let lambda_o = gaussian::lambda_eps(&model, 0.0)?;
    let monte_carlo = if args.mc_draws > 0 {
        Some(gaussian::limit_monte_carlo(&model, args.mc_draws, args.seed)?)
    } else {
        None
    };
    let doc = GaussianDocument {
        model: model.to_file(),
        epsilon: eps,
        seed: args.seed,
        lambda: rows(coupling.lambda.as_matrix()),
        mean: coupling.mean.iter().copied().collect(),
        gamma: rows(coupling.gamma.as_matrix()),
        riccati_residual: gaussian::riccati_residual(&model, &coupling.lambda, eps),
        commutator_norm: gaussian::commutator_norm(&model, &coupling.lambda),
        precision_residuals: gaussian::precision_blocks(&coupling, eps)?,
        delta_theta_residual: gaussian::delta_theta_residual(&model, eps)?,
        density_identity_residual: gaussian::density_identity_residual_with(&model, eps, &pots, &points)?,
        density_points: points.len(),
        w2_first_order_coefficient: gaussian::w2_first_order(&model)?,
        w2_exact: gaussian::w2_exact(&model, eps)?,
        potentials: PotentialsDocument {
            f_quad: rows(&pots.f_quad),
            f_lin: pots.f_lin.iter().copied().collect(),
            f_const: pots.f_const,
            g: rows(&pots.g),
            psi: rows(&pots.psi),
            h_shift: pots.h_shift.iter().copied().collect(),
        },
        limit: LimitDocument {
            lambda_o: rows(lambda_o.as_matrix()),
            conditional_covariance_norm: gaussian::limit_conditional_covariance(&model)?.norm(),
            monte_carlo,
        },
    };
    let text = to_json(&doc);
    match &args.report {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let model = load_model(&args.model)?;
    let table = gaussian::sweep_epsilon(&model, &args.eps_grid)?;
    let mut text = String::from("epsilon,w2_exact,first_order,ratio,residual_over_eps2\n");
    for r in &table {
        let cells = [r.epsilon, r.w2_exact, r.first_order, r.ratio, r.residual_over_eps2].map(fmt17);
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct OracleDocument {
    problem: ProblemSummary,
    comparison: OracleComparison,
    thresholds: [f64; 3],
    passed: bool,
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<i32> {
    let p = load_problem(&args.input, args.epsilon)?;
    let opts = SolverOptions {
        tol: args.tol,
        ..Default::default()
    };
    let comparison = oracle::oracle_compare(&p, &opts)?;
    let passed = comparison.passes();
    let doc = OracleDocument {
        problem: ProblemSummary::of(&p),
        comparison,
        thresholds: [
            OracleComparison::COUPLING_TOL,
            OracleComparison::VALUE_TOL,
            OracleComparison::POTENTIAL_TOL,
        ],
        passed,
    };
    let text = to_json(&doc);
    match &args.report {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(if passed { EXIT_OK } else { EXIT_NOT_CONVERGED })
}
