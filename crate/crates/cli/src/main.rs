use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dpgraphon::density::target_density_estimator;
use dpgraphon::estimators::{
    lipschitz_grid_scores, nonprivate_spectral_report, private_graphon_estimate, private_sbm_estimate,
    robust_sbm_estimate, subsample_aggregate_estimate, PrivateConfig, ScorerMode,
};
use dpgraphon::graph_models::{sample_graphon_graph, sample_sbm, BlockGraphon, BlockMatrix, LabeledGraph};
use dpgraphon::harness::{self, AuditConfig, AuditKind, ExperimentConfig};
use dpgraphon::io::{load_graph, save_graph, Sidecar};
use dpgraphon::linalg::Matrix;
use dpgraphon::mechanisms::{build_grid, log_em_distribution, CoefficientMode, MechanismConfig};
use dpgraphon::metrics::{delta_ds, delta_hat2, delta_p, BirkhoffOptions};
use dpgraphon::rng::{self, streams};
use dpgraphon::scoring::{build_constraint_system, ideal_score, lipschitz_score, relaxed_score, RelaxedOptions};
use dpgraphon::{Error, Result};

const EXIT_AUDIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "dpgraphon", version, about = "Private estimation of stochastic block models and block graphons")]
struct Cli {
    /// Master seed (falls back to DPGRAPHON_SEED, then 0).
    #[arg(long, global = true, env = "DPGRAPHON_SEED")]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a planted graph and write it with a JSON sidecar.
    Generate(GenerateArgs),
    /// Distances between two block matrices.
    Metrics(MetricsArgs),
    /// Score a candidate matrix against a graph or weight matrix.
    Score(ScoreArgs),
    /// Private edge density.
    Density(DensityArgs),
    /// Run one estimator.
    Estimate(EstimateArgs),
    /// Privacy, sensitivity and oracle audits.
    Audit(AuditArgs),
    /// Parameter sweep from a TOML config.
    Experiment(ExperimentArgs),
    /// Aggregate a sweep CSV into plot-ready rows.
    Plotdata(PlotArgs),
    /// Exponential-mechanism tools.
    Mechanism {
        #[command(subcommand)]
        command: MechanismCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Sbm,
    Graphon,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "sbm")]
    model: ModelKind,
    /// Block matrix as inline JSON or a path to a JSON file.
    #[arg(long)]
    b0: String,
    #[arg(long)]
    n: usize,
    /// Average-degree parameter (SBM).
    #[arg(long)]
    d: Option<f64>,
    /// Sparsity (graphon).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long = "R", alias = "r", default_value_t = 4.0)]
    r: f64,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    b: String,
    #[arg(long)]
    b0: String,
    #[arg(long, default_value_t = 64)]
    restarts: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMode {
    Ideal,
    Lipschitz,
    Relaxed,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_enum, default_value = "lipschitz")]
    mode: ScoreMode,
    /// Candidate block matrix (inline JSON or file).
    #[arg(long)]
    b: String,
    /// Graph file; the weight matrix is `A / rho`.
    #[arg(long, conflicts_with = "yin")]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Weight matrix (inline JSON or file) instead of a graph.
    #[arg(long)]
    yin: Option<String>,
    #[arg(long = "R", alias = "r", default_value_t = 4.0)]
    r: f64,
    #[arg(long, default_value_t = 4)]
    level: usize,
    /// Print the polynomial constraint system at threshold `t` instead of scoring.
    #[arg(long)]
    emit_system: Option<f64>,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long = "R", alias = "r", default_value_t = 4.0)]
    r: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Sbm,
    Graphon,
    Spectral,
    Subsample,
    Robust,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(value_enum)]
    estimator: EstimatorArg,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long = "R", alias = "r", default_value_t = 4.0)]
    r: f64,
    /// Scorer for the private estimators.
    #[arg(long, default_value = "auto")]
    mode: ScorerMode,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    normalized_only: Option<bool>,
    #[arg(long, value_enum, default_value = "strict")]
    coefficient: CoefficientArg,
    /// Closeness threshold for subsample-and-aggregate.
    #[arg(long)]
    tau: Option<f64>,
    /// Average-degree parameter for the robust estimator (read from the sidecar when omitted).
    #[arg(long)]
    d: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoefficientArg {
    Strict,
    Paper,
}

impl From<CoefficientArg> for CoefficientMode {
    fn from(c: CoefficientArg) -> Self {
        match c {
            CoefficientArg::Strict => CoefficientMode::Strict,
            CoefficientArg::Paper => CoefficientMode::Paper,
        }
    }
}

#[derive(Args)]
struct AuditArgs {
    /// privacy | sensitivity | metrics-oracle | inequality | all
    kind: String,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long = "R", alias = "r", default_value_t = 2.0)]
    r: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, value_enum, default_value = "strict")]
    coefficient: CoefficientArg,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Scorer override.
    #[arg(long)]
    mode: Option<ScorerMode>,
}

#[derive(Args)]
struct PlotArgs {
    /// Sweep CSV written by `experiment`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    groupby: Option<String>,
}

#[derive(Subcommand)]
enum MechanismCommand {
    /// Per-candidate log-ratio table for one adjacent pair of graphs.
    Audit(MechanismAuditArgs),
}

#[derive(Args)]
struct MechanismAuditArgs {
    /// Graph file; a random graph on `n` vertices when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Vertex to rewire; random when omitted.
    #[arg(long)]
    vertex: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long = "R", alias = "r", default_value_t = 2.0)]
    r: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_enum, default_value = "strict")]
    coefficient: CoefficientArg,
}

enum Failure {
    Usage(String),
    Audit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Audit(m)) => {
            eprintln!("audit failed: {m}");
            ExitCode::from(EXIT_AUDIT_FAILURE)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> std::io::Result<()> {
    match out {
        Some(p) => fs::write(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            let r = stdout.write_all(text.as_bytes()).and_then(|_| {
                if text.ends_with('\n') {
                    Ok(())
                } else {
                    stdout.write_all(b"\n")
                }
            });
            // A closed pipe (e.g. `| head`) is not an error for the caller.
            match r {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => r,
            }
        }
    }
}

fn emit_json(out: Option<&Path>, v: &impl Serialize) -> std::result::Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    Ok(emit(out, &s)?)
}

/// Inline JSON when it looks like an array, otherwise a file path.
fn read_matrix(arg: &str) -> Result<Matrix> {
    let text = if arg.trim_start().starts_with('[') { arg.to_string() } else { fs::read_to_string(arg)? };
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Generate(a) => generate(a, seed, out),
        Command::Metrics(a) => {
            let (b, b0) = (read_matrix(&a.b)?, read_matrix(&a.b0)?);
            let sol = delta_ds(&b, &b0, &BirkhoffOptions { restarts: a.restarts, seed, ..Default::default() })?;
            #[derive(Serialize)]
            struct Out {
                delta_ds: f64,
                delta2: f64,
                delta_hat2: f64,
                delta_p: f64,
                argmin: Vec<Vec<f64>>,
                approximate: bool,
            }
            emit_json(
                out,
                &Out {
                    delta_ds: sol.value,
                    delta2: sol.value.max(0.0).sqrt(),
                    delta_hat2: delta_hat2(&b, &b0)?,
                    delta_p: delta_p(&b, &b0)?,
                    argmin: sol.argmin.entries.to_rows(),
                    approximate: sol.approximate,
                },
            )
        }
        Command::Score(a) => score(a, out),
        Command::Density(a) => {
            let (g, _) = load_graph(&a.graph)?;
            let mut noise = rng::stream(seed, streams::NOISE);
            emit_json(out, &target_density_estimator(&g, a.epsilon, a.r, &mut noise)?)
        }
        Command::Estimate(a) => estimate(a, seed, out),
        Command::Audit(a) => audit(a, seed, out),
        Command::Experiment(a) => experiment(a, cli.seed, out),
        Command::Plotdata(a) => {
            let rows = harness::read_csv(fs::File::open(&a.input)?)?;
            Ok(emit(out, &harness::emit_plotdata(&rows, &a.x, &a.y, a.groupby.as_deref())?)?)
        }
        Command::Mechanism { command: MechanismCommand::Audit(a) } => mechanism_audit(a, seed, out),
    }
}

fn generate(a: GenerateArgs, seed: u64, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let Some(path) = out else {
        return Err(Failure::Usage("generate needs --out".into()));
    };
    let b0 = BlockMatrix::new(read_matrix(&a.b0)?, a.r)?;
    let (g, model) = match a.model {
        ModelKind::Sbm => {
            let d = a.d.ok_or_else(|| Failure::Usage("sbm needs --d".into()))?;
            (sample_sbm(&b0, d, a.n, seed)?, "sbm")
        }
        ModelKind::Graphon => {
            let rho = a.rho.ok_or_else(|| Failure::Usage("graphon needs --rho".into()))?;
            (sample_graphon_graph(&BlockGraphon::new(b0.clone()), rho, a.n, seed)?, "graphon")
        }
    };
    let sidecar = Sidecar {
        n: g.n(),
        model: model.into(),
        b0: Some(b0),
        d: a.d,
        rho: a.rho,
        seed: Some(seed),
        latent: g.latent.clone(),
        edge_probs: g.edge_probs.clone(),
    };
    save_graph(path, &g, Some(&sidecar))?;
    eprintln!("wrote {} vertices, {} edges to {}", g.n(), g.edges().count(), path.display());
    Ok(())
}

fn score(a: ScoreArgs, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let b = BlockMatrix::new(read_matrix(&a.b)?, a.r)?;
    let yin = match (&a.graph, &a.yin) {
        (Some(p), None) => {
            if !(a.rho > 0.0) {
                return Err(Failure::Usage("rho must be positive".into()));
            }
            load_graph(p)?.0.adjacency_matrix().scale(1.0 / a.rho)
        }
        (None, Some(y)) => read_matrix(y)?,
        _ => return Err(Failure::Usage("give exactly one of --graph or --yin".into())),
    };
    if let Some(t) = a.emit_system {
        return Ok(emit(out, &build_constraint_system(&b, &yin, a.r, t)?.to_json()?)?);
    }
    match a.mode {
        ScoreMode::Ideal => emit_json(out, &ideal_score(&b, &yin)?),
        ScoreMode::Lipschitz => emit_json(out, &lipschitz_score(&b, &yin, a.r)?),
        ScoreMode::Relaxed => {
            let opts = RelaxedOptions { level: a.level, ..Default::default() };
            emit_json(out, &relaxed_score(&b, &yin, a.r, &opts)?)
        }
    }
}

fn estimate(a: EstimateArgs, seed: u64, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let (g, sidecar) = load_graph(&a.graph)?;
    let truth = sidecar.as_ref().and_then(|s| s.b0.clone());
    let base = match a.estimator {
        EstimatorArg::Graphon => PrivateConfig::graphon(seed),
        _ => PrivateConfig::sbm(seed),
    };
    let cfg = PrivateConfig {
        step: a.step,
        normalized_only: a.normalized_only.unwrap_or(base.normalized_only),
        scorer: a.mode,
        coefficient: a.coefficient.into(),
        ..base
    };
    let report = match a.estimator {
        EstimatorArg::Sbm => private_sbm_estimate(&g, a.k, a.epsilon, a.r, &cfg)?,
        EstimatorArg::Graphon => private_graphon_estimate(&g, a.k, a.epsilon, a.r, &cfg)?.1,
        EstimatorArg::Spectral => nonprivate_spectral_report(&g, a.k, seed)?,
        EstimatorArg::Subsample => {
            let tau = a.tau.ok_or_else(|| Failure::Usage("subsample needs --tau".into()))?;
            subsample_aggregate_estimate(&g, a.k, a.epsilon, tau, a.r, &cfg)?
        }
        EstimatorArg::Robust => {
            let d = a
                .d
                .or_else(|| sidecar.as_ref().and_then(|s| s.d.or(s.rho.map(|r| r * g.n() as f64))))
                .ok_or_else(|| Failure::Usage("robust needs --d (no sidecar value)".into()))?;
            let est = robust_sbm_estimate(&g, d, a.k, a.r, seed)?;
            #[derive(Serialize)]
            struct Out {
                #[serde(flatten)]
                est: dpgraphon::estimators::RobustEstimate,
                delta2_sq: Option<f64>,
            }
            let d2 = truth
                .as_ref()
                .map(|t| {
                    dpgraphon::metrics::delta2_sq(
                        est.b_hat.entries(),
                        t.entries(),
                        &BirkhoffOptions { seed, ..Default::default() },
                    )
                })
                .transpose()?;
            return emit_json(out, &Out { est, delta2_sq: d2 });
        }
    };
    let report = match truth {
        Some(t) => report.with_truth(&t)?,
        None => report,
    };
    Ok(emit(out, &report.to_json()?)?)
}

fn audit(a: AuditArgs, seed: u64, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let kinds: Vec<AuditKind> = if a.kind == "all" {
        vec![AuditKind::Privacy, AuditKind::Sensitivity, AuditKind::MetricsOracle, AuditKind::Inequality]
    } else {
        vec![a.kind.parse()?]
    };
    let cfg = AuditConfig {
        seed,
        cases: a.cases,
        n: a.n,
        k: a.k,
        r: a.r,
        epsilons: a.epsilon,
        step: a.step,
        coefficient: a.coefficient.into(),
    };
    let reports = kinds.iter().map(|&k| harness::run_audit(k, &cfg)).collect::<Result<Vec<_>>>()?;
    for r in &reports {
        eprintln!("{:?}: {} ({} cases, worst margin {:.3e})", r.kind, if r.passed { "PASS" } else { "FAIL" }, r.cases.len(), r.worst_margin);
    }
    emit_json(out, &reports)?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{:?}", r.kind)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Audit(failed.join(", ")))
    }
}

fn experiment(a: ExperimentArgs, seed: Option<u64>, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let text = fs::read_to_string(&a.config)?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    if let Some(m) = a.mode {
        cfg.scorer = m;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        cfg.output.csv = Some(dir.join(format!("{}.csv", cfg.name)).display().to_string());
        cfg.output.summary = Some(dir.join(format!("{}.summary.json", cfg.name)).display().to_string());
    }
    let result = harness::run_experiment(&cfg)?;
    let summary = harness::summarize(&result);
    match &cfg.output.csv {
        Some(p) => harness::write_csv(&result.rows, fs::File::create(p)?)?,
        None => harness::write_csv(&result.rows, std::io::stdout().lock())?,
    }
    let summary_json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    match &cfg.output.summary {
        Some(p) => fs::write(p, summary_json)?,
        None => eprintln!("{summary_json}"),
    }
    let audit_cfg = AuditConfig { seed: cfg.seed, ..Default::default() };
    let mut failed = Vec::new();
    for &kind in &cfg.audits {
        let rep = harness::run_audit(kind, &audit_cfg)?;
        eprintln!("audit {kind:?}: {}", if rep.passed { "PASS" } else { "FAIL" });
        if !rep.passed {
            failed.push(format!("{kind:?}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Audit(failed.join(", ")))
    }
}

fn mechanism_audit(a: MechanismAuditArgs, seed: u64, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let mut r = rng::stream(seed, streams::SOLVER);
    let g = match &a.graph {
        Some(p) => load_graph(p)?.0,
        None => {
            let edges: Vec<(usize, usize)> = (0..a.n)
                .flat_map(|i| (i + 1..a.n).map(move |j| (i, j)))
                .filter(|_| rng::unit_f64(&mut r) < 0.5)
                .collect();
            LabeledGraph::from_edges(a.n, edges)?
        }
    };
    let n = g.n();
    let v = a.vertex.unwrap_or_else(|| rng::uniform_index(&mut r, n));
    if v >= n {
        return Err(Failure::Usage(format!("vertex {v} out of range for n={n}")));
    }
    let nb: Vec<usize> = (0..n).filter(|&u| u != v && rng::unit_f64(&mut r) < 0.5).collect();
    let h = g.rewire_vertex(v, &nb)?;
    let grid = build_grid(a.k, a.r, a.step, false)?;
    let (sg, sh) = (lipschitz_grid_scores(&g, a.rho, a.r, &grid)?, lipschitz_grid_scores(&h, a.rho, a.r, &grid)?);
    let mech = MechanismConfig::new(a.epsilon, 40.0 * n as f64 * a.r * a.r, a.coefficient.into(), seed)?;
    let (lp, lq) = (log_em_distribution(&sg, &mech)?, log_em_distribution(&sh, &mech)?);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["candidate", "entries", "score", "score_adjacent", "log_p", "log_p_adjacent", "log_ratio"])
        .map_err(csv_failure)?;
    for (i, b) in grid.candidates.iter().enumerate() {
        let entries = serde_json::to_string(b.entries()).map_err(Error::from)?;
        w.write_record([
            i.to_string(),
            entries,
            sg[i].to_string(),
            sh[i].to_string(),
            lp[i].to_string(),
            lq[i].to_string(),
            (lp[i] - lq[i]).to_string(),
        ])
        .map_err(csv_failure)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Usage(e.to_string()))?;
    emit(out, &String::from_utf8_lossy(&bytes))?;
    let worst = lp.iter().zip(&lq).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    eprintln!("vertex {v}: max log-ratio {worst:.6} (epsilon {})", a.epsilon);
    if worst > a.epsilon + 1e-9 {
        return Err(Failure::Audit(format!("log-ratio {worst} exceeds epsilon {}", a.epsilon)));
    }
    Ok(())
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::Usage(e.to_string())
}
