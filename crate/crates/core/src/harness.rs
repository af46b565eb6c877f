//! Reproducible sweeps, audits and plot data.
//!
//! Every trial draws from its own seed, `derive_seed(derive_seed(master, point), trial)`,
//! so results do not depend on how trials are scheduled across workers.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::density::{extended_edge_count, target_density_estimator};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    lipschitz_grid_scores, nonprivate_spectral_estimate, private_graphon_estimate, private_sbm_estimate,
    robust_sbm_estimate, subsample_aggregate_estimate, PrivateConfig, ScorerMode, SCHEMA_VERSION,
};
use crate::graph_models::{empirical_density, sample_graphon_graph, sample_sbm, BlockGraphon, BlockMatrix, LabeledGraph};
use crate::inequalities::{identifiability_one_slack, identifiability_two_slack, spectral_holder_slack};
use crate::linalg::Matrix;
use crate::mechanisms::{build_grid, log_em_distribution, max_log_ratio, CoefficientMode, MechanismConfig};
use crate::metrics::{delta2_sq, delta_ds, delta_ds_exact_k2, delta_hat2, delta_p, BirkhoffOptions};
use crate::rng::{self, derive_seed, Rng};

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Balanced SBM with average-degree parameters `d`.
    Sbm { b0: Vec<Vec<f64>>, d: Vec<f64> },
    /// Block graphon `W` sampled at sparsities `rho`.
    Graphon { w: Vec<Vec<f64>>, rho: Vec<f64> },
}

impl ModelSpec {
    fn matrix(&self) -> &Vec<Vec<f64>> {
        match self {
            ModelSpec::Sbm { b0, .. } => b0,
            ModelSpec::Graphon { w, .. } => w,
        }
    }

    fn sparsities(&self) -> &[f64] {
        match self {
            ModelSpec::Sbm { d, .. } => d,
            ModelSpec::Graphon { rho, .. } => rho,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[serde(alias = "sbm")]
    PrivateSbm,
    #[serde(alias = "graphon")]
    PrivateGraphon,
    Spectral,
    Subsample,
    Robust,
    Density,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub csv: Option<String>,
    pub summary: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelSpec,
    pub n: Vec<usize>,
    pub k: usize,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub scorer: ScorerMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: Vec<f64>,
    /// Entry bound `R`.
    #[serde(rename = "R", alias = "r")]
    pub r: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Grid step; defaults to `R/8`.
    #[serde(default)]
    pub step: Option<f64>,
    /// Overrides the estimator's normalized-only default.
    #[serde(default)]
    pub normalized_only: Option<bool>,
    /// Closeness threshold for subsample-and-aggregate.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub coefficient: CoefficientMode,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub audits: Vec<AuditKind>,
    /// Adds a wall-clock column; makes the output non-reproducible.
    #[serde(default)]
    pub record_runtime: bool,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_epsilon() -> Vec<f64> {
    vec![1.0]
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.epsilon.is_empty() || self.model.sparsities().is_empty() {
            return invalid("n, epsilon and the model's sparsity list must be nonempty");
        }
        if self.trials == 0 {
            return invalid("trials must be at least 1");
        }
        if !(self.r > 0.0) {
            return invalid("R must be positive");
        }
        if self.epsilon.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return invalid("every epsilon must be a positive real");
        }
        if self.model.sparsities().iter().any(|s| !(*s > 0.0)) {
            return invalid("sparsity parameters must be positive");
        }
        let b = self.truth()?;
        if b.k() != self.k {
            return invalid(format!("model matrix is {}×{} but k={}", b.k(), b.k(), self.k));
        }
        if self.n.iter().any(|&n| n == 0 || n % self.k != 0) {
            return invalid("every n must be a positive multiple of k");
        }
        if self.estimator == EstimatorKind::Subsample && self.tau.is_none() {
            return invalid("the subsample estimator needs tau");
        }
        if self.step.map_or(false, |s| !(s > 0.0)) {
            return invalid("grid step must be positive");
        }
        Ok(())
    }

    pub fn truth(&self) -> Result<BlockMatrix> {
        BlockMatrix::from_rows(self.model.matrix().clone(), self.r)
    }

    fn private_config(&self, seed: u64) -> PrivateConfig {
        let base = match self.estimator {
            EstimatorKind::PrivateGraphon => PrivateConfig::graphon(seed),
            _ => PrivateConfig::sbm(seed),
        };
        PrivateConfig {
            step: self.step,
            normalized_only: self.normalized_only.unwrap_or(base.normalized_only),
            scorer: self.scorer,
            coefficient: self.coefficient,
            ..base
        }
    }

    /// Config points in sweep order: `n`, then sparsity, then `ε`.
    pub fn points(&self) -> Vec<ConfigPoint> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &s in self.model.sparsities() {
                for &e in &self.epsilon {
                    out.push(ConfigPoint { index: out.len(), n, sparsity: s, epsilon: e });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub index: usize,
    pub n: usize,
    /// `d` for an SBM, `rho` for a graphon.
    pub sparsity: f64,
    pub epsilon: f64,
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub n: usize,
    pub sparsity: f64,
    pub epsilon: f64,
    pub trial: usize,
    pub seed: u64,
    pub delta2_sq: Option<f64>,
    pub density_error: Option<f64>,
    pub runtime_s: Option<f64>,
    pub flags: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
}

/// Expected edge density `Σ_{i≠j} Q₀(i,j) / (n(n−1))` of a planted graph.
pub fn expected_density(g: &LabeledGraph) -> Option<f64> {
    let p = g.edge_probs.as_ref()?;
    let k = p.block.rows();
    let mut cnt = vec![0.0f64; k];
    for &a in &p.groups {
        cnt[a] += 1.0;
    }
    let n = p.n() as f64;
    if n < 2.0 {
        return None;
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            total += cnt[a] * cnt[b] * p.block[(a, b)];
        }
        total -= cnt[a] * p.block[(a, a)];
    }
    Some(p.scale * total / (n * (n - 1.0)))
}

struct TrialOutput {
    delta2_sq: Option<f64>,
    density_error: Option<f64>,
    flags: Vec<String>,
}

fn sample_graph(cfg: &ExperimentConfig, truth: &BlockMatrix, point: &ConfigPoint, seed: u64) -> Result<LabeledGraph> {
    match &cfg.model {
        ModelSpec::Sbm { .. } => sample_sbm(truth, point.sparsity, point.n, seed),
        ModelSpec::Graphon { .. } => sample_graphon_graph(&BlockGraphon::new(truth.clone()), point.sparsity, point.n, seed),
    }
}

fn run_trial(cfg: &ExperimentConfig, truth: &BlockMatrix, point: &ConfigPoint, seed: u64) -> Result<TrialOutput> {
    let g = sample_graph(cfg, truth, point, derive_seed(seed, 1))?;
    let est_seed = derive_seed(seed, 2);
    let opts = BirkhoffOptions { seed: est_seed, ..Default::default() };
    let rho_true = expected_density(&g);
    let rel = |v: f64| rho_true.filter(|r| *r > 0.0).map(|r| (v - r).abs() / r);
    let (k, eps, r) = (cfg.k, point.epsilon, cfg.r);
    Ok(match cfg.estimator {
        EstimatorKind::PrivateSbm | EstimatorKind::PrivateGraphon => {
            let pc = cfg.private_config(est_seed);
            let rep = if cfg.estimator == EstimatorKind::PrivateSbm {
                private_sbm_estimate(&g, k, eps, r, &pc)?
            } else {
                private_graphon_estimate(&g, k, eps, r, &pc)?.1
            };
            let mut flags = rep.flags.clone();
            if let Some(s) = rep.scorer {
                flags.push(format!("scorer={s}"));
            }
            TrialOutput {
                delta2_sq: Some(delta2_sq(rep.b_hat.entries(), truth.entries(), &opts)?),
                density_error: rep.density.as_ref().and_then(|d| rel(d.value)),
                flags,
            }
        }
        EstimatorKind::Spectral => {
            let (b, _) = nonprivate_spectral_estimate(&g, k, est_seed)?;
            TrialOutput {
                delta2_sq: Some(delta2_sq(b.entries(), truth.entries(), &opts)?),
                density_error: rel(empirical_density(&g)),
                flags: vec!["not_private".into()],
            }
        }
        EstimatorKind::Subsample => {
            let rep = subsample_aggregate_estimate(&g, k, eps, cfg.tau.unwrap_or(0.0), r, &cfg.private_config(est_seed))?;
            TrialOutput { delta2_sq: Some(delta2_sq(rep.b_hat.entries(), truth.entries(), &opts)?), density_error: None, flags: rep.flags }
        }
        EstimatorKind::Robust => {
            let d = match cfg.model {
                ModelSpec::Sbm { .. } => point.sparsity,
                ModelSpec::Graphon { .. } => point.sparsity * point.n as f64,
            };
            let est = robust_sbm_estimate(&g, d, k, r, est_seed)?;
            let mut flags = est.flags;
            flags.push("not_private".into());
            TrialOutput { delta2_sq: Some(delta2_sq(est.b_hat.entries(), truth.entries(), &opts)?), density_error: None, flags }
        }
        EstimatorKind::Density => {
            let mut noise = rng::stream(est_seed, rng::streams::NOISE);
            let d = target_density_estimator(&g, eps, r, &mut noise)?;
            TrialOutput { delta2_sq: None, density_error: rel(d.value), flags: d.flags }
        }
    })
}

/// Runs every (config point, trial) pair. Stage failures become flagged rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let truth = cfg.truth()?;
    let points = cfg.points();
    let jobs: Vec<(ConfigPoint, usize)> = points.iter().flat_map(|p| (0..cfg.trials).map(move |t| (*p, t))).collect();
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(point, trial)) = jobs.get(j) else {
                    break;
                };
                let seed = derive_seed(derive_seed(cfg.seed, point.index as u64), trial as u64);
                let start = Instant::now();
                let outcome = run_trial(cfg, &truth, &point, seed);
                let runtime = cfg.record_runtime.then(|| start.elapsed().as_secs_f64());
                let row = match outcome {
                    Ok(o) => SweepRow {
                        point: point.index,
                        n: point.n,
                        sparsity: point.sparsity,
                        epsilon: point.epsilon,
                        trial,
                        seed,
                        delta2_sq: o.delta2_sq,
                        density_error: o.density_error,
                        runtime_s: runtime,
                        flags: o.flags.join(";"),
                        error: String::new(),
                    },
                    Err(e) => SweepRow {
                        point: point.index,
                        n: point.n,
                        sparsity: point.sparsity,
                        epsilon: point.epsilon,
                        trial,
                        seed,
                        delta2_sq: None,
                        density_error: None,
                        runtime_s: runtime,
                        flags: "failed".into(),
                        error: e.to_string(),
                    },
                };
                slots.lock().expect("no poisoned workers")[j] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect();
    Ok(SweepResult { config: cfg.clone(), rows })
}

pub fn write_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Sample mean and standard error (`sd / √m`, zero for a single value).
pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    let m = values.len();
    if m == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    Some((mean, (var / m as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub point: usize,
    pub n: usize,
    pub sparsity: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub failed: usize,
    pub mean_delta2_sq: Option<f64>,
    pub stderr_delta2_sq: Option<f64>,
    pub mean_density_error: Option<f64>,
    pub stderr_density_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub name: String,
    pub estimator: EstimatorKind,
    pub scorer: ScorerMode,
    pub seed: u64,
    pub trials: usize,
    pub points: Vec<PointSummary>,
    /// Every distinct flag raised by any trial.
    pub flags: Vec<String>,
    pub errors: Vec<String>,
}

pub fn summarize(result: &SweepResult) -> Summary {
    let cfg = &result.config;
    let points = cfg
        .points()
        .iter()
        .map(|p| {
            let rows: Vec<&SweepRow> = result.rows.iter().filter(|r| r.point == p.index).collect();
            let d2: Vec<f64> = rows.iter().filter_map(|r| r.delta2_sq).collect();
            let de: Vec<f64> = rows.iter().filter_map(|r| r.density_error).collect();
            let (md, sd) = mean_stderr(&d2).map_or((None, None), |(a, b)| (Some(a), Some(b)));
            let (me, se) = mean_stderr(&de).map_or((None, None), |(a, b)| (Some(a), Some(b)));
            PointSummary {
                point: p.index,
                n: p.n,
                sparsity: p.sparsity,
                epsilon: p.epsilon,
                trials: rows.len(),
                failed: rows.iter().filter(|r| !r.error.is_empty()).count(),
                mean_delta2_sq: md,
                stderr_delta2_sq: sd,
                mean_density_error: me,
                stderr_density_error: se,
            }
        })
        .collect();
    let flags: BTreeSet<String> =
        result.rows.iter().flat_map(|r| r.flags.split(';').filter(|f| !f.is_empty()).map(String::from)).collect();
    let errors: BTreeSet<String> = result.rows.iter().filter(|r| !r.error.is_empty()).map(|r| r.error.clone()).collect();
    Summary {
        schema: SCHEMA_VERSION.into(),
        name: cfg.name.clone(),
        estimator: cfg.estimator,
        scorer: cfg.scorer,
        seed: cfg.seed,
        trials: cfg.trials,
        points,
        flags: flags.into_iter().collect(),
        errors: errors.into_iter().collect(),
    }
}

// ---------------------------------------------------------------------------
// plot data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    N,
    Sparsity,
    Epsilon,
    Trial,
    Delta2Sq,
    DensityError,
    Runtime,
}

impl std::str::FromStr for Field {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "n" => Field::N,
            "sparsity" | "d" | "rho" => Field::Sparsity,
            "epsilon" | "eps" => Field::Epsilon,
            "trial" => Field::Trial,
            "delta2_sq" => Field::Delta2Sq,
            "density_error" => Field::DensityError,
            "runtime_s" | "runtime" => Field::Runtime,
            other => return invalid(format!("unknown field '{other}'")),
        })
    }
}

impl Field {
    fn get(self, r: &SweepRow) -> Option<f64> {
        match self {
            Field::N => Some(r.n as f64),
            Field::Sparsity => Some(r.sparsity),
            Field::Epsilon => Some(r.epsilon),
            Field::Trial => Some(r.trial as f64),
            Field::Delta2Sq => r.delta2_sq,
            Field::DensityError => r.density_error,
            Field::Runtime => r.runtime_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub group: String,
    pub x: f64,
    pub mean_y: f64,
    pub stderr_y: f64,
    pub n_trials: usize,
}

/// Groups rows by `groupby` (everything in one group when `None`) and `x`,
/// then averages `y`; rows without a `y` value are skipped.
pub fn plot_rows(rows: &[SweepRow], x: Field, y: Field, groupby: Option<Field>) -> Vec<PlotRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let (Some(xv), Some(_)) = (x.get(r), y.get(r)) else {
            continue;
        };
        let g = groupby.and_then(|f| f.get(r)).map_or_else(|| "all".to_string(), |v| format!("{v}"));
        if !keys.iter().any(|(kg, kx)| *kg == g && *kx == xv) {
            keys.push((g, xv));
        }
    }
    keys.into_iter()
        .map(|(g, xv)| {
            let ys: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    x.get(r) == Some(xv)
                        && groupby.and_then(|f| f.get(r)).map_or_else(|| "all".to_string(), |v| format!("{v}")) == g
                })
                .filter_map(|r| y.get(r))
                .collect();
            let (mean_y, stderr_y) = mean_stderr(&ys).expect("key came from a row with y");
            PlotRow { group: g, x: xv, mean_y, stderr_y, n_trials: ys.len() }
        })
        .collect()
}

/// Tidy CSV with columns `group,x,mean_y,stderr_y,n_trials`.
pub fn emit_plotdata(rows: &[SweepRow], x: &str, y: &str, groupby: Option<&str>) -> Result<String> {
    let x: Field = x.parse()?;
    let y: Field = y.parse()?;
    let g = groupby.map(str::parse::<Field>).transpose()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in plot_rows(rows, x, y, g) {
        w.serialize(r).map_err(csv_err)?;
    }
    if plot_rows(rows, x, y, g).is_empty() {
        w.write_record(["group", "x", "mean_y", "stderr_y", "n_trials"]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// audits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditKind {
    Privacy,
    Sensitivity,
    MetricsOracle,
    Inequality,
}

impl std::str::FromStr for AuditKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "privacy" => AuditKind::Privacy,
            "sensitivity" => AuditKind::Sensitivity,
            "metrics-oracle" | "metrics_oracle" | "metrics" => AuditKind::MetricsOracle,
            "inequality" | "inequalities" => AuditKind::Inequality,
            other => return invalid(format!("unknown audit '{other}'")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub seed: u64,
    /// Cases per check (adjacent pairs, graphs or random instances).
    pub cases: usize,
    pub n: usize,
    pub k: usize,
    pub r: f64,
    pub epsilons: Vec<f64>,
    /// Grid step for mechanism-based checks.
    pub step: f64,
    pub coefficient: CoefficientMode,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            cases: 20,
            n: 6,
            k: 2,
            r: 2.0,
            epsilons: vec![0.5, 1.0, 2.0],
            step: 1.0,
            coefficient: CoefficientMode::Strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCase {
    pub name: String,
    pub passed: bool,
    /// Allowed minus observed; negative when the case fails.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub kind: AuditKind,
    pub passed: bool,
    pub worst_margin: f64,
    pub cases: Vec<AuditCase>,
}

impl AuditReport {
    fn new(kind: AuditKind, cases: Vec<AuditCase>) -> Self {
        AuditReport {
            kind,
            passed: cases.iter().all(|c| c.passed),
            worst_margin: cases.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min),
            cases,
        }
    }
}

fn case(name: String, margin: f64, slack: f64) -> AuditCase {
    AuditCase { name, passed: margin >= -slack, margin }
}

fn random_graph(n: usize, p: f64, rng: &mut Rng) -> LabeledGraph {
    let edges: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|_| rng::unit_f64(rng) < p).collect();
    LabeledGraph::from_edges(n, edges).expect("indices in range")
}

fn random_neighbourhood(n: usize, v: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).filter(|&u| u != v && rng::unit_f64(rng) < 0.5).collect()
}

/// A `Y = A/ρ` scale that pushes some rows over the cap (exercising the
/// extension LP) on odd cases, and one that keeps every row under it otherwise.
fn audit_rho(i: usize, n: usize, r: f64) -> f64 {
    if i % 2 == 0 {
        0.5
    } else {
        (n as f64 - 1.0) / (1.5 * 20.0 * r * n as f64)
    }
}

fn random_block_matrix(k: usize, hi: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = rng.gen_range(0.0..hi);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

fn privacy_audit(cfg: &AuditConfig) -> Result<Vec<AuditCase>> {
    let mut rng = rng::stream(cfg.seed, rng::streams::SOLVER);
    let (n, k, r) = (cfg.n, cfg.k, cfg.r);
    let grid = build_grid(k, r, cfg.step, false)?;
    let sensitivity = 40.0 * n as f64 * r * r;
    let mut cases = Vec::new();
    for i in 0..cfg.cases {
        let g = random_graph(n, 0.5, &mut rng);
        let v = rng::uniform_index(&mut rng, n);
        let h = g.rewire_vertex(v, &random_neighbourhood(n, v, &mut rng))?;
        let rho = audit_rho(i, n, r);
        let (sg, sh) = (lipschitz_grid_scores(&g, rho, r, &grid)?, lipschitz_grid_scores(&h, rho, r, &grid)?);
        for &eps in &cfg.epsilons {
            let mech = MechanismConfig::new(eps, sensitivity, cfg.coefficient, 0)?;
            let ratio = max_log_ratio(&log_em_distribution(&sg, &mech)?, &log_em_distribution(&sh, &mech)?);
            cases.push(case(format!("mechanism pair={i} eps={eps}"), eps - ratio, 1e-9));
        }
        // Laplace stages: the log-ratio of the output densities is |Δ| / scale.
        let eps = cfg.epsilons[i % cfg.epsilons.len()];
        let coarse_scale = 10.0 / (n as f64 * eps);
        let dr = (empirical_density(&g) - empirical_density(&h)).abs();
        cases.push(case(format!("coarse density pair={i} eps={eps}"), eps - dr / coarse_scale, 1e-9));
        let degree_bound = 1.0 + (i % 3) as f64;
        let pairs = n as f64 * (n as f64 - 1.0) / 2.0;
        let fine_scale = 2.0 * degree_bound / (eps * pairs);
        let de = (extended_edge_count(&g, degree_bound) - extended_edge_count(&h, degree_bound)).abs() / pairs;
        cases.push(case(format!("bounded-degree density pair={i} D={degree_bound} eps={eps}"), eps - de / fine_scale, 1e-9));
    }
    // Counting score of subsample-and-aggregate: one part's estimate changes.
    let agg_grid = build_grid(k, r, cfg.step, false)?;
    let opts = BirkhoffOptions { seed: cfg.seed, ..Default::default() };
    for i in 0..cfg.cases {
        let parts = 6;
        let mut est: Vec<Matrix> = (0..parts).map(|_| random_block_matrix(k, r, &mut rng)).collect();
        let tau = 0.5;
        let count = |est: &[Matrix]| -> Result<Vec<f64>> {
            agg_grid
                .candidates
                .iter()
                .map(|b| {
                    let mut c = 0.0;
                    for e in est {
                        if delta2_sq(e, b.entries(), &opts)?.max(0.0).sqrt() <= tau {
                            c += 1.0;
                        }
                    }
                    Ok(c)
                })
                .collect()
        };
        let before = count(&est)?;
        let t = rng::uniform_index(&mut rng, parts);
        // snap the changed estimate onto a candidate so the count actually moves
        est[t] = agg_grid.candidates[rng::uniform_index(&mut rng, agg_grid.len())].entries().clone();
        let after = count(&est)?;
        for &eps in &cfg.epsilons {
            let mech = MechanismConfig::new(eps, 1.0, CoefficientMode::Strict, 0)?;
            let ratio = max_log_ratio(&log_em_distribution(&before, &mech)?, &log_em_distribution(&after, &mech)?);
            cases.push(case(format!("aggregation pair={i} eps={eps}"), eps - ratio, 1e-9));
        }
    }
    Ok(cases)
}

/// All neighbourhoods of `v` in an `n`-vertex graph, as subsets of the other vertices.
fn all_neighbourhoods(n: usize, v: usize) -> impl Iterator<Item = Vec<usize>> {
    let others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
    (0u64..1 << others.len()).map(move |mask| others.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &u)| u).collect())
}

/// Exhaustive single-vertex rewirings: `|Δscore| ≤ 40 n R ‖B‖_∞` for every candidate.
pub fn sensitivity_case(g: &LabeledGraph, v: usize, rho: f64, r: f64, step: f64, k: usize) -> Result<f64> {
    let n = g.n();
    let grid = build_grid(k, r, step, false)?;
    let base = lipschitz_grid_scores(g, rho, r, &grid)?;
    let mut worst = f64::INFINITY;
    for nb in all_neighbourhoods(n, v) {
        let h = g.rewire_vertex(v, &nb)?;
        let s = lipschitz_grid_scores(&h, rho, r, &grid)?;
        for ((a, b), cand) in base.iter().zip(&s).zip(&grid.candidates) {
            let bound = 40.0 * n as f64 * r * cand.max_entry();
            worst = worst.min(bound - (a - b).abs());
        }
    }
    Ok(worst)
}

fn sensitivity_audit(cfg: &AuditConfig) -> Result<Vec<AuditCase>> {
    let mut rng = rng::stream(cfg.seed, rng::streams::SOLVER + 1);
    let mut cases = Vec::new();
    for i in 0..cfg.cases {
        // LP-backed cases stay small: each rewiring solves an LP per labelling and candidate.
        let n = if i % 2 == 0 { cfg.n } else { cfg.n.min(6) };
        let g = random_graph(n, rng.gen_range(0.2..0.8), &mut rng);
        let v = rng::uniform_index(&mut rng, n);
        let margin = sensitivity_case(&g, v, audit_rho(i, n, cfg.r), cfg.r, cfg.step, cfg.k)?;
        cases.push(case(format!("graph={i} n={n} vertex={v}"), margin, 1e-9));
    }
    Ok(cases)
}

fn metrics_audit(cfg: &AuditConfig) -> Result<Vec<AuditCase>> {
    let mut rng = rng::stream(cfg.seed, rng::streams::SOLVER + 2);
    let opts = BirkhoffOptions { seed: cfg.seed, ..Default::default() };
    let mut cases = Vec::new();
    for i in 0..cfg.cases {
        let b = random_block_matrix(2, cfg.r, &mut rng);
        let b0 = random_block_matrix(2, cfg.r, &mut rng);
        let fw = delta_ds(&b, &b0, &opts)?.value;
        let exact = delta_ds_exact_k2(&b, &b0)?.0;
        cases.push(case(format!("k=2 pair={i}"), 1e-6 - (fw - exact).abs(), 0.0));
    }
    Ok(cases)
}

fn inequality_audit(cfg: &AuditConfig) -> Result<Vec<AuditCase>> {
    let mut rng = rng::stream(cfg.seed, rng::streams::SOLVER + 3);
    let opts = BirkhoffOptions { seed: cfg.seed, ..Default::default() };
    let mut cases = Vec::new();
    for i in 0..cfg.cases {
        for k in [2usize, 3] {
            let b = random_block_matrix(k, cfg.r, &mut rng);
            let b0 = random_block_matrix(k, cfg.r, &mut rng);
            let hat = delta_hat2(&b, &b0)?.powi(2);
            let ds = delta_ds(&b, &b0, &opts)?.value;
            let p = delta_p(&b, &b0)?;
            let worst = (ds - hat).min(p - ds).min((k as f64).powi(4) * ds - p);
            cases.push(case(format!("sandwich k={k} pair={i}"), worst, 1e-6));
        }
        let n = cfg.n - cfg.n % cfg.k;
        cases.push(case(format!("identifiability-one case={i}"), identifiability_one_slack(n, cfg.k, cfg.r, 1.0, &mut rng)?, 1e-6));
        cases.push(case(format!("identifiability-two case={i}"), identifiability_two_slack(n, cfg.k, cfg.r, 1.0, &mut rng)?, 1e-6));
        cases.push(case(format!("spectral-holder case={i}"), spectral_holder_slack(n.max(2 * cfg.k), cfg.k, &mut rng)?, 1e-9));
    }
    Ok(cases)
}

pub fn run_audit(kind: AuditKind, cfg: &AuditConfig) -> Result<AuditReport> {
    if cfg.cases == 0 || cfg.epsilons.is_empty() || cfg.n < 2 || cfg.k == 0 || cfg.n % cfg.k != 0 {
        return invalid("audit needs cases ≥ 1, a nonempty ε list and k | n");
    }
    let cases = match kind {
        AuditKind::Privacy => privacy_audit(cfg)?,
        AuditKind::Sensitivity => sensitivity_audit(cfg)?,
        AuditKind::MetricsOracle => metrics_audit(cfg)?,
        AuditKind::Inequality => inequality_audit(cfg)?,
    };
    Ok(AuditReport::new(kind, cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            model: ModelSpec::Sbm { b0: vec![vec![1.5, 0.5], vec![0.5, 1.5]], d: vec![6.0] },
            n: vec![40],
            k: 2,
            estimator: EstimatorKind::Spectral,
            scorer: ScorerMode::Auto,
            epsilon: vec![1.0],
            r: 4.0,
            trials: 1,
            seed: 3,
            step: None,
            normalized_only: None,
            tau: None,
            coefficient: CoefficientMode::Strict,
            output: OutputPaths::default(),
            audits: vec![],
            record_runtime: false,
            workers: Some(2),
        }
    }

    #[test]
    fn one_point_one_trial_gives_one_row() {
        let res = run_experiment(&small_config()).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert!(res.rows[0].error.is_empty());
        assert!(res.rows[0].delta2_sq.unwrap() >= 0.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut cfg = small_config();
        cfg.trials = 3;
        cfg.epsilon = vec![0.5, 1.0];
        let csv = |c: &ExperimentConfig| {
            let mut buf = Vec::new();
            write_csv(&run_experiment(c).unwrap().rows, &mut buf).unwrap();
            buf
        };
        let a = csv(&cfg);
        cfg.workers = Some(1);
        assert_eq!(a, csv(&cfg));
        assert_eq!(read_csv(&a[..]).unwrap().len(), 6);
    }

    #[test]
    fn failures_become_flagged_rows() {
        let mut cfg = small_config();
        cfg.estimator = EstimatorKind::Subsample;
        cfg.tau = Some(0.5);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].flags, "failed");
        assert!(!summarize(&res).errors.is_empty());
    }

    #[test]
    fn plotdata_groups_and_stats() {
        let row = |eps: f64, trial: usize, y: f64| SweepRow {
            point: 0,
            n: 10,
            sparsity: 2.0,
            epsilon: eps,
            trial,
            seed: 0,
            delta2_sq: Some(y),
            density_error: None,
            runtime_s: None,
            flags: String::new(),
            error: String::new(),
        };
        let rows: Vec<SweepRow> = [0.5, 1.0, 2.0, 4.0].iter().flat_map(|&e| (0..3).map(move |t| row(e, t, e + t as f64))).collect();
        let out = emit_plotdata(&rows, "n", "delta2_sq", Some("epsilon")).unwrap();
        assert_eq!(out.lines().count(), 5);
        let p = plot_rows(&rows, Field::N, Field::Delta2Sq, Some(Field::Epsilon));
        assert!((p[0].mean_y - 1.5).abs() < 1e-12 && (p[0].stderr_y - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(emit_plotdata(&rows, "nope", "delta2_sq", None).is_err());
        let single = emit_plotdata(&rows[..1], "n", "delta2_sq", None).unwrap();
        assert_eq!(single.lines().count(), 2);
    }

    #[test]
    fn quick_audits_pass() {
        let cfg = AuditConfig { cases: 3, ..Default::default() };
        for kind in [AuditKind::Privacy, AuditKind::Sensitivity, AuditKind::MetricsOracle, AuditKind::Inequality] {
            let rep = run_audit(kind, &cfg).unwrap();
            assert!(rep.passed, "{kind:?}: {:?}", rep.cases.iter().filter(|c| !c.passed).collect::<Vec<_>>());
        }
    }

    #[test]
    fn expected_density_matches_dense_average() {
        let b0 = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 4.0).unwrap();
        let g = sample_sbm(&b0, 4.0, 20, 1).unwrap();
        let q = g.edge_probs.as_ref().unwrap().to_dense();
        assert!((expected_density(&g).unwrap() - q.sum() / (20.0 * 19.0)).abs() < 1e-12);
    }
}
