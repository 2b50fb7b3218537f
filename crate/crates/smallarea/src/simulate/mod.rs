//! Repeated-sampling evaluation of the area estimators.
//!
//! [`run_scenario`] regenerates a synthetic population from one of the
//! built-in generating processes per replicate, draws a stratified
//! sample, runs the requested estimators together with their bootstrap
//! MSEs, and aggregates the performance measures of [`metrics`].
//! [`run_db_protocol`] runs the same machinery around a fixed
//! pseudo-population supplied by the caller, so only the sampling step
//! varies between replicates.
//!
//! Mean targets are predicted analytically (the infinite-replicate
//! limit of the Monte Carlo predictor); other functionals use `l`
//! Monte Carlo draws. A replicate in which any requested estimator
//! fails is excluded for every estimator, keeping the replicate sets
//! aligned; failures are counted per estimator in the report.

pub mod metrics;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dist::{self, Family, Param, ParamVector};
use crate::eblup::{fit_bhf, BhfControl, TransformKind};
use crate::error::{Error, Result};
use crate::fit::{fit_gamlss, FitControl};
use crate::model::{Column, Dataset, ModelSpec, Role};
use crate::mse::{bootstrap_mse, bootstrap_mse_eblup, MseControl};
use crate::numeric;
use crate::predict::{AreaFunctional, LineRule, MedianScope};
use crate::rng::SeedSequence;

pub use metrics::{
    compute_metrics, AreaSummary, ConfigEcho, EstimatorTraces, MetricBlock, SimulationReport,
    TraceRow,
};

/// Warning messages kept in a report before further ones are dropped.
const MAX_WARNINGS: usize = 20;

/// The twelve built-in scenarios: four generating families, three
/// random-effect settings each. The letter fixes the family, the
/// target functional and the fitted models; the digit fixes the
/// random-effect standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
    C1,
    C2,
    C3,
    D1,
    D2,
    D3,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 12] = [
        ScenarioId::A1,
        ScenarioId::A2,
        ScenarioId::A3,
        ScenarioId::B1,
        ScenarioId::B2,
        ScenarioId::B3,
        ScenarioId::C1,
        ScenarioId::C2,
        ScenarioId::C3,
        ScenarioId::D1,
        ScenarioId::D2,
        ScenarioId::D3,
    ];

    fn letter(self) -> char {
        match self {
            ScenarioId::A1 | ScenarioId::A2 | ScenarioId::A3 => 'A',
            ScenarioId::B1 | ScenarioId::B2 | ScenarioId::B3 => 'B',
            ScenarioId::C1 | ScenarioId::C2 | ScenarioId::C3 => 'C',
            ScenarioId::D1 | ScenarioId::D2 | ScenarioId::D3 => 'D',
        }
    }

    fn setting(self) -> usize {
        match self {
            ScenarioId::A1 | ScenarioId::B1 | ScenarioId::C1 | ScenarioId::D1 => 1,
            ScenarioId::A2 | ScenarioId::B2 | ScenarioId::C2 | ScenarioId::D2 => 2,
            ScenarioId::A3 | ScenarioId::B3 | ScenarioId::C3 | ScenarioId::D3 => 3,
        }
    }

    /// The functional targeted by the scenario: area means for the
    /// continuous-response families, the 60%-of-median poverty rate
    /// for the income-shaped family.
    pub fn functional(self) -> AreaFunctional {
        match self.letter() {
            'D' => AreaFunctional::poverty_rate_60(),
            _ => AreaFunctional::Mean,
        }
    }

    /// The distributional model the model-based estimator fits.
    pub fn model_spec(self) -> ModelSpec {
        match self.letter() {
            'A' => ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true),
            'B' => ModelSpec::new(Family::Normal)
                .with_terms(Param::Mu, &["x1", "x2"], true)
                .with_terms(Param::Sigma, &["x2"], true),
            'C' => ModelSpec::new(Family::LogNormal)
                .with_terms(Param::Mu, &["x1"], true)
                .with_terms(Param::Sigma, &["x2"], true),
            _ => {
                let base = ModelSpec::new(Family::Dagum).with_terms(Param::Mu, &["x1"], true);
                match self.setting() {
                    1 => base.with_terms(Param::Nu, &["x2"], false),
                    2 => base.with_terms(Param::Sigma, &["x2"], true),
                    _ => base
                        .with_terms(Param::Sigma, &["x2"], true)
                        .with_terms(Param::Nu, &["x2"], false),
                }
            }
        }
    }

    /// Covariates of the nested-error competitor.
    pub fn eblup_covariates(self) -> Vec<&'static str> {
        match self.letter() {
            'B' => vec!["x1", "x2"],
            _ => vec!["x1"],
        }
    }

    /// Transform of the nested-error competitor: none on the Normal
    /// families, Box-Cox on the skewed ones.
    pub fn eblup_transform(self) -> TransformKind {
        match self.letter() {
            'A' | 'B' => TransformKind::None,
            _ => TransformKind::BoxCox,
        }
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.letter(), self.setting())
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScenarioId> {
        let up = s.trim().to_ascii_uppercase();
        ScenarioId::ALL
            .iter()
            .copied()
            .find(|id| id.to_string() == up)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario '{s}'; expected one of A1..A3, B1..B3, C1..C3, D1..D3"
                ))
            })
    }
}

/// The estimators a run can include.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Design-based estimator from the area's own sample.
    Direct,
    /// Distributional model with the bootstrap MSE.
    Gamlss,
    /// Nested-error competitor with the bootstrap MSE.
    Eblup,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] =
        [EstimatorKind::Direct, EstimatorKind::Gamlss, EstimatorKind::Eblup];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Direct => "direct",
            EstimatorKind::Gamlss => "gamlss",
            EstimatorKind::Eblup => "eblup",
        }
    }
}

fn default_n_total() -> usize {
    50_000
}
fn default_j() -> usize {
    50
}
fn default_t() -> usize {
    500
}
fn default_b() -> usize {
    200
}
fn default_l() -> usize {
    100
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn default_n_min() -> usize {
    4
}
fn default_n_max() -> usize {
    61
}
fn default_divisor() -> usize {
    20
}

/// Configuration of one synthetic-population run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    /// Population size, split evenly over the areas.
    #[serde(default = "default_n_total")]
    pub n_total: usize,
    /// Number of areas.
    #[serde(default = "default_j")]
    pub j: usize,
    /// Simulation replicates.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Bootstrap replicates per MSE estimate.
    #[serde(default = "default_b")]
    pub b: usize,
    /// Monte Carlo draws per prediction.
    #[serde(default = "default_l")]
    pub l: usize,
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    /// Smallest area sample size.
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    /// Largest area sample size.
    #[serde(default = "default_n_max")]
    pub n_max: usize,
}

impl ScenarioConfig {
    /// The published defaults, scaled down by callers as needed.
    pub fn new(scenario: ScenarioId, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            n_total: default_n_total(),
            j: default_j(),
            t: default_t(),
            b: default_b(),
            l: default_l(),
            seed,
            estimators: default_estimators(),
            n_min: default_n_min(),
            n_max: default_n_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::Config("a run needs at least two areas".into()));
        }
        if self.n_total % self.j != 0 {
            return Err(Error::Config(format!(
                "population size {} does not split evenly over {} areas",
                self.n_total, self.j
            )));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "sample size range [{}, {}] is empty or zero",
                self.n_min, self.n_max
            )));
        }
        if self.n_max > self.n_total / self.j {
            return Err(Error::Config(format!(
                "largest sample size {} exceeds the area population {}",
                self.n_max,
                self.n_total / self.j
            )));
        }
        if self.t == 0 {
            return Err(Error::Config("a run needs at least one replicate".into()));
        }
        if self.b < 2 {
            return Err(Error::Config(
                "the bootstrap needs at least two replicates".into(),
            ));
        }
        if self.l == 0 {
            return Err(Error::Config(
                "Monte Carlo prediction needs at least one draw".into(),
            ));
        }
        validate_estimators(&self.estimators)
    }
}

fn validate_estimators(estimators: &[EstimatorKind]) -> Result<()> {
    if estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    for (i, e) in estimators.iter().enumerate() {
        if estimators[..i].contains(e) {
            return Err(Error::Config(format!(
                "estimator '{}' requested twice",
                e.name()
            )));
        }
    }
    Ok(())
}

/// Stratified sample sizes: `j` values evenly spaced from `n_min` to
/// `n_max`, rounded to integers.
pub fn allocation(j: usize, n_min: usize, n_max: usize) -> Vec<usize> {
    (0..j)
        .map(|k| {
            let f = if j == 1 {
                0.0
            } else {
                k as f64 / (j - 1) as f64
            };
            (n_min as f64 + f * (n_max - n_min) as f64).round() as usize
        })
        .collect()
}

/// The fixed part of a synthetic population: area labels, unit ids and
/// two standard-Normal covariates, shared by every replicate.
pub struct Frame {
    pub area: Vec<String>,
    pub unit: Vec<String>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Sorted distinct area labels.
    pub labels: Vec<String>,
    area_index: Vec<usize>,
}

/// Build the covariate frame for a configuration; the draw comes from
/// the root sequence's first stream so it is fixed across replicates.
pub fn make_frame(cfg: &ScenarioConfig, root: &SeedSequence) -> Frame {
    let n = cfg.n_total;
    let n_j = n / cfg.j;
    let area_width = cfg.j.to_string().len();
    let unit_width = n.to_string().len();
    let mut rng = root.stream(&[0]);
    let x1: Vec<f64> = (0..n).map(|_| dist::standard_normal(&mut rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| dist::standard_normal(&mut rng)).collect();
    let mut area = Vec::with_capacity(n);
    let mut unit = Vec::with_capacity(n);
    let mut area_index = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(cfg.j);
    for j in 0..cfg.j {
        let label = format!("a{:0width$}", j + 1, width = area_width);
        labels.push(label.clone());
        for _ in 0..n_j {
            area.push(label.clone());
            area_index.push(j);
            unit.push(format!("u{:0width$}", unit.len() + 1, width = unit_width));
        }
    }
    Frame {
        area,
        unit,
        x1,
        x2,
        labels,
        area_index,
    }
}

fn draw_area_effects(j: usize, sd: f64, rng: &mut impl RngCore) -> Vec<f64> {
    (0..j).map(|_| sd * dist::standard_normal(rng)).collect()
}

/// One replicate's response vector on `frame`, drawn from the
/// scenario's generating process. Area effects are drawn first (in
/// parameter order), then unit-level noise in row order.
pub fn generate_responses(
    id: ScenarioId,
    frame: &Frame,
    rng: &mut impl RngCore,
) -> Result<Vec<f64>> {
    let n_areas = frame.labels.len();
    let n = frame.x1.len();
    let mut y = Vec::with_capacity(n);
    match id.letter() {
        'A' => {
            let (sd_g, sd_e) = match id.setting() {
                1 => (4.0, 20.0),
                2 => (6.0, 22.0),
                _ => (8.0, 24.0),
            };
            let g = draw_area_effects(n_areas, sd_g, rng);
            for i in 0..n {
                y.push(
                    100.0
                        + 4.0 * frame.x1[i]
                        + g[frame.area_index[i]]
                        + sd_e * dist::standard_normal(rng),
                );
            }
        }
        'B' => {
            let sd_gs = match id.setting() {
                1 => 0.8,
                2 => 1.0,
                _ => 1.2,
            };
            let gm = draw_area_effects(n_areas, 6.0, rng);
            let gs = draw_area_effects(n_areas, sd_gs, rng);
            for i in 0..n {
                let a = frame.area_index[i];
                let w = gs[a] + 0.1 * frame.x2[i];
                y.push(
                    100.0 + 10.0 * frame.x1[i] + 8.0 * frame.x2[i] + gm[a]
                        + w * 22.0 * dist::standard_normal(rng),
                );
            }
        }
        'C' => {
            let (sd_gm, sd_gs) = match id.setting() {
                1 => (0.6, 0.2),
                2 => (0.4, 0.3),
                _ => (0.6, 0.4),
            };
            let gm = draw_area_effects(n_areas, sd_gm, rng);
            let gs = draw_area_effects(n_areas, sd_gs, rng);
            for i in 0..n {
                let a = frame.area_index[i];
                let sigma = (-2.0 + 0.5 * frame.x2[i] + gs[a]).exp();
                y.push((7.0 + frame.x1[i] + gm[a] + sigma * dist::standard_normal(rng)).exp());
            }
        }
        _ => {
            let gm = draw_area_effects(n_areas, 0.15, rng);
            let gs = if id.setting() >= 2 {
                draw_area_effects(n_areas, 0.1, rng)
            } else {
                vec![0.0; n_areas]
            };
            for i in 0..n {
                let a = frame.area_index[i];
                let b = (3.0 + 1.5 * frame.x1[i] + gm[a]).exp();
                let sigma = if id.setting() == 1 {
                    3.4
                } else {
                    (1.2 + 0.1 * frame.x2[i] + gs[a]).exp()
                };
                let nu = if id.setting() == 2 {
                    0.6
                } else {
                    (-0.4 + 0.1 * frame.x2[i]).exp()
                };
                y.push(dist::sample_one(
                    Family::Dagum,
                    &ParamVector::three(b, sigma, nu),
                    rng,
                )?);
            }
        }
    }
    Ok(y)
}

/// A frame plus one realised response vector as a population dataset.
pub fn population_dataset(frame: &Frame, y: Vec<f64>) -> Result<Dataset> {
    let mut covariates = IndexMap::new();
    covariates.insert("x1".to_string(), Column::Numeric(frame.x1.clone()));
    covariates.insert("x2".to_string(), Column::Numeric(frame.x2.clone()));
    Dataset::from_columns(
        Role::Population,
        frame.area.clone(),
        Some(frame.unit.clone()),
        y.into_iter().map(Some).collect(),
        covariates,
    )
}

/// Sorted distinct labels and, per label, the row indices carrying it.
pub fn rows_by_area(data: &Dataset) -> (Vec<String>, Vec<Vec<usize>>) {
    let labels = data.distinct_areas();
    let pos: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut rows = vec![Vec::new(); labels.len()];
    for (i, a) in data.area_labels().iter().enumerate() {
        rows[pos[a.as_str()]].push(i);
    }
    (labels, rows)
}

/// True functionals per area from a complete population.
fn truth_values(
    pop: &Dataset,
    labels: &[String],
    rows: &[Vec<usize>],
    zeta: &AreaFunctional,
) -> Result<Vec<f64>> {
    let mut y = Vec::with_capacity(pop.n_units());
    for (i, v) in pop.y().iter().enumerate() {
        match v {
            Some(x) => y.push(*x),
            None => {
                return Err(Error::Data(format!(
                    "population row {i} has no response; the truth is undefined"
                )))
            }
        }
    }
    let all: Vec<f64> = if zeta.needs_global() { y.clone() } else { Vec::new() };
    let mut out = Vec::with_capacity(labels.len());
    for r in rows {
        let area_y: Vec<f64> = r.iter().map(|&i| y[i]).collect();
        let line = zeta.resolve_line(&all, &area_y);
        out.push(zeta.evaluate(&area_y, line));
    }
    Ok(out)
}

/// Stratified sample without replacement: `alloc[j]` units from the
/// `j`-th area's rows, in population row order.
pub fn draw_sample(
    pop: &Dataset,
    rows: &[Vec<usize>],
    alloc: &[usize],
    rng: &mut impl RngCore,
) -> Result<Dataset> {
    if rows.len() != alloc.len() {
        return Err(Error::Config(format!(
            "allocation names {} areas, the population has {}",
            alloc.len(),
            rows.len()
        )));
    }
    let mut take = Vec::new();
    for (area_rows, &n_j) in rows.iter().zip(alloc) {
        if n_j > area_rows.len() {
            return Err(Error::Config(format!(
                "cannot sample {n_j} of {} units",
                area_rows.len()
            )));
        }
        let mut picks = rand::seq::index::sample(rng, area_rows.len(), n_j).into_vec();
        picks.sort_unstable();
        take.extend(picks.into_iter().map(|k| area_rows[k]));
    }
    pop.subset(&take, Role::Sample)
}

/// Direct estimates and design variances per area. Means use the
/// without-replacement variance of the sample mean; poverty rates use
/// the proportion variance with the line resolved from the weighted
/// sample (weights `N_j / n_j`).
fn direct_estimates(
    sample: &Dataset,
    labels: &[String],
    n_pop: &[usize],
    zeta: &AreaFunctional,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (s_labels, s_rows) = rows_by_area(sample);
    if s_labels != labels {
        return Err(Error::Data(
            "the sample does not cover every population area".into(),
        ));
    }
    let y = sample.y_observed();
    let area_y: Vec<Vec<f64>> = s_rows
        .iter()
        .map(|r| r.iter().map(|&i| y[i]).collect())
        .collect();
    let mut h = Vec::with_capacity(labels.len());
    let mut var = Vec::with_capacity(labels.len());
    match zeta {
        AreaFunctional::Mean => {
            for (j, ys) in area_y.iter().enumerate() {
                let n = ys.len() as f64;
                let f = n / n_pop[j] as f64;
                h.push(numeric::mean(ys));
                var.push((1.0 - f) * numeric::sample_variance(ys) / n);
            }
        }
        AreaFunctional::PovertyRate(rule) => {
            let global_line = |fraction: f64| {
                let mut xs = Vec::with_capacity(y.len());
                let mut ws = Vec::with_capacity(y.len());
                for (j, ys) in area_y.iter().enumerate() {
                    let w = n_pop[j] as f64 / ys.len() as f64;
                    for v in ys {
                        xs.push(*v);
                        ws.push(w);
                    }
                }
                fraction * numeric::weighted_median(&xs, &ws)
            };
            for (j, ys) in area_y.iter().enumerate() {
                let line = match rule {
                    LineRule::FixedLine(z) => *z,
                    LineRule::FractionOfMedian {
                        fraction,
                        scope: MedianScope::Global,
                    } => global_line(*fraction),
                    LineRule::FractionOfMedian {
                        fraction,
                        scope: MedianScope::Area,
                    } => fraction * numeric::median(ys),
                };
                let n = ys.len() as f64;
                let f = n / n_pop[j] as f64;
                let p = ys.iter().filter(|v| **v < line).count() as f64 / n;
                h.push(p);
                var.push((1.0 - f) * p * (1.0 - p) / (n - 1.0));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "the direct estimator supports the mean and the poverty rate, not '{}'",
                other.name()
            )))
        }
    }
    Ok((h, var))
}

/// The model, competitor and control state shared by every replicate.
struct RunParts {
    spec: ModelSpec,
    eblup_covariates: Vec<String>,
    eblup_transform: TransformKind,
    zeta: AreaFunctional,
    estimators: Vec<EstimatorKind>,
    fit_ctrl: FitControl,
    bhf_ctrl: BhfControl,
    mse_ctrl: MseControl,
}

enum RepResult {
    Done(Vec<(String, Vec<f64>, Vec<f64>)>),
    Failed { estimator: String, message: String },
}

fn check_alignment(got: &[String], want: &[String], what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!(
            "{what} produced areas {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

fn one_replicate(
    pop: &Dataset,
    sample: &Dataset,
    labels: &[String],
    n_pop: &[usize],
    parts: &RunParts,
    rep: &SeedSequence,
) -> Result<RepResult> {
    let mut done = Vec::with_capacity(parts.estimators.len());
    for est in &parts.estimators {
        let outcome = match est {
            EstimatorKind::Direct => direct_estimates(sample, labels, n_pop, &parts.zeta),
            EstimatorKind::Gamlss => fit_gamlss(sample, &parts.spec, &parts.fit_ctrl)
                .and_then(|fit| {
                    bootstrap_mse(
                        &fit,
                        sample,
                        pop,
                        &parts.spec,
                        &parts.zeta,
                        &parts.mse_ctrl,
                        &parts.fit_ctrl,
                        &rep.child(&[2]),
                    )
                })
                .and_then(|res| {
                    let got: Vec<String> = res.areas.iter().map(|a| a.area.clone()).collect();
                    check_alignment(&got, labels, "the model-based estimator")?;
                    Ok((
                        res.areas.iter().map(|a| a.h_hat).collect(),
                        res.mse_hat(),
                    ))
                }),
            EstimatorKind::Eblup => {
                let covs: Vec<&str> = parts.eblup_covariates.iter().map(|s| s.as_str()).collect();
                fit_bhf(sample, &covs, parts.eblup_transform, &parts.bhf_ctrl)
            }
            .and_then(|fit| {
                bootstrap_mse_eblup(
                    &fit,
                    sample,
                    pop,
                    &parts.zeta,
                    &parts.mse_ctrl,
                    &parts.bhf_ctrl,
                    &rep.child(&[3]),
                )
            })
            .and_then(|res| {
                let got: Vec<String> = res.areas.iter().map(|a| a.area.clone()).collect();
                check_alignment(&got, labels, "the nested-error estimator")?;
                Ok((
                    res.areas.iter().map(|a| a.h_hat).collect(),
                    res.mse_hat(),
                ))
            }),
        };
        match outcome {
            Ok((h, m)) => {
                if h.iter().any(|v| !v.is_finite()) {
                    return Ok(RepResult::Failed {
                        estimator: est.name().to_string(),
                        message: "point estimate is not finite".into(),
                    });
                }
                done.push((est.name().to_string(), h, m));
            }
            Err(e) => {
                return Ok(RepResult::Failed {
                    estimator: est.name().to_string(),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(RepResult::Done(done))
}

struct Accumulator {
    est_names: Vec<String>,
    kept: Vec<usize>,
    truth_cols: Vec<Vec<f64>>,
    est_cols: IndexMap<String, Vec<(Vec<f64>, Vec<f64>)>>,
    failures: IndexMap<String, usize>,
    warnings: Vec<String>,
}

impl Accumulator {
    fn new(estimators: &[EstimatorKind]) -> Accumulator {
        let est_names: Vec<String> = estimators.iter().map(|e| e.name().to_string()).collect();
        Accumulator {
            est_cols: est_names
                .iter()
                .map(|n| (n.clone(), Vec::new()))
                .collect(),
            failures: est_names.iter().map(|n| (n.clone(), 0)).collect(),
            est_names,
            kept: Vec::new(),
            truth_cols: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn warn(&mut self, message: String) {
        if self.warnings.len() < MAX_WARNINGS {
            self.warnings.push(message);
        }
    }

    fn record(&mut self, t: usize, truth: Vec<f64>, result: RepResult) {
        match result {
            RepResult::Done(per_est) => {
                self.kept.push(t);
                self.truth_cols.push(truth);
                for (name, h, m) in per_est {
                    self.est_cols[&name].push((h, m));
                }
            }
            RepResult::Failed { estimator, message } => {
                self.failures[&estimator] += 1;
                self.warn(format!("replicate {t}: {estimator} failed: {message}"));
            }
        }
    }
}

fn assemble_report(
    mut echo: ConfigEcho,
    labels: &[String],
    alloc: &[usize],
    acc: Accumulator,
) -> Result<SimulationReport> {
    let t_eff = acc.kept.len();
    if t_eff == 0 {
        return Err(Error::Degenerate(
            "every simulation replicate failed; see the estimator failure counts".into(),
        ));
    }
    echo.t_effective = t_eff;
    let n_areas = labels.len();

    let truth: Vec<Vec<f64>> = (0..n_areas)
        .map(|j| acc.truth_cols.iter().map(|col| col[j]).collect())
        .collect();

    let mut metrics_out = IndexMap::new();
    let mut traces_by_est: IndexMap<String, EstimatorTraces> = IndexMap::new();
    for name in &acc.est_names {
        let cols = &acc.est_cols[name];
        let estimate: Vec<Vec<f64>> = (0..n_areas)
            .map(|j| cols.iter().map(|(h, _)| h[j]).collect())
            .collect();
        let mse: Vec<Vec<f64>> = (0..n_areas)
            .map(|j| cols.iter().map(|(_, m)| m[j]).collect())
            .collect();
        traces_by_est.insert(
            name.clone(),
            EstimatorTraces {
                truth: truth.clone(),
                estimate,
                mse,
            },
        );
    }
    for name in &acc.est_names {
        let comparator = if name != "direct" {
            traces_by_est.get("direct")
        } else {
            None
        };
        metrics_out.insert(
            name.clone(),
            compute_metrics(&traces_by_est[name], comparator)?,
        );
    }

    let mut area_summaries = Vec::with_capacity(acc.est_names.len() * n_areas);
    let mut trace_rows = Vec::with_capacity(acc.est_names.len() * n_areas * t_eff);
    for name in &acc.est_names {
        let tr = &traces_by_est[name];
        for j in 0..n_areas {
            let mut dropped = 0usize;
            let h_bar = numeric::mean(&tr.estimate[j]);
            let truth_bar = numeric::mean(&tr.truth[j]);
            let cv_pct = 100.0
                * metrics::finite_mean(
                    (0..t_eff).map(|t| tr.mse[j][t].sqrt() / tr.estimate[j][t]),
                    &mut dropped,
                );
            let true_mse = numeric::mean(
                &(0..t_eff)
                    .map(|t| {
                        let e = tr.estimate[j][t] - tr.truth[j][t];
                        e * e
                    })
                    .collect::<Vec<f64>>(),
            );
            let boot_mse = metrics::finite_mean(tr.mse[j].iter().copied(), &mut dropped);
            area_summaries.push(AreaSummary {
                estimator: name.clone(),
                area: labels[j].clone(),
                n_j: alloc[j],
                rb_pct: 100.0 * (h_bar / truth_bar - 1.0),
                cv_pct,
                true_mse,
                boot_mse,
            });
            for (idx, &t) in acc.kept.iter().enumerate() {
                trace_rows.push(TraceRow {
                    estimator: name.clone(),
                    area: labels[j].clone(),
                    replicate: t,
                    h_true: tr.truth[j][idx],
                    h_hat: tr.estimate[j][idx],
                    mse_hat: tr.mse[j][idx],
                });
            }
        }
    }

    let mut warnings = acc.warnings;
    if t_eff < echo.t_requested {
        warnings.push(format!(
            "{} of {} replicates were excluded because an estimator failed",
            echo.t_requested - t_eff,
            echo.t_requested
        ));
    }

    Ok(SimulationReport {
        config: echo,
        metrics: metrics_out,
        area_summaries,
        failures: acc.failures,
        warnings,
        traces: trace_rows,
    })
}

/// Run one synthetic-population scenario end to end.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let root = SeedSequence::new(cfg.seed);
    let frame = make_frame(cfg, &root);
    let alloc = allocation(cfg.j, cfg.n_min, cfg.n_max);
    let parts = RunParts {
        spec: cfg.scenario.model_spec(),
        eblup_covariates: cfg
            .scenario
            .eblup_covariates()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        eblup_transform: cfg.scenario.eblup_transform(),
        zeta: cfg.scenario.functional(),
        estimators: cfg.estimators.clone(),
        fit_ctrl: FitControl::default(),
        bhf_ctrl: BhfControl::default(),
        mse_ctrl: MseControl {
            b: cfg.b,
            l: cfg.l,
            analytic_mean: true,
            ..MseControl::default()
        },
    };

    let mut acc = Accumulator::new(&cfg.estimators);
    for t in 0..cfg.t {
        let rep = root.child(&[1, t as u64]);
        let mut resp_rng = rep.stream(&[0]);
        let y = generate_responses(cfg.scenario, &frame, &mut resp_rng)?;
        let pop = population_dataset(&frame, y)?;
        let (labels, rows) = rows_by_area(&pop);
        let truth = truth_values(&pop, &labels, &rows, &parts.zeta)?;
        let n_pop: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        let mut samp_rng = rep.stream(&[1]);
        let sample = draw_sample(&pop, &rows, &alloc, &mut samp_rng)?;
        let result = one_replicate(&pop, &sample, &labels, &n_pop, &parts, &rep)?;
        acc.record(t, truth, result);
    }

    let echo = ConfigEcho {
        scenario: cfg.scenario.to_string(),
        functional: parts.zeta.name(),
        n_total: cfg.n_total,
        j: cfg.j,
        t_requested: cfg.t,
        t_effective: 0,
        b: cfg.b,
        l: cfg.l,
        seed: cfg.seed,
        estimators: acc.est_names.clone(),
        allocation: alloc.clone(),
    };
    assemble_report(echo, &frame.labels, &alloc, acc)
}

/// Configuration of a fixed-population protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbConfig {
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    /// Area sample sizes are `N_j` divided by this, floored at one.
    #[serde(default = "default_divisor")]
    pub sampling_divisor: usize,
}

impl DbConfig {
    pub fn new(seed: u64) -> DbConfig {
        DbConfig {
            t: default_t(),
            b: default_b(),
            l: default_l(),
            seed,
            estimators: default_estimators(),
            sampling_divisor: default_divisor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("a run needs at least one replicate".into()));
        }
        if self.b < 2 {
            return Err(Error::Config(
                "the bootstrap needs at least two replicates".into(),
            ));
        }
        if self.l == 0 {
            return Err(Error::Config(
                "Monte Carlo prediction needs at least one draw".into(),
            ));
        }
        if self.sampling_divisor == 0 {
            return Err(Error::Config("the sampling divisor must be positive".into()));
        }
        validate_estimators(&self.estimators)
    }
}

/// Competitor settings for the fixed-population protocol.
#[derive(Debug, Clone)]
pub struct EblupSpec {
    pub covariates: Vec<String>,
    pub transform: TransformKind,
}

/// Ensure the pseudo-population carries unit ids, assigning row-number
/// ids when it does not.
fn with_unit_ids(pop: &Dataset) -> Result<Dataset> {
    if pop.unit_ids().is_some() {
        return Ok(pop.clone());
    }
    let n = pop.n_units();
    let width = n.to_string().len();
    let ids: Vec<String> = (1..=n)
        .map(|i| format!("u{i:0width$}", width = width))
        .collect();
    let covariates: IndexMap<String, Column> = pop
        .covariate_names()
        .map(|name| {
            (
                name.to_string(),
                pop.covariate(name).expect("named column").clone(),
            )
        })
        .collect();
    Dataset::from_columns(
        Role::Population,
        pop.area_labels().to_vec(),
        Some(ids),
        pop.y().to_vec(),
        covariates,
    )
}

/// Fixed-population protocol: the caller's pseudo-population stays
/// fixed, the truth is computed from it once, and only the stratified
/// sampling varies between replicates. Area sample sizes are
/// `N_j / sampling_divisor`, floored at one unit.
pub fn run_db_protocol(
    pseudo_pop: &Dataset,
    spec: &ModelSpec,
    eblup: &EblupSpec,
    zeta: &AreaFunctional,
    cfg: &DbConfig,
) -> Result<SimulationReport> {
    cfg.validate()?;
    zeta.validate()?;
    let pop = with_unit_ids(pseudo_pop)?;
    let (labels, rows) = rows_by_area(&pop);
    let truth = truth_values(&pop, &labels, &rows, zeta)?;
    let n_pop: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let alloc: Vec<usize> = n_pop
        .iter()
        .map(|&n_j| (n_j / cfg.sampling_divisor).max(1))
        .collect();

    let parts = RunParts {
        spec: spec.clone(),
        eblup_covariates: eblup.covariates.clone(),
        eblup_transform: eblup.transform,
        zeta: zeta.clone(),
        estimators: cfg.estimators.clone(),
        fit_ctrl: FitControl::default(),
        bhf_ctrl: BhfControl::default(),
        mse_ctrl: MseControl {
            b: cfg.b,
            l: cfg.l,
            analytic_mean: true,
            ..MseControl::default()
        },
    };

    let mut acc = Accumulator::new(&cfg.estimators);
    let floored = alloc
        .iter()
        .zip(&n_pop)
        .filter(|&(&a, &n)| a == 1 && n < cfg.sampling_divisor)
        .count();
    if floored > 0 {
        acc.warn(format!(
            "{floored} areas have fewer than {} population units; their sample size was floored at one",
            cfg.sampling_divisor
        ));
    }
    if alloc.iter().any(|&a| a < 2) {
        acc.warn("some areas sample fewer than two units; direct variances are undefined there".into());
    }

    let root = SeedSequence::new(cfg.seed);
    for t in 0..cfg.t {
        let rep = root.child(&[1, t as u64]);
        let mut samp_rng = rep.stream(&[1]);
        let sample = draw_sample(&pop, &rows, &alloc, &mut samp_rng)?;
        let result = one_replicate(&pop, &sample, &labels, &n_pop, &parts, &rep)?;
        acc.record(t, truth.clone(), result);
    }

    let echo = ConfigEcho {
        scenario: "db".to_string(),
        functional: zeta.name(),
        n_total: pop.n_units(),
        j: labels.len(),
        t_requested: cfg.t,
        t_effective: 0,
        b: cfg.b,
        l: cfg.l,
        seed: cfg.seed,
        estimators: acc.est_names.clone(),
        allocation: alloc.clone(),
    };
    assemble_report(echo, &labels, &alloc, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(scenario: ScenarioId) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(scenario, 41);
        cfg.n_total = 600;
        cfg.j = 6;
        cfg.t = 2;
        cfg.b = 2;
        cfg.l = 8;
        cfg
    }

    #[test]
    fn allocation_spans_the_requested_range() {
        let a = allocation(50, 4, 61);
        assert_eq!(a.len(), 50);
        assert_eq!(a[0], 4);
        assert_eq!(a[49], 61);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(a.iter().sum::<usize>(), 1625);
        assert_eq!(allocation(2, 4, 61), vec![4, 61]);
        assert_eq!(allocation(3, 10, 10), vec![10, 10, 10]);
    }

    #[test]
    fn scenario_ids_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(id.to_string().parse::<ScenarioId>().unwrap(), id);
        }
        assert_eq!("a2".parse::<ScenarioId>().unwrap(), ScenarioId::A2);
        assert!("E1".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn scenario_specs_describe_the_generating_processes() {
        assert_eq!(ScenarioId::A1.model_spec().family, Family::Normal);
        assert_eq!(ScenarioId::C2.model_spec().family, Family::LogNormal);
        let d3 = ScenarioId::D3.model_spec();
        assert_eq!(d3.family, Family::Dagum);
        assert!(d3.params[0].random_intercept);
        assert!(d3.params[1].random_intercept);
        assert!(!d3.params[2].random_intercept);
        assert_eq!(ScenarioId::D1.functional().name(), "poverty-rate");
        assert_eq!(ScenarioId::B3.functional().name(), "mean");
        assert_eq!(ScenarioId::B1.eblup_covariates(), vec!["x1", "x2"]);
        assert_eq!(ScenarioId::C1.eblup_transform(), TransformKind::BoxCox);
    }

    #[test]
    fn frame_is_deterministic_and_standard_normal() {
        let cfg = tiny_config(ScenarioId::A1);
        let root = SeedSequence::new(cfg.seed);
        let f1 = make_frame(&cfg, &root);
        let f2 = make_frame(&cfg, &root);
        assert_eq!(f1.x1, f2.x1);
        assert_eq!(f1.x2, f2.x2);
        assert_ne!(f1.x1, f1.x2);
        assert_eq!(f1.area.len(), 600);
        assert_eq!(f1.labels.len(), 6);
        assert!(numeric::mean(&f1.x1).abs() < 0.2);
        let mut sorted = f1.labels.clone();
        sorted.sort();
        assert_eq!(sorted, f1.labels);
        let mut units = f1.unit.clone();
        units.sort();
        units.dedup();
        assert_eq!(units.len(), 600);
    }

    #[test]
    fn normal_scenario_has_the_stated_grand_mean() {
        let mut cfg = tiny_config(ScenarioId::A1);
        cfg.n_total = 5000;
        cfg.j = 10;
        let root = SeedSequence::new(7);
        let frame = make_frame(&cfg, &root);
        let mut rng = root.child(&[1, 0]).stream(&[0]);
        let y = generate_responses(ScenarioId::A1, &frame, &mut rng).unwrap();
        assert!((numeric::mean(&y) - 100.0).abs() < 6.0);
        let mut rng2 = root.child(&[1, 0]).stream(&[0]);
        let y2 = generate_responses(ScenarioId::A1, &frame, &mut rng2).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn skewed_scenarios_stay_positive() {
        let cfg = tiny_config(ScenarioId::D3);
        let root = SeedSequence::new(9);
        let frame = make_frame(&cfg, &root);
        for id in [ScenarioId::C1, ScenarioId::D1, ScenarioId::D2, ScenarioId::D3] {
            let mut rng = root.child(&[1, 0]).stream(&[0]);
            let y = generate_responses(id, &frame, &mut rng).unwrap();
            assert!(y.iter().all(|v| v.is_finite() && *v > 0.0), "{id}");
        }
    }

    #[test]
    fn sample_respects_the_allocation() {
        let cfg = tiny_config(ScenarioId::A1);
        let root = SeedSequence::new(17);
        let frame = make_frame(&cfg, &root);
        let mut rng = root.child(&[1, 0]).stream(&[0]);
        let y = generate_responses(ScenarioId::A1, &frame, &mut rng).unwrap();
        let pop = population_dataset(&frame, y).unwrap();
        let (labels, rows) = rows_by_area(&pop);
        let alloc = allocation(cfg.j, cfg.n_min, cfg.n_max);
        let mut s_rng = root.child(&[1, 0]).stream(&[1]);
        let sample = draw_sample(&pop, &rows, &alloc, &mut s_rng).unwrap();
        assert_eq!(sample.role(), Role::Sample);
        assert_eq!(sample.n_units(), alloc.iter().sum::<usize>());
        let (s_labels, s_rows) = rows_by_area(&sample);
        assert_eq!(s_labels, labels);
        for (r, &n_j) in s_rows.iter().zip(&alloc) {
            assert_eq!(r.len(), n_j);
        }
        let ids = sample.unit_ids().unwrap();
        let mut uniq = ids.to_vec();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), sample.n_units());
        let mut s_rng2 = root.child(&[1, 0]).stream(&[1]);
        let again = draw_sample(&pop, &rows, &alloc, &mut s_rng2).unwrap();
        assert_eq!(again.unit_ids().unwrap(), ids);
        assert!(draw_sample(&pop, &rows, &vec![1000; 6], &mut s_rng2).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let mut cfg = tiny_config(ScenarioId::A1);
        cfg.n_total = 601;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ScenarioId::A1);
        cfg.n_max = 101;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ScenarioId::A1);
        cfg.b = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ScenarioId::A1);
        cfg.estimators = vec![EstimatorKind::Direct, EstimatorKind::Direct];
        assert!(cfg.validate().is_err());
        assert!(tiny_config(ScenarioId::A1).validate().is_ok());
    }

    #[test]
    fn scenario_run_produces_a_complete_report() {
        let cfg = tiny_config(ScenarioId::A1);
        let report = run_scenario(&cfg).unwrap();
        assert_eq!(report.config.t_effective, 2);
        assert_eq!(report.config.allocation.iter().sum::<usize>(), 195);
        assert_eq!(
            report.metrics.keys().collect::<Vec<_>>(),
            vec!["direct", "gamlss", "eblup"]
        );
        for (name, m) in &report.metrics {
            assert!(m.arb.is_finite(), "{name}");
            assert!((0.0..=100.0).contains(&m.pcr), "{name}");
            assert!(m.atmse >= 0.0 && m.abmse >= 0.0, "{name}");
            if name == "direct" {
                assert!(m.acvr.is_none() && m.aeff.is_none());
            } else {
                assert!(m.acvr.is_some() && m.aeff.is_some());
            }
        }
        assert_eq!(report.failures.values().sum::<usize>(), 0);
        assert_eq!(report.traces.len(), 3 * 6 * 2);
        assert_eq!(report.area_summaries.len(), 3 * 6);
        let parsed: serde_json::Value = serde_json::from_str(&report.summary_json()).unwrap();
        assert!(parsed["metrics"]["gamlss"]["ACV"].is_number());
        assert!(parsed["metrics"]["direct"].get("ACVR").is_none());
        assert_eq!(report.traces_csv().lines().count(), 1 + 3 * 6 * 2);
        assert_eq!(report.areas_csv().lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn scenario_run_is_reproducible() {
        let mut cfg = tiny_config(ScenarioId::B1);
        cfg.t = 1;
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.summary_json(), b.summary_json());
        assert_eq!(a.traces_csv(), b.traces_csv());
    }

    #[test]
    fn db_protocol_keeps_the_truth_fixed() {
        let scfg = tiny_config(ScenarioId::A1);
        let root = SeedSequence::new(scfg.seed);
        let frame = make_frame(&scfg, &root);
        let mut rng = root.child(&[9]).stream(&[0]);
        let y = generate_responses(ScenarioId::A1, &frame, &mut rng).unwrap();
        let mut covariates = IndexMap::new();
        covariates.insert("x1".to_string(), Column::Numeric(frame.x1.clone()));
        covariates.insert("x2".to_string(), Column::Numeric(frame.x2.clone()));
        let pseudo = Dataset::from_columns(
            Role::Population,
            frame.area.clone(),
            None,
            y.into_iter().map(Some).collect(),
            covariates,
        )
        .unwrap();

        let mut cfg = DbConfig::new(23);
        cfg.t = 2;
        cfg.b = 2;
        cfg.l = 8;
        let eblup = EblupSpec {
            covariates: vec!["x1".to_string()],
            transform: TransformKind::None,
        };
        let report = run_db_protocol(
            &pseudo,
            &ScenarioId::A1.model_spec(),
            &eblup,
            &AreaFunctional::Mean,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.config.scenario, "db");
        assert_eq!(report.config.t_effective, 2);
        assert_eq!(report.config.allocation, vec![5; 6]);
        for rows in report.traces.chunks(2) {
            assert_eq!(rows[0].h_true, rows[1].h_true);
            assert_eq!(rows[0].area, rows[1].area);
        }
        let again = run_db_protocol(
            &pseudo,
            &ScenarioId::A1.model_spec(),
            &eblup,
            &AreaFunctional::Mean,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.summary_json(), again.summary_json());
    }
}
