//! Monte Carlo prediction of area functionals.
//!
//! An area parameter `H_j = zeta(y_j)` is a reduction of the complete
//! area response vector: the observed sample part plus the non-sampled
//! part. [`predict_area_mc`] approximates its best predictor by
//! simulation: per replicate it draws every non-sampled unit from its
//! fitted distribution, attaches the observed sample values unchanged,
//! evaluates the functional on the completed vector, and averages over
//! replicates. Observed values are never replaced by draws, so a census
//! area reproduces `zeta` of its sample exactly.
//!
//! For the mean functional two shortcuts exist: [`predict_area_mean_closed`]
//! for the Normal identity-link model (the classical composite form) and
//! [`predict_area_mean_analytic`] for any family with a finite mean (the
//! infinite-replicate limit of the MC predictor).

use std::collections::HashSet;
use std::sync::Arc;

use crate::dist::{self, Family, Link};
use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::model::{Dataset, Role};
use crate::numeric;
use crate::rng::SeedSequence;

/// Default Monte Carlo replicate count.
pub const DEFAULT_L: usize = 100;

/// Scope of the median underlying a relative poverty line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MedianScope {
    /// Median of the completed population across all areas.
    Global,
    /// Median of the area's own completed vector.
    Area,
}

/// How the poverty line is determined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LineRule {
    /// A fixed threshold.
    FixedLine(f64),
    /// A fraction of the (re-computed per replicate) median.
    FractionOfMedian { fraction: f64, scope: MedianScope },
}

/// The target reduction `zeta` over an area's complete response vector.
#[derive(Clone)]
pub enum AreaFunctional {
    Mean,
    /// Share of units strictly below the line.
    PovertyRate(LineRule),
    /// The `u`-quantile of the area vector.
    Quantile(f64),
    /// A named user-supplied reduction.
    Custom {
        name: String,
        f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    },
}

impl std::fmt::Debug for AreaFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AreaFunctional::Mean => write!(f, "Mean"),
            AreaFunctional::PovertyRate(rule) => write!(f, "PovertyRate({rule:?})"),
            AreaFunctional::Quantile(u) => write!(f, "Quantile({u})"),
            AreaFunctional::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl AreaFunctional {
    /// The conventional 60%-of-global-median poverty rate.
    pub fn poverty_rate_60() -> AreaFunctional {
        AreaFunctional::PovertyRate(LineRule::FractionOfMedian {
            fraction: 0.6,
            scope: MedianScope::Global,
        })
    }

    pub fn name(&self) -> String {
        match self {
            AreaFunctional::Mean => "mean".into(),
            AreaFunctional::PovertyRate(_) => "poverty-rate".into(),
            AreaFunctional::Quantile(u) => format!("quantile({u})"),
            AreaFunctional::Custom { name, .. } => name.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AreaFunctional::PovertyRate(LineRule::FractionOfMedian { fraction, .. })
                if !(*fraction > 0.0 && *fraction < 1.0) =>
            {
                Err(Error::Config(format!(
                    "poverty line fraction {fraction} outside (0,1)"
                )))
            }
            AreaFunctional::Quantile(u) if !(*u > 0.0 && *u < 1.0) => Err(Error::Config(
                format!("quantile level {u} outside (0,1)"),
            )),
            _ => Ok(()),
        }
    }

    /// Whether evaluation needs a population-wide quantity (the global
    /// median) before per-area reduction.
    pub(crate) fn needs_global(&self) -> bool {
        matches!(
            self,
            AreaFunctional::PovertyRate(LineRule::FractionOfMedian {
                scope: MedianScope::Global,
                ..
            })
        )
    }

    /// Evaluate on one area's complete vector; `line` is the resolved
    /// poverty threshold when applicable.
    pub(crate) fn evaluate(&self, values: &[f64], line: Option<f64>) -> f64 {
        match self {
            AreaFunctional::Mean => numeric::mean(values),
            AreaFunctional::PovertyRate(_) => {
                let z = line.expect("poverty line resolved");
                values.iter().filter(|v| **v < z).count() as f64 / values.len() as f64
            }
            AreaFunctional::Quantile(u) => numeric::empirical_quantile(values, *u),
            AreaFunctional::Custom { f, .. } => f(values),
        }
    }

    /// Resolve the poverty line for one completed population, if this
    /// functional needs one. `all` is the full population vector.
    pub(crate) fn resolve_line(&self, all: &[f64], area: &[f64]) -> Option<f64> {
        match self {
            AreaFunctional::PovertyRate(LineRule::FixedLine(z)) => Some(*z),
            AreaFunctional::PovertyRate(LineRule::FractionOfMedian { fraction, scope }) => {
                let med = match scope {
                    MedianScope::Global => numeric::median(all),
                    MedianScope::Area => numeric::median(area),
                };
                Some(fraction * med)
            }
            _ => None,
        }
    }
}

/// One area's prediction.
#[derive(Debug, Clone)]
pub struct AreaPrediction {
    pub area: String,
    pub h_hat: f64,
    /// Per-replicate functional values, when Monte Carlo was used.
    pub mc_draws: Option<Vec<f64>>,
    /// Sampled units in the area.
    pub n_j: usize,
    /// Population size of the area (sampled plus non-sampled).
    pub n_pop_j: usize,
}

/// Predictions for every area, in sorted area-label order.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub areas: Vec<AreaPrediction>,
    pub functional: String,
    pub l: usize,
    /// Areas that appear in the population without any sampled units;
    /// their prediction is purely synthetic with zero random effect.
    pub unsampled_areas: Vec<String>,
}

impl PredictionResult {
    pub fn h_hat(&self) -> Vec<f64> {
        self.areas.iter().map(|a| a.h_hat).collect()
    }
}

/// How the sample and population rows fit together per area.
pub(crate) struct AreaLink {
    /// Sorted union of area labels.
    pub labels: Vec<String>,
    /// Per area, row indices into the sample.
    pub sample_rows: Vec<Vec<usize>>,
    /// Per area, row indices of non-sampled units in the population.
    pub pop_rows: Vec<Vec<usize>>,
    /// Labels with population rows but no sampled units.
    pub unsampled: Vec<String>,
}

/// Match sample and population datasets. When both carry unit ids, the
/// population is taken as the complete area population and rows whose
/// (area, id) pair appears in the sample are treated as the sampled
/// units. Without ids the population rows are taken as the non-sampled
/// complement.
pub(crate) fn link_areas(sample: &Dataset, pop: &Dataset) -> Result<AreaLink> {
    if sample.role() != Role::Sample {
        return Err(Error::Data("first dataset must have the sample role".into()));
    }
    if pop.role() != Role::Population {
        return Err(Error::Data(
            "second dataset must have the population role".into(),
        ));
    }
    let mut labels: Vec<String> = sample
        .area_labels()
        .iter()
        .chain(pop.area_labels().iter())
        .cloned()
        .collect();
    labels.sort();
    labels.dedup();
    let pos = |a: &str| labels.binary_search_by(|l| l.as_str().cmp(a)).unwrap();

    let mut sample_rows = vec![Vec::new(); labels.len()];
    for (i, a) in sample.area_labels().iter().enumerate() {
        sample_rows[pos(a)].push(i);
    }
    let mut pop_rows = vec![Vec::new(); labels.len()];
    match (sample.unit_ids(), pop.unit_ids()) {
        (Some(sids), Some(pids)) => {
            let sampled: HashSet<(&str, &str)> = sample
                .area_labels()
                .iter()
                .zip(sids)
                .map(|(a, u)| (a.as_str(), u.as_str()))
                .collect();
            for (i, (a, u)) in pop.area_labels().iter().zip(pids).enumerate() {
                if !sampled.contains(&(a.as_str(), u.as_str())) {
                    pop_rows[pos(a)].push(i);
                }
            }
        }
        _ => {
            for (i, a) in pop.area_labels().iter().enumerate() {
                pop_rows[pos(a)].push(i);
            }
        }
    }
    let unsampled: Vec<String> = labels
        .iter()
        .enumerate()
        .filter(|(j, _)| sample_rows[*j].is_empty())
        .map(|(_, l)| l.clone())
        .collect();
    Ok(AreaLink {
        labels,
        sample_rows,
        pop_rows,
        unsampled,
    })
}

/// Fitted parameter vectors for every population row.
pub fn predict_units(
    model: &FittedModel,
    pop: &Dataset,
) -> Result<Vec<crate::dist::ParamVector>> {
    model.params_for(pop)
}

/// Monte Carlo predictor of an arbitrary area functional. Per replicate,
/// non-sampled units are drawn from their fitted distributions, the
/// observed sample is attached unchanged, and `zeta` is evaluated on the
/// completed vectors; predictions average the `l` replicates. Streams
/// are keyed by `(area, replicate)`, so the result is identical for any
/// parallel schedule.
pub fn predict_area_mc(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
    zeta: &AreaFunctional,
    l: usize,
    seq: &SeedSequence,
) -> Result<PredictionResult> {
    zeta.validate()?;
    if l == 0 {
        return Err(Error::Config("Monte Carlo needs at least one replicate".into()));
    }
    let link = link_areas(sample, pop)?;
    let thetas = model.params_for(pop)?;
    let family = model.spec.family;
    let y_sample = sample.y();
    let n_areas = link.labels.len();

    // Observed sample values per area, fixed across replicates.
    let obs: Vec<Vec<f64>> = link
        .sample_rows
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|&i| y_sample[i].expect("sample response present"))
                .collect()
        })
        .collect();

    let mut per_rep: Vec<Vec<f64>> = vec![Vec::with_capacity(l); n_areas];
    let mut completed: Vec<Vec<f64>> = vec![Vec::new(); n_areas];
    for ell in 0..l {
        for j in 0..n_areas {
            let v = &mut completed[j];
            v.clear();
            v.extend_from_slice(&obs[j]);
            if !link.pop_rows[j].is_empty() {
                let mut rng = seq.stream(&[j as u64, ell as u64]);
                for &i in &link.pop_rows[j] {
                    v.push(dist::sample_one(family, &thetas[i], &mut rng)?);
                }
            }
        }
        let all: Vec<f64> = if zeta.needs_global() {
            completed.iter().flatten().copied().collect()
        } else {
            Vec::new()
        };
        for j in 0..n_areas {
            if completed[j].is_empty() {
                return Err(Error::Data(format!(
                    "area '{}' has neither sample nor population units",
                    link.labels[j]
                )));
            }
            let line = zeta.resolve_line(&all, &completed[j]);
            per_rep[j].push(zeta.evaluate(&completed[j], line));
        }
    }

    let areas = (0..n_areas)
        .map(|j| {
            let draws = &per_rep[j];
            AreaPrediction {
                area: link.labels[j].clone(),
                h_hat: numeric::mean(draws),
                mc_draws: Some(draws.clone()),
                n_j: link.sample_rows[j].len(),
                n_pop_j: link.sample_rows[j].len() + link.pop_rows[j].len(),
            }
        })
        .collect();
    Ok(PredictionResult {
        areas,
        functional: zeta.name(),
        l,
        unsampled_areas: link.unsampled,
    })
}

/// Closed-form mean predictor for the Normal identity-link model: the
/// non-sampled part is predicted by its fitted mean and combined with the
/// observed sample sum.
pub fn predict_area_mean_closed(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
) -> Result<PredictionResult> {
    if model.spec.family != Family::Normal || model.spec.params[0].link != Link::Identity {
        return Err(Error::Spec(
            "the closed-form mean predictor needs the Normal family with an identity mean link"
                .into(),
        ));
    }
    mean_prediction(model, sample, pop, |theta| Ok(theta.mu()), "mean")
}

/// Mean predictor for any family with a finite mean: the infinite-
/// replicate limit of [`predict_area_mc`] with the mean functional.
pub fn predict_area_mean_analytic(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
) -> Result<PredictionResult> {
    let family = model.spec.family;
    mean_prediction(
        model,
        sample,
        pop,
        |theta| dist::mean_of(family, theta),
        "mean",
    )
}

fn mean_prediction(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
    unit_mean: impl Fn(&crate::dist::ParamVector) -> Result<f64>,
    name: &str,
) -> Result<PredictionResult> {
    let link = link_areas(sample, pop)?;
    let thetas = model.params_for(pop)?;
    let y_sample = sample.y();
    let areas = (0..link.labels.len())
        .map(|j| {
            let n_j = link.sample_rows[j].len();
            let n_pop_j = n_j + link.pop_rows[j].len();
            let mut total = 0.0;
            for &i in &link.sample_rows[j] {
                total += y_sample[i].expect("sample response present");
            }
            for &i in &link.pop_rows[j] {
                total += unit_mean(&thetas[i])?;
            }
            if n_pop_j == 0 {
                return Err(Error::Data(format!(
                    "area '{}' has neither sample nor population units",
                    link.labels[j]
                )));
            }
            Ok(AreaPrediction {
                area: link.labels[j].clone(),
                h_hat: total / n_pop_j as f64,
                mc_draws: None,
                n_j,
                n_pop_j,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionResult {
        areas,
        functional: name.into(),
        l: 0,
        unsampled_areas: link.unsampled,
    })
}
