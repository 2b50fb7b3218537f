//! The nested-error linear baseline.
//!
//! Fits `T(y) = X beta + u_j + e` by maximum likelihood, where `T` is an
//! optional log or Box-Cox response transformation, `u_j` is an area
//! effect with variance `sigma2_u` and `e` a unit error with variance
//! `sigma2_e`. The likelihood is profiled down to the single ratio
//! `psi = sigma2_u / sigma2_e`: for fixed `psi` the GLS coefficients and
//! the error variance have closed forms through per-area sufficient
//! statistics, and the profile is maximised by golden-section search on
//! `ln psi`.
//!
//! Prediction combines the observed sample with model predictions of the
//! non-sampled units. Under a transformation, unit predictions are
//! back-transformed either naively or with Duan smearing over the sample
//! residuals (the default), which repairs the mean bias of the naive
//! back-transform.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::dist::{Family, Param};
use crate::error::{Error, Result};
use crate::model::{build_design, Dataset, ModelSpec};
use crate::numeric;
use crate::predict::{link_areas, AreaFunctional, AreaPrediction, PredictionResult};
use crate::rng::SeedSequence;

/// Search range for `ln psi`; the lower edge is an effective zero for
/// the area variance.
const LN_PSI_RANGE: (f64, f64) = (-18.4, 9.2);
/// Floor keeping Box-Cox back-transforms inside the support.
const BOXCOX_FLOOR: f64 = 1e-10;
/// Knots used to interpolate the smearing back-transform when it has no
/// closed form.
const SMEARING_KNOTS: usize = 256;

/// Requested response transformation. `BoxCox` selects its exponent on
/// the grid `[-2, 2]` in steps of 0.05 by the Jacobian-adjusted profile
/// likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    None,
    Log,
    BoxCox,
}

/// The fitted transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    None,
    Log,
    BoxCox(f64),
}

impl Transform {
    /// Forward transform.
    pub fn apply(&self, y: f64) -> f64 {
        match self {
            Transform::None => y,
            Transform::Log => y.ln(),
            Transform::BoxCox(l) if l.abs() < 1e-12 => y.ln(),
            Transform::BoxCox(l) => (y.powf(*l) - 1.0) / l,
        }
    }

    /// Inverse transform, clamped to the support where needed.
    pub fn invert(&self, z: f64) -> f64 {
        match self {
            Transform::None => z,
            Transform::Log => z.clamp(-700.0, 700.0).exp(),
            Transform::BoxCox(l) if l.abs() < 1e-12 => z.clamp(-700.0, 700.0).exp(),
            Transform::BoxCox(l) => (1.0 + l * z).max(BOXCOX_FLOOR).powf(1.0 / l),
        }
    }

    fn requires_positive(&self) -> bool {
        !matches!(self, Transform::None)
    }
}

/// Controls for [`fit_bhf`].
#[derive(Debug, Clone)]
pub struct BhfControl {
    /// Duan smearing for back-transformed predictions.
    pub smearing: bool,
}

impl Default for BhfControl {
    fn default() -> Self {
        BhfControl { smearing: true }
    }
}

/// A fitted nested-error model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BhfFit {
    pub transform: Transform,
    pub col_names: Vec<String>,
    /// Sorted training area labels.
    pub area_labels: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    /// Shrinkage weight per area: `n_j psi / (1 + n_j psi)`.
    pub shrinkage: Vec<f64>,
    /// Predicted area effects on the transformed scale.
    pub u_hat: Vec<f64>,
    /// Conditional sample residuals on the transformed scale, kept for
    /// smearing.
    pub residuals: Vec<f64>,
    pub smearing: bool,
    /// Maximised log likelihood on the transformed scale.
    pub loglik: f64,
}

impl BhfFit {
    pub fn sd_u(&self) -> f64 {
        self.sigma2_u.sqrt()
    }

    pub fn sd_e(&self) -> f64 {
        self.sigma2_e.sqrt()
    }
}

/// Per-area sufficient statistics of the design.
struct DesignStats {
    /// `X_j' X_j` per area.
    g: Vec<DMatrix<f64>>,
    /// Column sums of `X_j` per area.
    s: Vec<DVector<f64>>,
    sizes: Vec<usize>,
    p: usize,
}

struct ResponseStats {
    /// `X_j' z_j` per area.
    h: Vec<DVector<f64>>,
    /// Sum of `z` per area.
    t: Vec<f64>,
    /// Sum of `z^2` per area.
    q: Vec<f64>,
}

fn design_stats(x: &DMatrix<f64>, area_index: &[usize], n_areas: usize) -> DesignStats {
    let p = x.ncols();
    let mut g = vec![DMatrix::<f64>::zeros(p, p); n_areas];
    let mut s = vec![DVector::<f64>::zeros(p); n_areas];
    let mut sizes = vec![0usize; n_areas];
    for i in 0..x.nrows() {
        let j = area_index[i];
        sizes[j] += 1;
        for a in 0..p {
            let xa = x[(i, a)];
            s[j][a] += xa;
            for b in a..p {
                g[j][(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for gj in &mut g {
        for a in 0..p {
            for b in 0..a {
                gj[(a, b)] = gj[(b, a)];
            }
        }
    }
    DesignStats { g, s, sizes, p }
}

fn response_stats(
    x: &DMatrix<f64>,
    area_index: &[usize],
    z: &[f64],
    n_areas: usize,
) -> ResponseStats {
    let p = x.ncols();
    let mut h = vec![DVector::<f64>::zeros(p); n_areas];
    let mut t = vec![0.0f64; n_areas];
    let mut q = vec![0.0f64; n_areas];
    for i in 0..x.nrows() {
        let j = area_index[i];
        let zi = z[i];
        t[j] += zi;
        q[j] += zi * zi;
        for a in 0..p {
            h[j][a] += x[(i, a)] * zi;
        }
    }
    ResponseStats { h, t, q }
}

struct ProfilePoint {
    beta: DVector<f64>,
    sigma2_e: f64,
    loglik: f64,
}

/// GLS solve and profile log likelihood at a fixed variance ratio.
fn profile_at(
    psi: f64,
    ds: &DesignStats,
    rs: &ResponseStats,
    n: usize,
) -> Result<ProfilePoint> {
    let p = ds.p;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for j in 0..ds.g.len() {
        let c = psi / (1.0 + ds.sizes[j] as f64 * psi);
        a += &ds.g[j];
        b += &rs.h[j];
        for r in 0..p {
            let sr = ds.s[j][r];
            b[r] -= c * sr * rs.t[j];
            for cidx in 0..p {
                a[(r, cidx)] -= c * sr * ds.s[j][cidx];
            }
        }
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Rank("the nested-error design is rank deficient".into()))?;
    let beta = chol.solve(&b);
    // Residual quadratic form through the same sufficient statistics.
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for j in 0..ds.g.len() {
        let c = psi / (1.0 + ds.sizes[j] as f64 * psi);
        let xb = ds.s[j].dot(&beta);
        let rtr = rs.q[j] - 2.0 * rs.h[j].dot(&beta) + (&ds.g[j] * &beta).dot(&beta);
        let rsum = rs.t[j] - xb;
        quad += rtr - c * rsum * rsum;
        logdet += (1.0 + ds.sizes[j] as f64 * psi).ln();
    }
    let nf = n as f64;
    let sigma2_e = (quad / nf).max(1e-300);
    let loglik = -0.5 * nf * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * nf * sigma2_e.ln()
        - 0.5 * logdet
        - 0.5 * nf;
    Ok(ProfilePoint {
        beta,
        sigma2_e,
        loglik,
    })
}

/// Fit at a fixed, already-determined transformation.
fn fit_transformed(
    sample: &Dataset,
    covariates: &[&str],
    transform: Transform,
    ctrl: &BhfControl,
) -> Result<BhfFit> {
    let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, covariates, true);
    let design = build_design(sample, &spec)?;
    let y = sample.y_observed();
    if transform.requires_positive() {
        let bad: Vec<usize> = y
            .iter()
            .enumerate()
            .filter(|(_, v)| **v <= 0.0)
            .map(|(i, _)| i)
            .take(5)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Support(format!(
                "transformation needs positive responses; offending rows {bad:?}"
            )));
        }
    }
    let z: Vec<f64> = y.iter().map(|v| transform.apply(*v)).collect();
    let n = z.len();
    let n_areas = design.n_areas();
    let ds = design_stats(&design.x[0], &design.area_index, n_areas);
    let rs = response_stats(&design.x[0], &design.area_index, &z, n_areas);

    let obj = |lp: f64| -> f64 {
        profile_at(lp.exp(), &ds, &rs, n)
            .map(|p| p.loglik)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let lp_hat = numeric::golden_section_max(LN_PSI_RANGE.0, LN_PSI_RANGE.1, 1e-9, obj);
    let psi = lp_hat.exp();
    let point = profile_at(psi, &ds, &rs, n)?;
    let sigma2_e = point.sigma2_e;
    let sigma2_u = psi * sigma2_e;

    let mut shrinkage = Vec::with_capacity(n_areas);
    let mut u_hat = Vec::with_capacity(n_areas);
    for j in 0..n_areas {
        let nj = ds.sizes[j] as f64;
        let w = nj * psi / (1.0 + nj * psi);
        shrinkage.push(w);
        let mean_resid = (rs.t[j] - ds.s[j].dot(&point.beta)) / nj;
        u_hat.push(w * mean_resid);
    }
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let j = design.area_index[i];
            let xb: f64 = (0..ds.p).map(|c| design.x[0][(i, c)] * point.beta[c]).sum();
            z[i] - xb - u_hat[j]
        })
        .collect();

    Ok(BhfFit {
        transform,
        col_names: design.col_names[0].clone(),
        area_labels: design.area_labels.clone(),
        beta: point.beta.iter().cloned().collect(),
        sigma2_u,
        sigma2_e,
        shrinkage,
        u_hat,
        residuals,
        smearing: ctrl.smearing,
        loglik: point.loglik,
    })
}

/// Fit the nested-error model; for [`TransformKind::BoxCox`] the
/// exponent maximising the Jacobian-adjusted profile likelihood over the
/// grid `[-2, 2]` (step 0.05) is selected first.
pub fn fit_bhf(
    sample: &Dataset,
    covariates: &[&str],
    kind: TransformKind,
    ctrl: &BhfControl,
) -> Result<BhfFit> {
    match kind {
        TransformKind::None => fit_transformed(sample, covariates, Transform::None, ctrl),
        TransformKind::Log => fit_transformed(sample, covariates, Transform::Log, ctrl),
        TransformKind::BoxCox => {
            let y = sample.y_observed();
            if y.iter().any(|v| *v <= 0.0) {
                return Err(Error::Support(
                    "Box-Cox selection needs positive responses".into(),
                ));
            }
            let log_jacobian: f64 = y.iter().map(|v| v.ln()).sum();
            let mut best: Option<(f64, f64)> = None;
            for step in 0..=80 {
                let lambda = -2.0 + 0.05 * step as f64;
                let fit = fit_transformed(sample, covariates, Transform::BoxCox(lambda), ctrl)?;
                let adjusted = fit.loglik + (lambda - 1.0) * log_jacobian;
                if best.map_or(true, |(_, b)| adjusted > b) {
                    best = Some((lambda, adjusted));
                }
            }
            let (lambda, _) = best.expect("grid is nonempty");
            fit_transformed(sample, covariates, Transform::BoxCox(lambda), ctrl)
        }
    }
}

/// Fit with a caller-fixed Box-Cox exponent, skipping grid selection.
/// Bootstrap refits use this so every replicate shares the original
/// exponent.
pub fn fit_bhf_fixed_lambda(
    sample: &Dataset,
    covariates: &[&str],
    lambda: f64,
    ctrl: &BhfControl,
) -> Result<BhfFit> {
    fit_transformed(sample, covariates, Transform::BoxCox(lambda), ctrl)
}

/// The back-transformation applied to unit-level predictions, smeared
/// over the sample residuals when enabled. Built once per prediction
/// pass; Box-Cox smearing is interpolated on a knot grid because it has
/// no closed form.
struct UnitBackTransform {
    transform: Transform,
    smear_factor: f64,
    knots: Option<(f64, f64, Vec<f64>)>,
}

impl UnitBackTransform {
    fn new(fit: &BhfFit, z_range: (f64, f64)) -> UnitBackTransform {
        let smearing = fit.smearing && !fit.residuals.is_empty();
        match fit.transform {
            Transform::None => UnitBackTransform {
                transform: fit.transform,
                smear_factor: 1.0,
                knots: None,
            },
            Transform::Log => {
                let factor = if smearing {
                    numeric::mean(
                        &fit.residuals
                            .iter()
                            .map(|r| r.clamp(-50.0, 50.0).exp())
                            .collect::<Vec<f64>>(),
                    )
                } else {
                    1.0
                };
                UnitBackTransform {
                    transform: fit.transform,
                    smear_factor: factor,
                    knots: None,
                }
            }
            Transform::BoxCox(_) => {
                if !smearing {
                    return UnitBackTransform {
                        transform: fit.transform,
                        smear_factor: 1.0,
                        knots: None,
                    };
                }
                let (lo, hi) = z_range;
                let span = (hi - lo).max(1e-12);
                let k = SMEARING_KNOTS;
                let values: Vec<f64> = (0..k)
                    .map(|i| {
                        let z = lo + span * i as f64 / (k - 1) as f64;
                        numeric::mean(
                            &fit.residuals
                                .iter()
                                .map(|r| fit.transform.invert(z + r))
                                .collect::<Vec<f64>>(),
                        )
                    })
                    .collect();
                UnitBackTransform {
                    transform: fit.transform,
                    smear_factor: 1.0,
                    knots: Some((lo, span, values)),
                }
            }
        }
    }

    fn predict(&self, z: f64) -> f64 {
        if let Some((lo, span, values)) = &self.knots {
            let k = values.len();
            let pos = ((z - lo) / span * (k - 1) as f64).clamp(0.0, (k - 1) as f64);
            let i = (pos.floor() as usize).min(k - 2);
            let w = pos - i as f64;
            return values[i] * (1.0 - w) + values[i + 1] * w;
        }
        self.transform.invert(z) * self.smear_factor
    }
}

/// Transformed-scale linear predictors for population rows, with the
/// fitted area effect where the area was seen in training.
fn linear_predictors(fit: &BhfFit, pop: &Dataset) -> Result<Vec<f64>> {
    let n = pop.n_units();
    let mut eta = vec![0.0f64; n];
    for (c, name) in fit.col_names.iter().enumerate() {
        let col = crate::fit::named_column_values(pop, name)?;
        let b = fit.beta[c];
        for i in 0..n {
            eta[i] += b * col[i];
        }
    }
    for (i, a) in pop.area_labels().iter().enumerate() {
        if let Ok(j) = fit.area_labels.binary_search(a) {
            eta[i] += fit.u_hat[j];
        }
    }
    Ok(eta)
}

/// Back-transformed point predictions for every population row.
pub fn predict_units_eblup(fit: &BhfFit, pop: &Dataset) -> Result<Vec<f64>> {
    let eta = linear_predictors(fit, pop)?;
    let lo = eta.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bt = UnitBackTransform::new(fit, (lo, hi));
    Ok(eta.iter().map(|z| bt.predict(*z)).collect())
}

/// Monte Carlo predictor of an arbitrary area functional under the
/// nested-error model: non-sampled units are drawn on the transformed
/// scale from their conditional Normal distribution, back-transformed
/// exactly, attached to the observed sample, and `zeta` is evaluated on
/// the completed vectors; predictions average the `l` replicates.
/// Streams are keyed by `(area, replicate)` like the distributional
/// predictor.
pub fn predict_eblup_mc(
    fit: &BhfFit,
    sample: &Dataset,
    pop: &Dataset,
    zeta: &AreaFunctional,
    l: usize,
    seq: &SeedSequence,
) -> Result<PredictionResult> {
    zeta.validate()?;
    if l == 0 {
        return Err(Error::Config(
            "Monte Carlo needs at least one replicate".into(),
        ));
    }
    let link = link_areas(sample, pop)?;
    let eta = linear_predictors(fit, pop)?;
    let sd_e = fit.sd_e();
    let y_sample = sample.y();
    let n_areas = link.labels.len();

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
                    let z = eta[i] + sd_e * crate::dist::standard_normal(&mut rng);
                    v.push(fit.transform.invert(z));
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

/// Composite area mean predictor: observed sample values plus point
/// predictions of the non-sampled units.
pub fn predict_eblup(fit: &BhfFit, sample: &Dataset, pop: &Dataset) -> Result<PredictionResult> {
    let link = link_areas(sample, pop)?;
    let unit_preds = predict_units_eblup(fit, pop)?;
    let y_sample = sample.y();
    let areas = (0..link.labels.len())
        .map(|j| {
            let n_j = link.sample_rows[j].len();
            let n_pop_j = n_j + link.pop_rows[j].len();
            if n_pop_j == 0 {
                return Err(Error::Data(format!(
                    "area '{}' has neither sample nor population units",
                    link.labels[j]
                )));
            }
            let mut total = 0.0;
            for &i in &link.sample_rows[j] {
                total += y_sample[i].expect("sample response present");
            }
            for &i in &link.pop_rows[j] {
                total += unit_preds[i];
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
        functional: "mean".into(),
        l: 0,
        unsampled_areas: link.unsampled,
    })
}
