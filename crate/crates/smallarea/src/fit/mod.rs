//! Model fitting.
//!
//! [`fit_gamlss`] maximises the penalized likelihood
//! `l_p = sum_i log f(y_i | theta_i) - 1/2 sum_k gamma_k' G_k gamma_k`
//! with `G_k = I / sigma2_k`, by cyclic scoring: an outer loop visits the
//! distribution parameters in order (mu, sigma, nu, tau) and an inner
//! penalized IRLS updates `(beta_k, gamma_k)` for the active parameter on
//! the link scale, with step halving so the penalized deviance never
//! increases within a cycle. After each cycle the random intercept
//! variances are refreshed from the moment identity
//! `sigma2_k = sum_j gamma_kj^2 / nu_k`, where `nu_k` is the effective
//! degrees of freedom absorbed by `gamma_k`; this is the fixed point of
//! the EM update for the marginal likelihood.
//!
//! For the Normal family with an identity mean link, a mean random
//! intercept, and a constant scale, the same fixed point reproduces the
//! maximum likelihood solution of the nested-error linear mixed model:
//! the scale step then uses the closed form
//! `sigma_eps^2 = sum r_i^2 / (n - nu_mu)`, which accounts for the error
//! degrees of freedom absorbed by the fitted mean. The optional
//! finite-sample correction (on by default) further rescales sigma by
//! `sqrt((n - nu_mu) / (n - df_mu))` with `df_mu = rho_mu + nu_mu`, so the
//! reported scale uses the full `n - df_mu` denominator.

mod diagnostics;
mod pirls;
mod quadrature;

pub use diagnostics::{
    bic, default_gaic_penalty, gaic, global_deviance, lr_test, quantile_residuals, LrTest,
    QuantileResiduals,
};
pub use quadrature::{fit_quadrature_em, gauss_hermite_grid, QuadratureGrid};

use serde::{Deserialize, Serialize};

use crate::dist::{Family, Link, Param, ParamVector};
use crate::error::{Error, Result};
use crate::model::{build_design, Column, Dataset, DesignBundle, ModelSpec};
use pirls::{Engine, ParamWork};

/// Floor for estimated random intercept variances.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Iteration controls for [`fit_gamlss`] and [`fit_quadrature_em`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitControl {
    /// Maximum outer cycles over the distribution parameters.
    pub max_outer: usize,
    /// Maximum reweighted solves per parameter per cycle.
    pub max_inner: usize,
    /// Convergence tolerance on the change in global deviance.
    pub tol: f64,
    /// Maximum step halvings per inner solve.
    pub step_halving: usize,
    /// Finite-sample rescaling of the Normal identity-link scale
    /// estimate to the `n - df_mu` denominator.
    pub sigma_bias_correction: bool,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            max_outer: 500,
            max_inner: 10,
            tol: 1e-4,
            step_halving: 10,
            sigma_bias_correction: true,
        }
    }
}

/// How a [`FittedModel`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// Cyclic penalized scoring.
    Scoring,
    /// Gauss-Hermite mixture EM with the given number of nodes.
    Quadrature { nodes: usize },
}

/// A fitted distributional regression model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    /// Design column names per parameter, intercept first.
    pub col_names: Vec<Vec<String>>,
    /// Sorted training area labels; random intercepts align with these.
    pub area_labels: Vec<String>,
    /// Fixed coefficients per parameter.
    pub beta: Vec<Vec<f64>>,
    /// Approximate standard errors of `beta`, from the inverse penalized
    /// information at convergence.
    pub beta_se: Vec<Vec<f64>>,
    /// Area random intercepts per parameter (None without RE).
    pub gamma: Vec<Option<Vec<f64>>>,
    /// Random intercept variances per parameter (None without RE).
    pub sigma2: Vec<Option<f64>>,
    /// Effective degrees of freedom absorbed by each random intercept.
    pub edf_random: Vec<Option<f64>>,
    /// Global deviance `-2 sum_i log f(y_i | theta_i)` at the stored
    /// coefficients.
    pub gdev: f64,
    /// Total effective degrees of freedom: fixed coefficient counts plus
    /// random intercept traces.
    pub df: f64,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Global deviance after each outer cycle.
    pub trace: Vec<f64>,
    pub method: FitMethod,
}

impl FittedModel {
    /// Random intercept standard deviation for a parameter, when present.
    pub fn re_sd(&self, param: Param) -> Option<f64> {
        self.sigma2
            .get(param.index())
            .and_then(|v| v.map(f64::sqrt))
    }

    pub fn beta_for(&self, param: Param) -> &[f64] {
        &self.beta[param.index()]
    }

    /// Index of each data row's area among the training areas; `None`
    /// for areas not seen in training.
    pub fn area_positions(&self, data: &Dataset) -> Vec<Option<usize>> {
        data.area_labels()
            .iter()
            .map(|a| self.area_labels.binary_search(a).ok())
            .collect()
    }

    /// Fixed-effect linear predictors on the link scale for every row of
    /// `data`, one vector per distribution parameter, without the random
    /// intercepts.
    pub fn eta_fixed(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let n = data.n_units();
        let n_params = self.spec.family.n_params();
        let mut etas: Vec<Vec<f64>> = Vec::with_capacity(n_params);
        for k in 0..n_params {
            let mut eta = vec![0.0; n];
            for (c, name) in self.col_names[k].iter().enumerate() {
                let col = named_column_values(data, name)?;
                let b = self.beta[k][c];
                for i in 0..n {
                    eta[i] += b * col[i];
                }
            }
            etas.push(eta);
        }
        Ok(etas)
    }

    /// Fitted parameter vectors for every row of `data`. Random
    /// intercepts enter by area label; unseen areas get zero.
    pub fn params_for(&self, data: &Dataset) -> Result<Vec<ParamVector>> {
        let n = data.n_units();
        let n_params = self.spec.family.n_params();
        let areas = self.area_positions(data);
        let mut etas = self.eta_fixed(data)?;
        for k in 0..n_params {
            if let Some(g) = &self.gamma[k] {
                for i in 0..n {
                    if let Some(j) = areas[i] {
                        etas[k][i] += g[j];
                    }
                }
            }
            let link = self.spec.params[k].link;
            for e in &mut etas[k] {
                *e = link.inverse(*e);
            }
        }
        Ok((0..n)
            .map(|i| {
                let vals: Vec<f64> = (0..n_params).map(|k| etas[k][i]).collect();
                ParamVector::from_slice(&vals)
            })
            .collect())
    }
}

/// Rebuild a fitted design column by name on new data. Categorical
/// indicator columns are reconstructed from their `term=level` names;
/// levels unseen in training fall into the reference.
pub(crate) fn named_column_values(data: &Dataset, name: &str) -> Result<Vec<f64>> {
    if name == "(intercept)" {
        return Ok(vec![1.0; data.n_units()]);
    }
    match data.covariate(name) {
        Some(Column::Numeric(v)) => return Ok(v.clone()),
        Some(Column::Categorical(_)) => {
            return Err(Error::Spec(format!(
                "column '{name}' is categorical but a numeric column was fitted"
            )))
        }
        None => {}
    }
    if let Some((term, level)) = name.split_once('=') {
        match data.covariate(term) {
            Some(Column::Categorical(values)) => {
                return Ok(values
                    .iter()
                    .map(|v| if v == level { 1.0 } else { 0.0 })
                    .collect());
            }
            Some(Column::Numeric(_)) => {
                return Err(Error::Spec(format!(
                    "column '{term}' is numeric but a categorical level '{level}' was fitted"
                )))
            }
            None => {}
        }
    }
    Err(Error::Spec(format!("column '{name}' missing from data")))
}

/// Moment estimator of a random intercept variance:
/// `sigma2 = sum_j gamma_j^2 / edf`, floored at [`SIGMA2_FLOOR`].
/// `edf` is the effective degrees of freedom absorbed by the intercepts;
/// passing the number of areas corresponds to no shrinkage adjustment.
pub fn estimate_re_variance(gamma: &[f64], edf: f64) -> f64 {
    if edf <= 1e-8 {
        return SIGMA2_FLOOR;
    }
    (gamma.iter().map(|g| g * g).sum::<f64>() / edf).max(SIGMA2_FLOOR)
}

/// Family-specific constant starting values.
fn initial_theta(family: Family, y: &[f64]) -> ParamVector {
    let n = y.len() as f64;
    match family {
        Family::Normal => {
            let m = crate::numeric::mean(y);
            let v = y.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            ParamVector::two(m, v.sqrt().max(1e-6))
        }
        Family::LogNormal => {
            let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
            let m = crate::numeric::mean(&logs);
            let v = logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            ParamVector::two(m, v.sqrt().max(1e-6))
        }
        Family::Gamma => {
            let m = crate::numeric::mean(y);
            let v = y.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            ParamVector::two(m.max(1e-10), (v.sqrt() / m).clamp(0.1, 10.0))
        }
        Family::Dagum => {
            let med = crate::numeric::median(y);
            let mut sorted = y.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q1 = sorted[sorted.len() / 4].max(1e-10);
            let ratio = (med / q1).max(1.0 + 1e-6);
            let sigma0 = (3f64.ln() / ratio.ln()).clamp(0.5, 10.0);
            ParamVector::three(med.max(1e-10), sigma0, 1.0)
        }
    }
}

/// Reject responses outside the family support before any iteration.
fn check_response_support(family: Family, y: &[f64]) -> Result<()> {
    let bad: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| !family.support().contains(**v))
        .map(|(i, _)| i)
        .take(5)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Support(format!(
            "{family} support excludes responses at rows {bad:?}"
        )))
    }
}

/// Whether the constant-scale closed form replaces the IRLS scale step:
/// Normal, identity mean link, intercept-only scale without RE (the mean
/// may or may not carry one).
fn has_closed_form_scale(spec: &ModelSpec) -> bool {
    spec.family == Family::Normal
        && spec.params[0].link == Link::Identity
        && spec.params[1].terms.is_empty()
        && spec.params[1].link == Link::Log
        && !spec.params[1].random_intercept
}

/// Fit by cyclic penalized scoring. On convergence failure the error
/// carries the partial fit.
pub fn fit_gamlss(data: &Dataset, spec: &ModelSpec, ctrl: &FitControl) -> Result<FittedModel> {
    let design = build_design(data, spec)?;
    let y = data.y_observed();
    check_response_support(spec.family, &y)?;
    let n = y.len();
    let n_areas = design.n_areas();

    let theta0 = initial_theta(spec.family, &y);
    let mut params = Vec::with_capacity(spec.params.len());
    for (k, ps) in spec.params.iter().enumerate() {
        let mut w = ParamWork::new(design.x[k].clone(), ps.link, ps.random_intercept, n_areas);
        w.beta[0] = ps.link.apply(theta0.as_slice()[k]);
        params.push(w);
    }
    let mut engine = Engine {
        family: spec.family,
        y: &y,
        prior_w: None,
        area_index: &design.area_index,
        params,
    };
    engine.refresh_all_eta();

    let closed_scale = has_closed_form_scale(spec);
    let inner_tol = ctrl.tol * 0.01;
    let mut trace = Vec::new();
    let mut nus = vec![0.0f64; spec.params.len()];
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_gdev = f64::INFINITY;

    for outer in 0..ctrl.max_outer {
        iterations = outer + 1;
        for k in 0..engine.params.len() {
            if k == Param::Sigma.index() && closed_scale {
                // Closed-form ML scale for the Normal identity-link mean:
                // sigma^2 = sum r^2 / (n - nu_mu), accounting for the
                // degrees of freedom the fitted mean absorbs.
                let mu_eta: Vec<f64> = engine.params[0].eta.clone();
                let rss: f64 = y
                    .iter()
                    .zip(&mu_eta)
                    .map(|(yi, mi)| (yi - mi) * (yi - mi))
                    .sum();
                let denom = (n as f64 - nus[0]).max(1.0);
                let sigma = (rss / denom).sqrt().max(1e-10);
                engine.params[k].beta[0] = Link::Log.apply(sigma);
                engine.refresh_eta(k);
            } else {
                let info =
                    engine.update_param(k, ctrl.max_inner, ctrl.step_halving, inner_tol)?;
                nus[k] = info.nu;
            }
        }
        // Refresh random intercept variances from the moment identity.
        for k in 0..engine.params.len() {
            if engine.params[k].has_re {
                engine.params[k].sigma2 = estimate_re_variance(&engine.params[k].gamma, nus[k]);
            }
        }
        let gdev = -2.0 * engine.loglik();
        trace.push(gdev);
        if !gdev.is_finite() {
            return Err(Error::Convergence {
                message: "global deviance diverged".into(),
                partial: Some(Box::new(assemble_model(
                    spec, &design, &engine, &nus, gdev, trace.clone(), iterations, false,
                )?)),
            });
        }
        if (prev_gdev - gdev).abs() < ctrl.tol {
            converged = true;
            break;
        }
        prev_gdev = gdev;
    }

    // Recompute the mu trace at the final state so the variance report and
    // degrees of freedom reflect the converged fit.
    for k in 0..engine.params.len() {
        if engine.params[k].has_re {
            nus[k] = engine.smoother_trace(k)?;
        }
    }

    if ctrl.sigma_bias_correction && spec.family == Family::Normal
        && spec.params[0].link == Link::Identity
    {
        apply_sigma_correction(&mut engine, spec, &nus, closed_scale);
    }

    let gdev = -2.0 * engine.loglik();
    let model = assemble_model(
        spec,
        &design,
        &engine,
        &nus,
        gdev,
        trace,
        iterations,
        converged,
    )?;
    if converged {
        Ok(model)
    } else {
        Err(Error::Convergence {
            message: format!(
                "no convergence after {} outer cycles (last deviance change {:.3e})",
                iterations,
                (prev_gdev - model.gdev).abs()
            ),
            partial: Some(Box::new(model)),
        })
    }
}

/// Rescale the fitted Normal scale to the `n - df_mu` denominator with
/// `df_mu = rho_mu + nu_mu`. With the closed-form scale step the
/// in-loop estimate already uses `n - nu_mu`, so only the fixed-effect
/// part remains; otherwise the IRLS scale is the plain ML `n` estimate.
fn apply_sigma_correction(
    engine: &mut Engine<'_>,
    spec: &ModelSpec,
    nus: &[f64],
    closed_scale: bool,
) {
    let n = engine.n_units() as f64;
    let rho_mu = engine.params[0].x.ncols() as f64;
    let df_mu = rho_mu + nus[0];
    if n - df_mu <= 1.0 {
        return;
    }
    let factor = if closed_scale {
        ((n - nus[0]) / (n - df_mu)).sqrt()
    } else {
        (n / (n - df_mu)).sqrt()
    };
    let k = Param::Sigma.index();
    match spec.params[k].link {
        Link::Log => engine.params[k].beta[0] += factor.ln(),
        Link::Identity => {
            for b in engine.params[k].beta.iter_mut() {
                *b *= factor;
            }
            for g in engine.params[k].gamma.iter_mut() {
                *g *= factor;
            }
        }
    }
    engine.refresh_eta(k);
}

#[allow(clippy::too_many_arguments)]
fn assemble_model(
    spec: &ModelSpec,
    design: &DesignBundle,
    engine: &Engine<'_>,
    nus: &[f64],
    gdev: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> Result<FittedModel> {
    let mut beta = Vec::new();
    let mut beta_se = Vec::new();
    let mut gamma = Vec::new();
    let mut sigma2 = Vec::new();
    let mut edf_random = Vec::new();
    let mut df = 0.0;
    for (k, w) in engine.params.iter().enumerate() {
        beta.push(w.beta.iter().cloned().collect::<Vec<f64>>());
        beta_se.push(engine.beta_se(k).unwrap_or_else(|_| vec![f64::NAN; w.beta.len()]));
        if w.has_re {
            gamma.push(Some(w.gamma.clone()));
            sigma2.push(Some(w.sigma2));
            edf_random.push(Some(nus[k]));
            df += w.beta.len() as f64 + nus[k];
        } else {
            gamma.push(None);
            sigma2.push(None);
            edf_random.push(None);
            df += w.beta.len() as f64;
        }
    }
    Ok(FittedModel {
        spec: spec.clone(),
        col_names: design.col_names.clone(),
        area_labels: design.area_labels.clone(),
        beta,
        beta_se,
        gamma,
        sigma2,
        edf_random,
        gdev,
        df,
        n_obs: engine.n_units(),
        converged,
        iterations,
        trace,
        method: FitMethod::Scoring,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Role;
    use crate::rng::SeedSequence;
    use approx::assert_abs_diff_eq;
    use rand::RngCore;

    fn normal_draw(rng: &mut impl RngCore) -> f64 {
        crate::dist::standard_normal(rng)
    }

    /// One sampled dataset of the nested-error kind: mu = b0 + b1 x + gamma_j,
    /// with the given area sizes.
    pub(crate) fn lmm_sample(
        seed: u64,
        sizes: &[usize],
        b0: f64,
        b1: f64,
        sd_gamma: f64,
        sd_eps: f64,
    ) -> Dataset {
        let seq = SeedSequence::new(seed);
        let mut b = Dataset::builder(Role::Sample);
        for (j, &nj) in sizes.iter().enumerate() {
            let mut rng = seq.stream(&[j as u64]);
            let gamma = sd_gamma * normal_draw(&mut rng);
            for _ in 0..nj {
                let x = normal_draw(&mut rng);
                let y = b0 + b1 * x + gamma + sd_eps * normal_draw(&mut rng);
                b.push(&format!("area{j:03}"), Some(y), &[("x1", x)]);
            }
        }
        b.build().unwrap()
    }

    #[test]
    fn intercept_only_normal_matches_closed_form() {
        let mut b = Dataset::builder(Role::Sample);
        let ys = [4.1, 5.2, 3.9, 4.8, 5.5, 4.4, 5.0, 4.2, 4.9, 5.1];
        for (i, &y) in ys.iter().enumerate() {
            b.push(&format!("a{}", i % 2), Some(y), &[]);
        }
        let data = b.build().unwrap();
        let spec = ModelSpec::new(Family::Normal);
        let ctrl = FitControl {
            sigma_bias_correction: false,
            ..FitControl::default()
        };
        let fit = fit_gamlss(&data, &spec, &ctrl).unwrap();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var_ml = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        assert_abs_diff_eq!(fit.beta[0][0], mean, epsilon = 1e-6);
        let sigma_hat = fit.beta[1][0].exp();
        assert_abs_diff_eq!(sigma_hat * sigma_hat, var_ml, epsilon = 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn bias_correction_rescales_sigma() {
        let mut b = Dataset::builder(Role::Sample);
        let ys = [4.1, 5.2, 3.9, 4.8, 5.5, 4.4, 5.0, 4.2, 4.9, 5.1];
        for (i, &y) in ys.iter().enumerate() {
            b.push(&format!("a{}", i % 2), Some(y), &[]);
        }
        let data = b.build().unwrap();
        let spec = ModelSpec::new(Family::Normal);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var_unb = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
        let sigma_hat = fit.beta[1][0].exp();
        assert_abs_diff_eq!(sigma_hat * sigma_hat, var_unb, epsilon = 1e-6);
    }

    #[test]
    fn recovers_nested_error_coefficients() {
        let sizes: Vec<usize> = (0..50).map(|j| 4 + (57 * j) / 49).collect();
        let data = lmm_sample(31, &sizes, 100.0, 4.0, 4.0, 20.0);
        let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        assert!(fit.converged);
        // The intercept absorbs the realized mean of the area effects,
        // which has standard deviation 4 / sqrt(50) here.
        assert!((fit.beta[0][0] - 100.0).abs() < 2.0, "b0 {}", fit.beta[0][0]);
        // se(b1) is about sigma_eps / sqrt(n) = 0.5 on this draw.
        assert!((fit.beta[0][1] - 4.0).abs() < 1.5, "b1 {}", fit.beta[0][1]);
        let sd_eps = fit.beta[1][0].exp();
        assert!((sd_eps - 20.0).abs() < 1.0, "sd_eps {sd_eps}");
        let sd_gamma = fit.re_sd(Param::Mu).unwrap();
        assert!(sd_gamma > 2.0 && sd_gamma < 6.5, "sd_gamma {sd_gamma}");
        // Centered random intercepts.
        let g = fit.gamma[0].as_ref().unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-6);
        assert_eq!(g.len(), 50);
    }

    #[test]
    fn re_variance_recovery_over_replicates() {
        // Interquartile range of sigma_gamma over repeated fits brackets
        // the generating value 4.
        let sizes: Vec<usize> = (0..50).map(|j| 4 + (57 * j) / 49).collect();
        let mut sds = Vec::new();
        for t in 0..100 {
            let data = lmm_sample(1000 + t, &sizes, 100.0, 4.0, 4.0, 20.0);
            let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
            let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
            sds.push(fit.re_sd(Param::Mu).unwrap());
        }
        sds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q1 = sds[24];
        let q3 = sds[74];
        assert!(q1 > 2.5, "first quartile {q1}");
        assert!(q3 < 5.5, "third quartile {q3}");
    }

    #[test]
    fn estimate_re_variance_identities() {
        assert_abs_diff_eq!(estimate_re_variance(&[1.0, -1.0], 2.0), 1.0);
        assert_abs_diff_eq!(estimate_re_variance(&[0.0; 10], 10.0), SIGMA2_FLOOR);
        assert_abs_diff_eq!(estimate_re_variance(&[1.0, -1.0], 0.0), SIGMA2_FLOOR);
    }

    #[test]
    fn gdev_matches_recomputation_from_stored_coefficients() {
        let sizes = vec![8usize; 12];
        let data = lmm_sample(7, &sizes, 10.0, 2.0, 1.0, 3.0);
        let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        let recomputed = global_deviance(&fit, &data).unwrap();
        assert!(
            (fit.gdev - recomputed).abs() <= 1e-6 * fit.gdev.abs(),
            "{} vs {}",
            fit.gdev,
            recomputed
        );
    }

    #[test]
    fn support_violation_reported_before_iteration() {
        let mut b = Dataset::builder(Role::Sample);
        b.push("a", Some(1.0), &[]);
        b.push("a", Some(-2.0), &[]);
        b.push("b", Some(3.0), &[]);
        let data = b.build().unwrap();
        let err = fit_gamlss(
            &data,
            &ModelSpec::new(Family::LogNormal),
            &FitControl::default(),
        )
        .unwrap_err();
        match err {
            Error::Support(msg) => assert!(msg.contains('1'), "{msg}"),
            other => panic!("expected support error, got {other}"),
        }
    }

    #[test]
    fn convergence_error_carries_partial_fit() {
        let sizes = vec![6usize; 8];
        let data = lmm_sample(3, &sizes, 5.0, 1.0, 1.0, 2.0);
        let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let ctrl = FitControl {
            max_outer: 1,
            tol: 1e-12,
            ..FitControl::default()
        };
        let err = fit_gamlss(&data, &spec, &ctrl).unwrap_err();
        match err {
            Error::Convergence { partial, .. } => {
                let m = partial.expect("partial fit attached");
                assert!(!m.converged);
                assert_eq!(m.iterations, 1);
            }
            other => panic!("expected convergence error, got {other}"),
        }
    }

    #[test]
    fn heteroskedastic_sigma_model_recovers_slope() {
        // y ~ N(1 + 2 x, sigma = exp(0.2 + 0.5 z))
        let seq = SeedSequence::new(99);
        let mut b = Dataset::builder(Role::Sample);
        let mut rng = seq.stream(&[0]);
        for i in 0..4000 {
            let x = normal_draw(&mut rng);
            let z = normal_draw(&mut rng);
            let sigma = (0.2 + 0.5 * z).exp();
            let y = 1.0 + 2.0 * x + sigma * normal_draw(&mut rng);
            b.push(&format!("a{}", i % 10), Some(y), &[("x", x), ("z", z)]);
        }
        let data = b.build().unwrap();
        let spec = ModelSpec::new(Family::Normal)
            .with_terms(Param::Mu, &["x"], false)
            .with_terms(Param::Sigma, &["z"], false);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        assert!((fit.beta[0][1] - 2.0).abs() < 0.05);
        assert!((fit.beta[1][0] - 0.2).abs() < 0.05, "b0s {}", fit.beta[1][0]);
        assert!((fit.beta[1][1] - 0.5).abs() < 0.05, "b1s {}", fit.beta[1][1]);
    }

    #[test]
    fn lognormal_fit_recovers_scale_model() {
        let seq = SeedSequence::new(123);
        let mut b = Dataset::builder(Role::Sample);
        let mut rng = seq.stream(&[0]);
        for i in 0..3000 {
            let x = normal_draw(&mut rng);
            let z = normal_draw(&mut rng);
            let sigma = (-2.0 + 0.5 * z).exp();
            let y = (7.0 + 1.0 * x + sigma * normal_draw(&mut rng)).exp();
            b.push(&format!("a{}", i % 6), Some(y), &[("x", x), ("z", z)]);
        }
        let data = b.build().unwrap();
        let spec = ModelSpec::new(Family::LogNormal)
            .with_terms(Param::Mu, &["x"], false)
            .with_terms(Param::Sigma, &["z"], false);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        assert!((fit.beta[0][0] - 7.0).abs() < 0.02);
        assert!((fit.beta[0][1] - 1.0).abs() < 0.02);
        assert!((fit.beta[1][0] + 2.0).abs() < 0.05);
        assert!((fit.beta[1][1] - 0.5).abs() < 0.05);
    }

    #[test]
    fn dagum_fit_recovers_generating_coefficients() {
        // mu = exp(3 + 1.5 x), sigma = 3.4, nu = exp(-0.4 + 0.1 z)
        let seq = SeedSequence::new(5);
        let mut rng = seq.stream(&[0]);
        let mut b = Dataset::builder(Role::Sample);
        for i in 0..4000 {
            let x = normal_draw(&mut rng);
            let z = normal_draw(&mut rng);
            let theta = ParamVector::three((3.0 + 1.5 * x).exp(), 3.4, (-0.4 + 0.1 * z).exp());
            let y = crate::dist::sample_one(Family::Dagum, &theta, &mut rng).unwrap();
            b.push(&format!("a{}", i % 8), Some(y), &[("x", x), ("z", z)]);
        }
        let data = b.build().unwrap();
        let spec = ModelSpec::new(Family::Dagum)
            .with_terms(Param::Mu, &["x"], false)
            .with_terms(Param::Nu, &["z"], false);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        assert!((fit.beta[0][0] - 3.0).abs() < 0.15, "b0 {}", fit.beta[0][0]);
        assert!((fit.beta[0][1] - 1.5).abs() < 0.1, "b1 {}", fit.beta[0][1]);
        let sigma = fit.beta[1][0].exp();
        assert!((sigma - 3.4).abs() < 0.3, "sigma {sigma}");
    }

    #[test]
    fn serde_round_trip_preserves_predictions() {
        let sizes = vec![10usize; 6];
        let data = lmm_sample(17, &sizes, 50.0, 3.0, 2.0, 5.0);
        let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let fit = fit_gamlss(&data, &spec, &FitControl::default()).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: FittedModel = serde_json::from_str(&json).unwrap();
        let a = fit.params_for(&data).unwrap();
        let b = back.params_for(&data).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.as_slice(), pb.as_slice());
        }
    }
}
