//! Parametric bootstrap MSE estimation.
//!
//! The uncertainty of a predicted area functional is estimated by
//! rebuilding the world from the fitted model: draw fresh area effects
//! and unit responses for the whole population, read off the true
//! functional of that bootstrap population, refit the model on the
//! bootstrap responses at the original sample units, predict the
//! functional again, and average the squared prediction errors over
//! replicates. The same harness serves the distributional model and the
//! nested-error baseline so their error estimates are comparable.
//!
//! Replicates are independent and keyed by the replicate index, so the
//! result does not depend on how many worker threads run them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{sample_one, standard_normal, ParamVector};
use crate::eblup::{
    fit_bhf, fit_bhf_fixed_lambda, predict_eblup, predict_eblup_mc, BhfControl, BhfFit, Transform,
    TransformKind,
};
use crate::error::{Error, Result};
use crate::fit::{fit_gamlss, fit_quadrature_em, FitControl, FitMethod, FittedModel};
use crate::model::{Dataset, ModelSpec};
use crate::predict::{
    link_areas, predict_area_mc, predict_area_mean_analytic, AreaFunctional, PredictionResult,
};
use crate::rng::SeedSequence;

/// Default bootstrap replicate count.
pub const DEFAULT_B: usize = 200;
/// Replicate failure share beyond which the result is refused.
pub const MAX_FAILURE_RATE: f64 = 0.2;

/// Knobs for the bootstrap run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MseControl {
    /// Bootstrap replicates.
    pub b: usize,
    /// Monte Carlo draws per prediction.
    pub l: usize,
    /// Keep the per-replicate `(true, predicted)` pairs in the result.
    pub keep_replicates: bool,
    /// For the mean functional, replace the Monte Carlo prediction with
    /// its analytic large-`L` limit in both the point prediction and
    /// every replicate.
    pub analytic_mean: bool,
    /// Refit method; `None` reuses the method of the original fit.
    pub method: Option<FitMethod>,
}

impl Default for MseControl {
    fn default() -> Self {
        MseControl {
            b: DEFAULT_B,
            l: crate::predict::DEFAULT_L,
            keep_replicates: false,
            analytic_mean: false,
            method: None,
        }
    }
}

/// One area's error estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaMse {
    pub area: String,
    /// Point prediction on the original data, the reference for `cv_pct`.
    pub h_hat: f64,
    pub mse_hat: f64,
    pub rmse: f64,
    /// Coefficient of variation in percent, `100 * rmse / |h_hat|`.
    pub cv_pct: f64,
}

/// The true and predicted functional of one bootstrap replicate, in area
/// order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub h_true: Vec<f64>,
    pub h_pred: Vec<f64>,
}

/// Bootstrap MSE estimates for every area, in sorted area-label order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseResult {
    pub areas: Vec<AreaMse>,
    pub functional: String,
    /// Replicates requested.
    pub b_requested: usize,
    /// Replicates that survived the refit.
    pub b_effective: usize,
    pub n_failed: usize,
    pub replicates: Option<Vec<ReplicateRecord>>,
}

impl MseResult {
    pub fn mse_hat(&self) -> Vec<f64> {
        self.areas.iter().map(|a| a.mse_hat).collect()
    }
}

struct ReplicateOutcome {
    replicate: usize,
    h_true: Vec<f64>,
    h_pred: Vec<f64>,
}

/// True per-area functionals of one generated population, `per_area`
/// holding every unit value of each area.
fn true_functionals(zeta: &AreaFunctional, per_area: &[Vec<f64>]) -> Vec<f64> {
    let global: Option<Vec<f64>> = if zeta.needs_global() {
        Some(per_area.iter().flatten().copied().collect())
    } else {
        None
    };
    per_area
        .iter()
        .map(|vals| {
            let all = global.as_deref().unwrap_or(vals);
            let line = zeta.resolve_line(all, vals);
            zeta.evaluate(vals, line)
        })
        .collect()
}

fn aggregate(
    point: &PredictionResult,
    zeta: &AreaFunctional,
    b_requested: usize,
    keep: bool,
    outcomes: Vec<std::result::Result<ReplicateOutcome, String>>,
) -> Result<MseResult> {
    let n_areas = point.areas.len();
    let mut n_failed = 0usize;
    let mut last_failure = String::new();
    let mut sums = vec![0.0f64; n_areas];
    let mut log = Vec::new();
    for out in outcomes {
        match out {
            Ok(rep) => {
                for j in 0..n_areas {
                    let e = rep.h_pred[j] - rep.h_true[j];
                    sums[j] += e * e;
                }
                if keep {
                    log.push(ReplicateRecord {
                        replicate: rep.replicate,
                        h_true: rep.h_true,
                        h_pred: rep.h_pred,
                    });
                }
            }
            Err(msg) => {
                n_failed += 1;
                last_failure = msg;
            }
        }
    }
    if n_failed as f64 > MAX_FAILURE_RATE * b_requested as f64 {
        return Err(Error::Degenerate(format!(
            "{n_failed} of {b_requested} bootstrap replicates failed; last failure: {last_failure}"
        )));
    }
    let b_effective = b_requested - n_failed;
    let areas = point
        .areas
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let mse = sums[j] / b_effective as f64;
            let rmse = mse.sqrt();
            AreaMse {
                area: a.area.clone(),
                h_hat: a.h_hat,
                mse_hat: mse,
                rmse,
                cv_pct: 100.0 * rmse / a.h_hat.abs(),
            }
        })
        .collect();
    Ok(MseResult {
        areas,
        functional: zeta.name(),
        b_requested,
        b_effective,
        n_failed,
        replicates: if keep { Some(log) } else { None },
    })
}

fn check_preconditions(ctrl: &MseControl, zeta: &AreaFunctional) -> Result<()> {
    zeta.validate()?;
    if ctrl.b < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 replicates, got {}",
            ctrl.b
        )));
    }
    Ok(())
}

fn refit(
    data: &Dataset,
    spec: &ModelSpec,
    fit_ctrl: &FitControl,
    method: FitMethod,
) -> Result<FittedModel> {
    match method {
        FitMethod::Scoring => fit_gamlss(data, spec, fit_ctrl),
        FitMethod::Quadrature { nodes } => fit_quadrature_em(data, spec, nodes, fit_ctrl),
    }
}

fn use_analytic_mean(ctrl: &MseControl, zeta: &AreaFunctional) -> bool {
    ctrl.analytic_mean && matches!(zeta, AreaFunctional::Mean)
}

fn predict_for(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
    zeta: &AreaFunctional,
    ctrl: &MseControl,
    seq: &SeedSequence,
) -> Result<PredictionResult> {
    if use_analytic_mean(ctrl, zeta) {
        predict_area_mean_analytic(model, sample, pop)
    } else {
        predict_area_mc(model, sample, pop, zeta, ctrl.l, seq)
    }
}

/// Parametric bootstrap MSE of the distributional model's predictions.
///
/// Each replicate draws fresh area effects from the fitted variances and
/// fresh responses for every population unit, refits `spec` on the
/// bootstrap responses at the original sample units, and predicts the
/// functional again. Replicates whose refit fails are dropped and
/// counted; more than [`MAX_FAILURE_RATE`] of them failing is an error.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_mse(
    model: &FittedModel,
    sample: &Dataset,
    pop: &Dataset,
    spec: &ModelSpec,
    zeta: &AreaFunctional,
    ctrl: &MseControl,
    fit_ctrl: &FitControl,
    seq: &SeedSequence,
) -> Result<MseResult> {
    check_preconditions(ctrl, zeta)?;
    if !model.converged {
        return Err(Error::Config(
            "refusing to bootstrap from a fit that did not converge".into(),
        ));
    }
    let link = link_areas(sample, pop)?;
    let n_areas = link.labels.len();
    let method = ctrl.method.unwrap_or(model.method);

    let point = predict_for(model, sample, pop, zeta, ctrl, &seq.child(&[0]))?;

    // Fixed-effect predictors and per-row area indices are the same in
    // every replicate.
    let eta_s = model.eta_fixed(sample)?;
    let eta_p = model.eta_fixed(pop)?;
    let n_params = model.spec.family.n_params();
    let n_s = sample.n_units();
    let mut s_area = vec![usize::MAX; n_s];
    for (j, rows) in link.sample_rows.iter().enumerate() {
        for &i in rows {
            s_area[i] = j;
        }
    }
    let re_sd: Vec<Option<f64>> = model.sigma2.iter().map(|s| s.map(f64::sqrt)).collect();

    let outcomes: Vec<std::result::Result<ReplicateOutcome, String>> = (0..ctrl.b)
        .into_par_iter()
        .map(|b| {
            let sub = seq.child(&[1, b as u64]);
            let mut rng = sub.stream(&[0]);

            // Fresh area effects for every area and random parameter.
            let mut gamma_star = vec![vec![0.0f64; n_areas]; n_params];
            for k in 0..n_params {
                if let Some(sd) = re_sd[k] {
                    for j in 0..n_areas {
                        gamma_star[k][j] = sd * standard_normal(&mut rng);
                    }
                }
            }

            let theta_at = |etas: &[Vec<f64>], i: usize, j: usize| -> Result<ParamVector> {
                let vals: Vec<f64> = (0..n_params)
                    .map(|k| {
                        let link_k = model.spec.params[k].link;
                        link_k.inverse(etas[k][i] + gamma_star[k][j])
                    })
                    .collect();
                Ok(ParamVector::from_slice(&vals))
            };

            let mut run = || -> Result<ReplicateOutcome> {
                let mut y_sample = Vec::with_capacity(n_s);
                let mut per_area: Vec<Vec<f64>> = vec![Vec::new(); n_areas];
                for i in 0..n_s {
                    let theta = theta_at(&eta_s, i, s_area[i])?;
                    let y = sample_one(model.spec.family, &theta, &mut rng)?;
                    y_sample.push(y);
                    per_area[s_area[i]].push(y);
                }
                for (j, rows) in link.pop_rows.iter().enumerate() {
                    for &i in rows {
                        let theta = theta_at(&eta_p, i, j)?;
                        let y = sample_one(model.spec.family, &theta, &mut rng)?;
                        per_area[j].push(y);
                    }
                }
                let h_true = true_functionals(zeta, &per_area);
                let bs_sample = sample.with_response(y_sample)?;
                let bs_fit = refit(&bs_sample, spec, fit_ctrl, method)?;
                let pred = predict_for(&bs_fit, &bs_sample, pop, zeta, ctrl, &sub.child(&[1]))?;
                Ok(ReplicateOutcome {
                    replicate: b,
                    h_true,
                    h_pred: pred.h_hat(),
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    aggregate(&point, zeta, ctrl.b, ctrl.keep_replicates, outcomes)
}

fn predict_eblup_for(
    fit: &BhfFit,
    sample: &Dataset,
    pop: &Dataset,
    zeta: &AreaFunctional,
    ctrl: &MseControl,
    seq: &SeedSequence,
) -> Result<PredictionResult> {
    if matches!(zeta, AreaFunctional::Mean) {
        predict_eblup(fit, sample, pop)
    } else {
        predict_eblup_mc(fit, sample, pop, zeta, ctrl.l, seq)
    }
}

/// Parametric bootstrap MSE of the nested-error baseline, run through
/// the same harness so the two estimators' error estimates are
/// comparable. The mean uses the composite predictor; any other
/// functional is predicted by Monte Carlo on the transformed scale. A
/// Box-Cox fit keeps its original exponent in every refit.
pub fn bootstrap_mse_eblup(
    fit: &BhfFit,
    sample: &Dataset,
    pop: &Dataset,
    zeta: &AreaFunctional,
    ctrl: &MseControl,
    bhf_ctrl: &BhfControl,
    seq: &SeedSequence,
) -> Result<MseResult> {
    check_preconditions(ctrl, zeta)?;
    let link = link_areas(sample, pop)?;
    let n_areas = link.labels.len();

    let point = predict_eblup_for(fit, sample, pop, zeta, ctrl, &seq.child(&[0]))?;

    let eta_fe = |data: &Dataset| -> Result<Vec<f64>> {
        let n = data.n_units();
        let mut eta = vec![0.0f64; n];
        for (c, name) in fit.col_names.iter().enumerate() {
            let col = crate::fit::named_column_values(data, name)?;
            for i in 0..n {
                eta[i] += fit.beta[c] * col[i];
            }
        }
        Ok(eta)
    };
    let eta_s = eta_fe(sample)?;
    let eta_p = eta_fe(pop)?;
    let n_s = sample.n_units();
    let mut s_area = vec![usize::MAX; n_s];
    for (j, rows) in link.sample_rows.iter().enumerate() {
        for &i in rows {
            s_area[i] = j;
        }
    }
    let sd_u = fit.sd_u();
    let sd_e = fit.sd_e();
    let covs: Vec<&str> = fit
        .col_names
        .iter()
        .filter(|n| n.as_str() != "(intercept)")
        .map(|n| n.as_str())
        .collect();

    let outcomes: Vec<std::result::Result<ReplicateOutcome, String>> = (0..ctrl.b)
        .into_par_iter()
        .map(|b| {
            let sub = seq.child(&[1, b as u64]);
            let mut rng = sub.stream(&[0]);

            let u_star: Vec<f64> = (0..n_areas)
                .map(|_| sd_u * standard_normal(&mut rng))
                .collect();

            let mut run = || -> Result<ReplicateOutcome> {
                let mut y_sample = Vec::with_capacity(n_s);
                let mut per_area: Vec<Vec<f64>> = vec![Vec::new(); n_areas];
                for i in 0..n_s {
                    let z = eta_s[i] + u_star[s_area[i]] + sd_e * standard_normal(&mut rng);
                    let y = fit.transform.invert(z);
                    y_sample.push(y);
                    per_area[s_area[i]].push(y);
                }
                for (j, rows) in link.pop_rows.iter().enumerate() {
                    for &i in rows {
                        let z = eta_p[i] + u_star[j] + sd_e * standard_normal(&mut rng);
                        per_area[j].push(fit.transform.invert(z));
                    }
                }
                let h_true = true_functionals(zeta, &per_area);
                let bs_sample = sample.with_response(y_sample)?;
                let bs_fit = match fit.transform {
                    Transform::None => fit_bhf(&bs_sample, &covs, TransformKind::None, bhf_ctrl)?,
                    Transform::Log => fit_bhf(&bs_sample, &covs, TransformKind::Log, bhf_ctrl)?,
                    Transform::BoxCox(lambda) => {
                        fit_bhf_fixed_lambda(&bs_sample, &covs, lambda, bhf_ctrl)?
                    }
                };
                let pred =
                    predict_eblup_for(&bs_fit, &bs_sample, pop, zeta, ctrl, &sub.child(&[1]))?;
                Ok(ReplicateOutcome {
                    replicate: b,
                    h_true,
                    h_pred: pred.h_hat(),
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    aggregate(&point, zeta, ctrl.b, ctrl.keep_replicates, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Family, Param};
    use crate::model::Role;

    /// Intercept-only Normal data with a matching population complement:
    /// `j` areas of `n_j` sampled and `m_j` non-sampled units.
    fn flat_world(
        seed: u64,
        n_areas: usize,
        n_j: usize,
        m_j: usize,
        mu: f64,
        sd: f64,
    ) -> (Dataset, Dataset) {
        let seq = SeedSequence::new(seed);
        let mut sb = Dataset::builder(Role::Sample);
        let mut pb = Dataset::builder(Role::Population);
        for j in 0..n_areas {
            let mut rng = seq.stream(&[j as u64]);
            let label = format!("area{j:03}");
            for _ in 0..n_j {
                let y = mu + sd * standard_normal(&mut rng);
                sb.push(&label, Some(y), &[]);
            }
            for _ in 0..m_j {
                pb.push(&label, None, &[]);
            }
        }
        (sb.build().unwrap(), pb.build().unwrap())
    }

    #[test]
    fn matches_analytic_variance_without_random_effects() {
        // With no area effect the composite mean predictor's error is
        // driven by the unseen units plus the estimation error of the
        // grand mean, with variance
        //   (N_j - n_j) / N_j^2 * sigma^2 * (1 + (N_j - n_j) / n).
        let (n_areas, n_j, m_j) = (10usize, 50usize, 25usize);
        let (sample, pop) = flat_world(42, n_areas, n_j, m_j, 20.0, 3.0);
        let spec = ModelSpec::new(Family::Normal);
        let fit = fit_gamlss(&sample, &spec, &FitControl::default()).unwrap();
        let sigma2 = (2.0 * fit.beta[1][0]).exp();

        let ctrl = MseControl {
            b: 500,
            analytic_mean: true,
            ..MseControl::default()
        };
        let res = bootstrap_mse(
            &fit,
            &sample,
            &pop,
            &spec,
            &AreaFunctional::Mean,
            &ctrl,
            &FitControl::default(),
            &SeedSequence::new(7),
        )
        .unwrap();
        assert_eq!(res.b_effective, 500);

        let n_total = (n_areas * n_j) as f64;
        let (nn, mm) = (n_j as f64 + m_j as f64, m_j as f64);
        let reference = mm / (nn * nn) * sigma2 * (1.0 + mm / n_total);
        let avg = res.mse_hat().iter().sum::<f64>() / n_areas as f64;
        assert!(
            (avg / reference - 1.0).abs() < 0.15,
            "avg mse {avg} vs reference {reference}"
        );
        for a in &res.areas {
            assert!(a.mse_hat > 0.0);
            assert!((a.cv_pct - 100.0 * a.rmse / a.h_hat.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (sample, pop) = flat_world(3, 4, 12, 6, 5.0, 1.0);
        let spec = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &[], true);
        let fit = fit_gamlss(&sample, &spec, &FitControl::default()).unwrap();
        let ctrl = MseControl {
            b: 2,
            l: 10,
            keep_replicates: true,
            ..MseControl::default()
        };
        let run = || {
            bootstrap_mse(
                &fit,
                &sample,
                &pop,
                &spec,
                &AreaFunctional::Mean,
                &ctrl,
                &FitControl::default(),
                &SeedSequence::new(99),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.mse_hat(), b.mse_hat());
        let (la, lb) = (a.replicates.unwrap(), b.replicates.unwrap());
        for (ra, rb) in la.iter().zip(&lb) {
            assert_eq!(ra.h_true, rb.h_true);
            assert_eq!(ra.h_pred, rb.h_pred);
        }
    }

    #[test]
    fn replicate_log_recomputes_mse() {
        let (sample, pop) = flat_world(11, 3, 15, 10, 8.0, 2.0);
        let spec = ModelSpec::new(Family::Normal);
        let fit = fit_gamlss(&sample, &spec, &FitControl::default()).unwrap();
        let ctrl = MseControl {
            b: 20,
            l: 25,
            keep_replicates: true,
            ..MseControl::default()
        };
        let res = bootstrap_mse(
            &fit,
            &sample,
            &pop,
            &spec,
            &AreaFunctional::Mean,
            &ctrl,
            &FitControl::default(),
            &SeedSequence::new(5),
        )
        .unwrap();
        let log = res.replicates.as_ref().unwrap();
        assert_eq!(log.len(), res.b_effective);
        for (j, a) in res.areas.iter().enumerate() {
            let recomputed = log
                .iter()
                .map(|r| (r.h_pred[j] - r.h_true[j]).powi(2))
                .sum::<f64>()
                / res.b_effective as f64;
            assert!(
                (recomputed - a.mse_hat).abs() < 1e-12,
                "area {j}: {recomputed} vs {}",
                a.mse_hat
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (sample, pop) = flat_world(1, 3, 10, 5, 4.0, 1.0);
        let spec = ModelSpec::new(Family::Normal);
        let fit = fit_gamlss(&sample, &spec, &FitControl::default()).unwrap();
        let ctrl = MseControl {
            b: 1,
            ..MseControl::default()
        };
        assert!(matches!(
            bootstrap_mse(
                &fit,
                &sample,
                &pop,
                &spec,
                &AreaFunctional::Mean,
                &ctrl,
                &FitControl::default(),
                &SeedSequence::new(1),
            ),
            Err(Error::Config(_))
        ));
        let mut stale = fit.clone();
        stale.converged = false;
        assert!(matches!(
            bootstrap_mse(
                &stale,
                &sample,
                &pop,
                &spec,
                &AreaFunctional::Mean,
                &MseControl::default(),
                &FitControl::default(),
                &SeedSequence::new(1),
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_when_refits_cannot_run() {
        let (sample, pop) = flat_world(2, 3, 10, 5, 4.0, 1.0);
        let spec = ModelSpec::new(Family::Normal);
        let fit = fit_gamlss(&sample, &spec, &FitControl::default()).unwrap();
        // A refit specification naming a column the data lacks fails in
        // every replicate.
        let broken = ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["zz"], false);
        let ctrl = MseControl {
            b: 5,
            l: 5,
            ..MseControl::default()
        };
        assert!(matches!(
            bootstrap_mse(
                &fit,
                &sample,
                &pop,
                &spec,
                &AreaFunctional::Mean,
                &MseControl { ..ctrl.clone() },
                &FitControl::default(),
                &SeedSequence::new(1),
            ),
            Ok(_)
        ));
        assert!(matches!(
            bootstrap_mse(
                &fit,
                &sample,
                &pop,
                &broken,
                &AreaFunctional::Mean,
                &ctrl,
                &FitControl::default(),
                &SeedSequence::new(1),
            ),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn eblup_harness_is_deterministic_and_positive() {
        let sizes = vec![10usize; 5];
        let sample = crate::fit::tests::lmm_sample(61, &sizes, 30.0, 2.0, 3.0, 5.0);
        let mut pb = Dataset::builder(Role::Population);
        let seq = SeedSequence::new(404);
        let mut rng = seq.stream(&[0]);
        for j in 0..5 {
            for _ in 0..20 {
                let x = standard_normal(&mut rng);
                pb.push(&format!("area{j:03}"), None, &[("x1", x)]);
            }
        }
        let pop = pb.build().unwrap();
        let bhf = fit_bhf(&sample, &["x1"], TransformKind::None, &BhfControl::default()).unwrap();
        let ctrl = MseControl {
            b: 8,
            ..MseControl::default()
        };
        let run = || {
            bootstrap_mse_eblup(
                &bhf,
                &sample,
                &pop,
                &AreaFunctional::Mean,
                &ctrl,
                &BhfControl::default(),
                &SeedSequence::new(12),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.mse_hat(), b.mse_hat());
        for area in &a.areas {
            assert!(area.mse_hat > 0.0);
        }
        // Non-mean functionals go through the Monte Carlo predictor.
        let med = bootstrap_mse_eblup(
            &bhf,
            &sample,
            &pop,
            &AreaFunctional::Quantile(0.5),
            &MseControl {
                b: 4,
                l: 20,
                ..MseControl::default()
            },
            &BhfControl::default(),
            &SeedSequence::new(12),
        )
        .unwrap();
        for area in &med.areas {
            assert!(area.mse_hat > 0.0);
        }
    }
}
