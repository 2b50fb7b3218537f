//! Gauss-Hermite quadrature fitting via a finite-mixture EM.
//!
//! The marginal likelihood of a model with one mean random intercept is
//! an integral over the area effect. Discretizing the standard normal
//! with a Gauss-Hermite grid turns each area into a finite mixture over
//! the nodes `u_k` with weights `pi_k`; the fitter then alternates
//! posterior node weights per area (E-step) with a weighted refit of the
//! fixed coefficients on node-expanded data (M-step). The random
//! intercept standard deviation enters the M-step as the coefficient on
//! the node column, so it is updated by the same weighted solve.
//!
//! Each M-step performs one scoring update per parameter, a generalized
//! EM step, so the marginal likelihood never decreases (up to solver
//! slack). The returned model stores the conditional global deviance at
//! the posterior mean intercepts, comparable with the scoring fitter.

use nalgebra::DMatrix;

use super::pirls::{Engine, ParamWork};
use super::{FitControl, FitMethod, FittedModel};
use crate::dist;
use crate::error::{Error, Result};
use crate::model::{build_design, Dataset, ModelSpec};

/// Relative slack allowed on the marginal likelihood monotonicity check,
/// matching the step-halving acceptance slack of the inner solver.
const MONOTONE_SLACK: f64 = 1e-8;

/// Nodes and weights integrating against the standard normal density.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Hermite grid for the standard normal weight, computed from the
/// eigendecomposition of the Jacobi matrix of the Hermite recurrence.
/// Exact for polynomials up to degree `2k - 1`.
pub fn gauss_hermite_grid(k: usize) -> Result<QuadratureGrid> {
    if k == 0 {
        return Err(Error::Config("quadrature needs at least one node".into()));
    }
    if k == 1 {
        return Ok(QuadratureGrid {
            nodes: vec![0.0],
            weights: vec![1.0],
        });
    }
    // Jacobi matrix of the probabilists' Hermite polynomials: zero
    // diagonal, off-diagonal sqrt(i).
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 1..k {
        let v = (i as f64).sqrt();
        jac[(i - 1, i)] = v;
        jac[(i, i - 1)] = v;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|c| {
            let w = eig.eigenvectors[(0, c)];
            (eig.eigenvalues[c], w * w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Symmetrize: average mirrored nodes and weights, zero the center.
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..k / 2 {
        let m = k - 1 - i;
        let x = 0.5 * (nodes[m] - nodes[i]);
        nodes[i] = -x;
        nodes[m] = x;
        let w = 0.5 * (weights[i] + weights[m]);
        weights[i] = w;
        weights[m] = w;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureGrid { nodes, weights })
}

/// Fit a model with a single mean random intercept by Gauss-Hermite
/// mixture EM with `k_nodes` nodes.
pub fn fit_quadrature_em(
    data: &Dataset,
    spec: &ModelSpec,
    k_nodes: usize,
    ctrl: &FitControl,
) -> Result<FittedModel> {
    let grid = gauss_hermite_grid(k_nodes)?;
    if !spec.params[0].random_intercept
        || spec.params.iter().skip(1).any(|p| p.random_intercept)
    {
        return Err(Error::Config(
            "the quadrature fitter supports exactly one random intercept, on the mean".into(),
        ));
    }
    let design = build_design(data, spec)?;
    let y = data.y_observed();
    super::check_response_support(spec.family, &y)?;
    let n = y.len();
    let n_areas = design.n_areas();
    let kq = grid.nodes.len();

    // Fixed-effect starting values from a scoring fit without the
    // random intercept.
    let mut spec_fe = spec.clone();
    for p in &mut spec_fe.params {
        p.random_intercept = false;
    }
    let fe_ctrl = FitControl {
        sigma_bias_correction: false,
        max_outer: 100,
        ..ctrl.clone()
    };
    let fe = match super::fit_gamlss(data, &spec_fe, &fe_ctrl) {
        Ok(m) => m,
        Err(Error::Convergence {
            partial: Some(m), ..
        }) => *m,
        Err(e) => return Err(e),
    };

    let fe_eta_mu: Vec<f64> = (0..n)
        .map(|i| {
            (0..design.x[0].ncols())
                .map(|c| design.x[0][(i, c)] * fe.beta[0][c])
                .sum()
        })
        .collect();

    // Node-expanded data, unit-major: row r = i * kq + node.
    let mut y_exp = Vec::with_capacity(n * kq);
    let mut area_exp = Vec::with_capacity(n * kq);
    for i in 0..n {
        for _ in 0..kq {
            y_exp.push(y[i]);
            area_exp.push(design.area_index[i]);
        }
    }
    let mut works: Vec<ParamWork> = Vec::with_capacity(spec.params.len());
    for (k, ps) in spec.params.iter().enumerate() {
        let xk = &design.x[k];
        let p = xk.ncols();
        let extra = usize::from(k == 0);
        let mut xe = DMatrix::<f64>::zeros(n * kq, p + extra);
        for i in 0..n {
            for q in 0..kq {
                let r = i * kq + q;
                for c in 0..p {
                    xe[(r, c)] = xk[(i, c)];
                }
                if extra == 1 {
                    xe[(r, p)] = grid.nodes[q];
                }
            }
        }
        let mut w = ParamWork::new(xe, ps.link, false, 0);
        for c in 0..p {
            w.beta[c] = fe.beta[k][c];
        }
        if extra == 1 {
            w.beta[p] = initial_re_sd(spec, &y, &design.area_index, n_areas, &fe_eta_mu);
        }
        works.push(w);
    }

    let n_params = works.len();
    let mut trace = Vec::new();
    let mut weights_exp = vec![0.0f64; n * kq];
    let mut post = vec![0.0f64; n_areas * kq];
    let mut prev_marginal = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for outer in 0..ctrl.max_outer {
        iterations = outer + 1;
        // E-step: per-area joint log likelihood at each node.
        refresh_works(&mut works);
        let row_ll = row_logliks(spec, &y_exp, &works)?;
        let mut s = vec![0.0f64; n_areas * kq];
        for i in 0..n {
            let j = design.area_index[i];
            for q in 0..kq {
                s[j * kq + q] += row_ll[i * kq + q];
            }
        }
        let mut marginal = 0.0;
        for j in 0..n_areas {
            let mut best = f64::NEG_INFINITY;
            for q in 0..kq {
                let v = grid.weights[q].ln() + s[j * kq + q];
                s[j * kq + q] = v;
                best = best.max(v);
            }
            let mut denom = 0.0;
            for q in 0..kq {
                denom += (s[j * kq + q] - best).exp();
            }
            let lj = best + denom.ln();
            marginal += lj;
            for q in 0..kq {
                post[j * kq + q] = (s[j * kq + q] - lj).exp();
            }
        }
        trace.push(-2.0 * marginal);
        debug_assert!(
            marginal >= prev_marginal - MONOTONE_SLACK * (1.0 + prev_marginal.abs()),
            "marginal likelihood decreased: {prev_marginal} -> {marginal}"
        );
        if (marginal - prev_marginal).abs() < ctrl.tol {
            converged = true;
            break;
        }
        prev_marginal = marginal;

        for i in 0..n {
            let j = design.area_index[i];
            for q in 0..kq {
                weights_exp[i * kq + q] = post[j * kq + q];
            }
        }
        // M-step: one weighted scoring update per parameter.
        let mut engine = Engine {
            family: spec.family,
            y: &y_exp,
            prior_w: Some(&weights_exp),
            area_index: &area_exp,
            params: works,
        };
        for k in 0..n_params {
            engine.update_param(k, 1, ctrl.step_halving, ctrl.tol * 0.01)?;
        }
        works = engine.params;
    }

    // Posterior mean intercepts; the node coefficient carries the sign.
    let p_mu = design.x[0].ncols();
    let sd_coef = works[0].beta[p_mu];
    let mut gamma = vec![0.0f64; n_areas];
    for j in 0..n_areas {
        gamma[j] = sd_coef
            * (0..kq)
                .map(|q| post[j * kq + q] * grid.nodes[q])
                .sum::<f64>();
    }
    let sigma2 = (sd_coef * sd_coef).max(super::SIGMA2_FLOOR);

    // Conditional engine on the original data for deviance, degrees of
    // freedom and standard errors.
    let mut cond_params = Vec::with_capacity(n_params);
    for (k, ps) in spec.params.iter().enumerate() {
        let mut w = ParamWork::new(design.x[k].clone(), ps.link, k == 0, n_areas);
        let p = design.x[k].ncols();
        for c in 0..p {
            w.beta[c] = works[k].beta[c];
        }
        if k == 0 {
            w.gamma = gamma.clone();
            w.sigma2 = sigma2;
        }
        cond_params.push(w);
    }
    let mut cond = Engine {
        family: spec.family,
        y: &y,
        prior_w: None,
        area_index: &design.area_index,
        params: cond_params,
    };
    cond.refresh_all_eta();
    let nu = cond.smoother_trace(0)?;
    let gdev = -2.0 * cond.loglik();

    let mut beta = Vec::new();
    let mut beta_se = Vec::new();
    let mut gammas = Vec::new();
    let mut sigma2s = Vec::new();
    let mut edf_random = Vec::new();
    let mut df = 0.0;
    for (k, w) in cond.params.iter().enumerate() {
        beta.push(w.beta.iter().cloned().collect::<Vec<f64>>());
        beta_se.push(cond.beta_se(k).unwrap_or_else(|_| vec![f64::NAN; w.beta.len()]));
        if k == 0 {
            gammas.push(Some(gamma.clone()));
            sigma2s.push(Some(sigma2));
            edf_random.push(Some(nu));
            df += w.beta.len() as f64 + nu;
        } else {
            gammas.push(None);
            sigma2s.push(None);
            edf_random.push(None);
            df += w.beta.len() as f64;
        }
    }
    let model = FittedModel {
        spec: spec.clone(),
        col_names: design.col_names.clone(),
        area_labels: design.area_labels.clone(),
        beta,
        beta_se,
        gamma: gammas,
        sigma2: sigma2s,
        edf_random,
        gdev,
        df,
        n_obs: n,
        converged,
        iterations,
        trace,
        method: FitMethod::Quadrature { nodes: kq },
    };
    if converged {
        Ok(model)
    } else {
        Err(Error::Convergence {
            message: format!("quadrature EM did not converge in {iterations} cycles"),
            partial: Some(Box::new(model)),
        })
    }
}

fn refresh_works(works: &mut [ParamWork]) {
    for w in works.iter_mut() {
        let xb = &w.x * &w.beta;
        for i in 0..xb.len() {
            w.eta[i] = xb[i];
        }
    }
}

/// Per-row log likelihood on node-expanded data at the current state.
fn row_logliks(spec: &ModelSpec, y_exp: &[f64], works: &[ParamWork]) -> Result<Vec<f64>> {
    let n = y_exp.len();
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let mut vals = [0.0f64; 4];
        for (k, w) in works.iter().enumerate() {
            vals[k] = w.link.inverse(w.eta[i]);
        }
        let theta = crate::dist::ParamVector::from_slice(&vals[..works.len()]);
        out[i] = dist::log_pdf(spec.family, y_exp[i], &theta)
            .unwrap_or(f64::NEG_INFINITY)
            .max(-1e10);
    }
    Ok(out)
}

/// Starting value for the node-column coefficient: the standard
/// deviation of area-mean residuals on the mean link scale when that
/// scale is observable, otherwise a small positive constant.
fn initial_re_sd(
    spec: &ModelSpec,
    y: &[f64],
    area_index: &[usize],
    n_areas: usize,
    fe_eta_mu: &[f64],
) -> f64 {
    use crate::dist::{Family, Link};
    let obs: Option<Vec<f64>> = match (spec.family, spec.params[0].link) {
        (Family::Normal, Link::Identity) => Some(y.to_vec()),
        (Family::LogNormal, Link::Identity) => Some(y.iter().map(|v| v.ln()).collect()),
        _ => None,
    };
    let Some(obs) = obs else { return 0.3 };
    let mut sums = vec![0.0f64; n_areas];
    let mut counts = vec![0usize; n_areas];
    for i in 0..y.len() {
        sums[area_index[i]] += obs[i] - fe_eta_mu[i];
        counts[area_index[i]] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s / (*c).max(1) as f64)
        .collect();
    let m = crate::numeric::mean(&means);
    let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n_areas.max(1) as f64;
    var.sqrt().max(0.05)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Family, Param};
    use crate::fit::{fit_gamlss, FitControl};
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_moments_match_standard_normal() {
        for k in [1usize, 2, 3, 5, 8, 15] {
            let g = gauss_hermite_grid(k).unwrap();
            let m0: f64 = g.weights.iter().sum();
            let m1: f64 = g.nodes.iter().zip(&g.weights).map(|(u, w)| w * u).sum();
            let m3: f64 = g
                .nodes
                .iter()
                .zip(&g.weights)
                .map(|(u, w)| w * u * u * u)
                .sum();
            assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m1, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m3, 0.0, epsilon = 1e-12);
            if k > 1 {
                let m2: f64 = g.nodes.iter().zip(&g.weights).map(|(u, w)| w * u * u).sum();
                assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn grid_two_and_three_nodes_are_exact() {
        let g2 = gauss_hermite_grid(2).unwrap();
        assert_abs_diff_eq!(g2.nodes[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g2.nodes[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g2.weights[0], 0.5, epsilon = 1e-12);
        let g3 = gauss_hermite_grid(3).unwrap();
        assert_abs_diff_eq!(g3.nodes[0], -(3f64.sqrt()), epsilon = 1e-10);
        assert_abs_diff_eq!(g3.nodes[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g3.nodes[2], 3f64.sqrt(), epsilon = 1e-10);
        assert_abs_diff_eq!(g3.weights[0], 1.0 / 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g3.weights[1], 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_integrates_even_polynomials() {
        // E[u^4] = 3 and E[u^6] = 15 need k >= 3 and k >= 4.
        let g = gauss_hermite_grid(6).unwrap();
        let m4: f64 = g
            .nodes
            .iter()
            .zip(&g.weights)
            .map(|(u, w)| w * u.powi(4))
            .sum();
        let m6: f64 = g
            .nodes
            .iter()
            .zip(&g.weights)
            .map(|(u, w)| w * u.powi(6))
            .sum();
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(m6, 15.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(gauss_hermite_grid(0).is_err());
    }

    #[test]
    fn em_matches_scoring_on_nested_error_model() {
        let sizes: Vec<usize> = (0..30).map(|j| 5 + j / 2).collect();
        let data = crate::fit::tests::lmm_sample(71, &sizes, 100.0, 4.0, 4.0, 20.0);
        let spec = crate::model::ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let ctrl = FitControl {
            sigma_bias_correction: false,
            ..FitControl::default()
        };
        let scoring = fit_gamlss(&data, &spec, &ctrl).unwrap();
        let em = fit_quadrature_em(&data, &spec, 15, &ctrl).unwrap();
        assert!(
            (em.beta[0][0] - scoring.beta[0][0]).abs() < 0.05,
            "b0 {} vs {}",
            em.beta[0][0],
            scoring.beta[0][0]
        );
        assert!((em.beta[0][1] - scoring.beta[0][1]).abs() < 0.02);
        let sd_em = em.re_sd(Param::Mu).unwrap();
        let sd_sc = scoring.re_sd(Param::Mu).unwrap();
        assert!((sd_em - sd_sc).abs() < 0.25, "{sd_em} vs {sd_sc}");
        let g_em = em.gamma[0].as_ref().unwrap();
        let g_sc = scoring.gamma[0].as_ref().unwrap();
        for (a, b) in g_em.iter().zip(g_sc) {
            assert!((a - b).abs() < 0.6, "{a} vs {b}");
        }
    }

    #[test]
    fn em_trace_is_monotone() {
        let sizes = vec![8usize; 15];
        let data = crate::fit::tests::lmm_sample(13, &sizes, 50.0, 2.0, 3.0, 8.0);
        let spec = crate::model::ModelSpec::new(Family::Normal).with_terms(Param::Mu, &["x1"], true);
        let ctrl = FitControl {
            sigma_bias_correction: false,
            ..FitControl::default()
        };
        let em = fit_quadrature_em(&data, &spec, 9, &ctrl).unwrap();
        for w in em.trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6 * (1.0 + w[0].abs()),
                "trace increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert_eq!(em.method, crate::fit::FitMethod::Quadrature { nodes: 9 });
    }

    #[test]
    fn rejects_scale_random_intercept() {
        let sizes = vec![6usize; 6];
        let data = crate::fit::tests::lmm_sample(1, &sizes, 10.0, 1.0, 1.0, 2.0);
        let spec = crate::model::ModelSpec::new(Family::Normal)
            .with_terms(Param::Mu, &["x1"], true)
            .with_terms(Param::Sigma, &[], true);
        let err = fit_quadrature_em(&data, &spec, 5, &FitControl::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
