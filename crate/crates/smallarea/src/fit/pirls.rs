//! Penalized iteratively reweighted least squares on the link scale.
//!
//! The engine holds one working block per distribution parameter: design
//! matrix, link, coefficients and (optionally) an area random intercept
//! with its variance. [`Engine::update_param`] refits one parameter's
//! block while the others stay fixed, solving the penalized normal
//! equations for `(beta_k, gamma_k)` jointly and halving the step until
//! the penalized deviance does not increase.
//!
//! Working weights are the expected information on the predictor scale
//! where a closed form exists (Normal, Log-Normal, Gamma) and the squared
//! score otherwise (Dagum), which turns the solve into a Gauss-Newton
//! step on the outer-product approximation of the information.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dist::{self, Family, Link, Param, ParamVector};
use crate::error::{Error, Result};

/// Floor for working weights, keeping the normal equations positive
/// definite when a squared score vanishes.
const WEIGHT_FLOOR: f64 = 1e-10;
/// Relative slack accepted when checking that a step did not increase
/// the penalized deviance.
const PD_SLACK: f64 = 1e-9;

/// Working state for one distribution parameter.
pub(crate) struct ParamWork {
    pub x: DMatrix<f64>,
    pub link: Link,
    pub beta: DVector<f64>,
    /// Area random intercepts; empty when the parameter has none.
    pub gamma: Vec<f64>,
    pub has_re: bool,
    /// Random intercept variance; the penalty is `1/sigma2`.
    pub sigma2: f64,
    /// Cached linear predictor per unit.
    pub eta: Vec<f64>,
}

impl ParamWork {
    pub fn new(x: DMatrix<f64>, link: Link, has_re: bool, n_areas: usize) -> ParamWork {
        let n = x.nrows();
        let p = x.ncols();
        ParamWork {
            x,
            link,
            beta: DVector::zeros(p),
            gamma: if has_re { vec![0.0; n_areas] } else { Vec::new() },
            has_re,
            sigma2: 1.0,
            eta: vec![0.0; n],
        }
    }
}

/// Result of one parameter update.
pub(crate) struct UpdateInfo {
    /// Trace of the random-intercept block of the smoother, i.e. the
    /// effective degrees of freedom absorbed by `gamma_k`; 0 without RE.
    pub nu: f64,
}

pub(crate) struct Engine<'a> {
    pub family: Family,
    pub y: &'a [f64],
    /// Optional per-row weights (used by the quadrature EM expansion).
    pub prior_w: Option<&'a [f64]>,
    pub area_index: &'a [usize],
    pub params: Vec<ParamWork>,
}

impl<'a> Engine<'a> {
    pub fn n_units(&self) -> usize {
        self.y.len()
    }

    pub fn refresh_eta(&mut self, k: usize) {
        let w = &mut self.params[k];
        let xb = &w.x * &w.beta;
        for i in 0..xb.len() {
            w.eta[i] = xb[i]
                + if w.has_re {
                    w.gamma[self.area_index[i]]
                } else {
                    0.0
                };
        }
    }

    pub fn refresh_all_eta(&mut self) {
        for k in 0..self.params.len() {
            self.refresh_eta(k);
        }
    }

    /// Natural-scale parameter vector for unit `i`.
    pub fn theta(&self, i: usize) -> ParamVector {
        let mut vals = [0.0f64; 4];
        for (k, w) in self.params.iter().enumerate() {
            vals[k] = w.link.inverse(w.eta[i]);
        }
        ParamVector::from_slice(&vals[..self.params.len()])
    }

    /// Log likelihood at the current state, weighted by the prior row
    /// weights when present. Rows where the density underflows
    /// contribute a large finite penalty so step halving can recover.
    pub fn loglik(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.y.len() {
            let theta = self.theta(i);
            let l = dist::log_pdf(self.family, self.y[i], &theta)
                .unwrap_or(f64::NEG_INFINITY)
                .max(-1e10);
            total += l * self.prior_w.map_or(1.0, |w| w[i]);
        }
        total
    }

    /// Quadratic random-intercept penalty `sum_k gamma_k' G_k gamma_k`
    /// with `G_k = I / sigma2_k`.
    pub fn penalty(&self) -> f64 {
        self.params
            .iter()
            .filter(|w| w.has_re)
            .map(|w| w.gamma.iter().map(|g| g * g).sum::<f64>() / w.sigma2)
            .sum()
    }

    /// Penalized deviance `-2 loglik + penalty`.
    pub fn penalized_deviance(&self) -> f64 {
        -2.0 * self.loglik() + self.penalty()
    }

    /// Expected-information working weight and score on the predictor
    /// scale for parameter `k` at unit `i`.
    fn eta_score_weight(&self, k: usize, i: usize) -> Result<(f64, f64)> {
        let theta = self.theta(i);
        let s = dist::score(self.family, self.y[i], &theta)?;
        let w = &self.params[k];
        let dinv = w.link.inverse_deriv(w.eta[i]);
        let u = s.as_slice()[k] * dinv;
        let param = Param::from_index(k);
        let sigma = theta.get(Param::Sigma).unwrap_or(1.0);
        let info = match (self.family, param) {
            (Family::Normal | Family::LogNormal, Param::Mu) => dinv * dinv / (sigma * sigma),
            (Family::Normal | Family::LogNormal, Param::Sigma) => {
                2.0 * dinv * dinv / (sigma * sigma)
            }
            (Family::Gamma, Param::Mu) => {
                let mu = theta.mu();
                dinv * dinv / (sigma * sigma * mu * mu)
            }
            (Family::Gamma, Param::Sigma) => {
                let s2 = sigma * sigma;
                let info_nat = (4.0 / (s2 * s2 * s2)) * trigamma(1.0 / s2) - 4.0 / (s2 * s2);
                dinv * dinv * info_nat.max(WEIGHT_FLOOR)
            }
            // Squared score: unbiased for the information in expectation.
            _ => u * u,
        };
        Ok((u, info.max(WEIGHT_FLOOR)))
    }

    /// Assemble the penalized normal equations for parameter `k` at the
    /// current state: `A = D' W D + P`, `b = D' (W eta + u)` with
    /// `D = [X | Z]`, returning the unpenalized `A` block as well so the
    /// caller can form the smoother trace.
    fn assemble(&self, k: usize) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
        let w = &self.params[k];
        let p = w.x.ncols();
        let j = if w.has_re { w.gamma.len() } else { 0 };
        let dim = p + j;
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for i in 0..self.y.len() {
            let (u, mut wi) = self.eta_score_weight(k, i)?;
            if let Some(pw) = self.prior_w {
                wi *= pw[i];
            }
            let pw = self.prior_w.map_or(1.0, |v| v[i]);
            let rhs = wi * w.eta[i] + u * pw;
            let row = w.x.row(i);
            for a_col in 0..p {
                let xa = row[a_col];
                b[a_col] += rhs * xa;
                for b_col in a_col..p {
                    a[(a_col, b_col)] += wi * xa * row[b_col];
                }
            }
            if j > 0 {
                let area = p + self.area_index[i];
                b[area] += rhs;
                a[(area, area)] += wi;
                for a_col in 0..p {
                    a[(a_col, area)] += wi * row[a_col];
                }
            }
        }
        // Mirror the upper triangle.
        for r in 0..dim {
            for c in (r + 1)..dim {
                a[(c, r)] = a[(r, c)];
            }
        }
        Ok((a, b, p))
    }

    fn chol(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let mut m = a.clone();
        // Tiny ridge keeps squared-score systems positive definite.
        for d in 0..m.nrows() {
            m[(d, d)] += 1e-10 * (1.0 + m[(d, d)].abs());
        }
        m.cholesky().ok_or_else(|| {
            Error::convergence("penalized normal equations are not positive definite")
        })
    }

    /// One inner cycle for parameter `k`: up to `max_inner` reweighted
    /// solves with step halving against the penalized deviance, then the
    /// smoother trace at the final state.
    pub fn update_param(
        &mut self,
        k: usize,
        max_inner: usize,
        max_halvings: usize,
        inner_tol: f64,
    ) -> Result<UpdateInfo> {
        let mut pd = self.penalized_deviance();
        for _ in 0..max_inner.max(1) {
            let pd_before = pd;
            let (mut a, b, p) = self.assemble(k)?;
            let j = a.nrows() - p;
            if j > 0 {
                let lambda = 1.0 / self.params[k].sigma2;
                for d in p..p + j {
                    a[(d, d)] += lambda;
                }
            }
            let sol = Self::chol(&a)?.solve(&b);

            let old_beta = self.params[k].beta.clone();
            let old_gamma = self.params[k].gamma.clone();
            let mut accepted = false;
            let mut frac = 1.0;
            for _ in 0..=max_halvings {
                {
                    let w = &mut self.params[k];
                    for c in 0..p {
                        w.beta[c] = (1.0 - frac) * old_beta[c] + frac * sol[c];
                    }
                    for g in 0..w.gamma.len() {
                        w.gamma[g] = (1.0 - frac) * old_gamma[g] + frac * sol[p + g];
                    }
                }
                self.center_gamma(k);
                self.refresh_eta(k);
                let pd_new = self.penalized_deviance();
                if pd_new.is_finite() && pd_new <= pd + PD_SLACK * (1.0 + pd.abs()) {
                    accepted = true;
                    pd = pd_new;
                    break;
                }
                frac *= 0.5;
            }
            if !accepted {
                // Restore the previous state; it was already optimal at
                // the available step sizes.
                let w = &mut self.params[k];
                w.beta = old_beta;
                w.gamma = old_gamma;
                self.refresh_eta(k);
                break;
            }
            if (pd_before - pd).abs() < inner_tol {
                break;
            }
        }
        self.smoother_trace(k).map(|nu| UpdateInfo { nu })
    }

    /// Center the random intercepts to mean zero, absorbing the shift
    /// into the intercept column.
    fn center_gamma(&mut self, k: usize) {
        let w = &mut self.params[k];
        if !w.has_re || w.gamma.is_empty() {
            return;
        }
        let m = w.gamma.iter().sum::<f64>() / w.gamma.len() as f64;
        for g in &mut w.gamma {
            *g -= m;
        }
        w.beta[0] += m;
    }

    /// Effective degrees of freedom absorbed by the random intercept:
    /// the trace of `(Z'WZ + lambda I)^{-1} Z'WZ`, i.e.
    /// `sum_j sw_j / (sw_j + lambda)` with `sw_j` the area's working
    /// weight sum. This marginal form (no adjustment for overlap with
    /// the fixed columns) is the one whose fixed point
    /// `sigma2 = sum gamma^2 / nu` reproduces maximum likelihood in the
    /// nested-error model.
    pub fn smoother_trace(&self, k: usize) -> Result<f64> {
        let w = &self.params[k];
        if !w.has_re {
            return Ok(0.0);
        }
        let mut sw = vec![0.0f64; w.gamma.len()];
        for i in 0..self.y.len() {
            let (_, mut wi) = self.eta_score_weight(k, i)?;
            if let Some(pw) = self.prior_w {
                wi *= pw[i];
            }
            sw[self.area_index[i]] += wi;
        }
        let lambda = 1.0 / w.sigma2;
        Ok(sw.iter().map(|s| s / (s + lambda)).sum())
    }

    /// Diagonal of the inverse penalized information for parameter `k`'s
    /// fixed coefficients: approximate squared standard errors.
    pub fn beta_se(&self, k: usize) -> Result<Vec<f64>> {
        let (mut a, _, p) = self.assemble(k)?;
        let j = a.nrows() - p;
        if j > 0 {
            let lambda = 1.0 / self.params[k].sigma2;
            for d in p..p + j {
                a[(d, d)] += lambda;
            }
        }
        let inv = Self::chol(&a)?
            .inverse();
        Ok((0..p).map(|c| inv[(c, c)].max(0.0).sqrt()).collect())
    }
}

/// Trigamma function (also used by the Gamma working weights).
pub(crate) fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv * (1.0 + inv / 2.0 + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0)))
}
