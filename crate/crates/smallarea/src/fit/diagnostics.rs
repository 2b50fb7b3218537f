//! Fit diagnostics: deviance-based criteria, likelihood ratio tests and
//! normalized quantile residuals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::FittedModel;
use crate::dist;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numeric::{self, Moments};

/// Clamp bound for the fitted CDF before the normal quantile transform.
const CDF_CLAMP: f64 = 1e-12;

/// Global deviance `-2 sum_i log f(y_i | theta_i)` of a fitted model on
/// a dataset, recomputed from the stored coefficients.
pub fn global_deviance(fit: &FittedModel, data: &Dataset) -> Result<f64> {
    let y = data.y_observed();
    if y.len() != data.n_units() {
        return Err(Error::Data(
            "global deviance needs a fully observed response".into(),
        ));
    }
    let params = fit.params_for(data)?;
    let mut total = 0.0;
    for (yi, theta) in y.iter().zip(&params) {
        total += dist::log_pdf(fit.spec.family, *yi, theta)?;
    }
    Ok(-2.0 * total)
}

/// Generalized Akaike criterion `GDEV + penalty * df` with effective
/// degrees of freedom.
pub fn gaic(fit: &FittedModel, penalty: f64) -> f64 {
    fit.gdev + penalty * fit.df
}

/// Bayesian information criterion: `GDEV + ln(n) * df`.
pub fn bic(fit: &FittedModel) -> f64 {
    fit.gdev + (fit.n_obs as f64).ln() * fit.df
}

/// Default penalty for [`gaic`]: `sqrt(ln n)`, between the AIC constant
/// and the BIC growth rate.
pub fn default_gaic_penalty(n: usize) -> f64 {
    (n as f64).ln().sqrt()
}

/// Likelihood ratio test result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrTest {
    pub statistic: f64,
    /// Effective degrees-of-freedom difference.
    pub df: f64,
    pub p_value: f64,
}

/// Likelihood ratio test of `null` against the richer `alt`. Both fits
/// must share the family and data; `null`'s design columns must be a
/// subset of `alt`'s per parameter. The statistic is referred to a
/// chi-squared distribution with the effective degrees-of-freedom
/// difference.
pub fn lr_test(null: &FittedModel, alt: &FittedModel) -> Result<LrTest> {
    if null.spec.family != alt.spec.family {
        return Err(Error::Nesting(format!(
            "families differ: {} vs {}",
            null.spec.family, alt.spec.family
        )));
    }
    if null.n_obs != alt.n_obs {
        return Err(Error::Nesting(format!(
            "sample sizes differ: {} vs {}",
            null.n_obs, alt.n_obs
        )));
    }
    for (k, cols) in null.col_names.iter().enumerate() {
        let alt_cols = alt
            .col_names
            .get(k)
            .ok_or_else(|| Error::Nesting("parameter counts differ".into()))?;
        for c in cols {
            if !alt_cols.contains(c) {
                return Err(Error::Nesting(format!(
                    "column '{c}' of the null model is missing from the alternative"
                )));
            }
        }
    }
    let df = alt.df - null.df;
    if df <= 1e-8 {
        return Err(Error::Nesting(
            "the alternative has no additional degrees of freedom".into(),
        ));
    }
    let statistic = (null.gdev - alt.gdev).max(0.0);
    let chi2 = ChiSquared::new(df).map_err(|e| Error::Domain(e.to_string()))?;
    let p_value = chi2.sf(statistic);
    Ok(LrTest {
        statistic,
        df,
        p_value,
    })
}

/// Normalized quantile residuals of a fit.
#[derive(Debug, Clone)]
pub struct QuantileResiduals {
    pub residuals: Vec<f64>,
    /// Rows where the fitted CDF had to be clamped away from 0 or 1.
    pub n_clamped: usize,
    pub moments: Moments,
}

/// Normalized quantile residuals `Phi^{-1}(F(y_i | theta_i))`. Under a
/// correctly specified model these are a standard normal sample; their
/// moments are reported for misspecification checks.
pub fn quantile_residuals(fit: &FittedModel, data: &Dataset) -> Result<QuantileResiduals> {
    let y = data.y_observed();
    if y.len() != data.n_units() {
        return Err(Error::Data(
            "quantile residuals need a fully observed response".into(),
        ));
    }
    let params = fit.params_for(data)?;
    let mut residuals = Vec::with_capacity(y.len());
    let mut n_clamped = 0;
    for (yi, theta) in y.iter().zip(&params) {
        let u = dist::cdf(fit.spec.family, *yi, theta)?;
        let c = u.clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
        if c != u {
            n_clamped += 1;
        }
        residuals.push(numeric::normal_quantile(c)?);
    }
    let moments = numeric::moments(&residuals);
    Ok(QuantileResiduals {
        residuals,
        n_clamped,
        moments,
    })
}
