//! Response distributions for distributional regression.
//!
//! Each family exposes up to four parameters, always in the order
//! mu, sigma, nu, tau. Parameter values live on the natural scale; link
//! functions map them to the unconstrained scale used by the fitting
//! algorithms. Log densities, CDFs, quantiles, exact sampling and analytic
//! score functions are provided for every family.
//!
//! Parameterisations:
//! * `Normal(mu, sigma)`: mean and standard deviation.
//! * `LogNormal(mu, sigma)`: mean and standard deviation of `log y`.
//! * `Gamma(mu, sigma)`: mean `mu` and coefficient-of-variation parameter
//!   `sigma`, i.e. shape `1/sigma^2` and variance `sigma^2 mu^2`.
//! * `Dagum(mu, sigma, nu)`: scale `mu` and shape parameters `sigma`, `nu`
//!   with density `f(y) = (sigma nu / y) (y/mu)^{sigma nu}
//!   [1 + (y/mu)^sigma]^{-(nu+1)}`.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::numeric::{normal_cdf, normal_quantile};

/// Smallest admissible value for positive parameters.
pub const PARAM_FLOOR: f64 = 1e-10;
/// Linear predictors under a log link are clamped to this magnitude
/// before exponentiation.
pub const MAX_LOG_ETA: f64 = 50.0;

/// Distribution parameter slots, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Mu,
    Sigma,
    Nu,
    Tau,
}

impl Param {
    pub const ALL: [Param; 4] = [Param::Mu, Param::Sigma, Param::Nu, Param::Tau];

    pub fn index(self) -> usize {
        match self {
            Param::Mu => 0,
            Param::Sigma => 1,
            Param::Nu => 2,
            Param::Tau => 3,
        }
    }

    pub fn from_index(i: usize) -> Param {
        Param::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::Mu => "mu",
            Param::Sigma => "sigma",
            Param::Nu => "nu",
            Param::Tau => "tau",
        }
    }
}

impl std::fmt::Display for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Link functions between the natural parameter scale and the linear
/// predictor scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    /// Natural value to predictor scale.
    pub fn apply(self, value: f64) -> f64 {
        match self {
            Link::Identity => value,
            Link::Log => value.max(PARAM_FLOOR).ln(),
        }
    }

    /// Predictor scale to natural value.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.clamp(-MAX_LOG_ETA, MAX_LOG_ETA).exp(),
        }
    }

    /// Derivative of the inverse link at `eta`.
    pub fn inverse_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => eta.clamp(-MAX_LOG_ETA, MAX_LOG_ETA).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Support of the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
}

impl Support {
    pub fn contains(self, y: f64) -> bool {
        match self {
            Support::Real => y.is_finite(),
            Support::Positive => y.is_finite() && y > 0.0,
        }
    }
}

/// Response families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    LogNormal,
    Dagum,
    Gamma,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Normal,
        Family::LogNormal,
        Family::Dagum,
        Family::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::LogNormal => "lognormal",
            Family::Dagum => "dagum",
            Family::Gamma => "gamma",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Family::Normal),
            "lognormal" | "log-normal" => Ok(Family::LogNormal),
            "dagum" => Ok(Family::Dagum),
            "gamma" => Ok(Family::Gamma),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }

    /// Number of distribution parameters.
    pub fn n_params(self) -> usize {
        match self {
            Family::Normal | Family::LogNormal | Family::Gamma => 2,
            Family::Dagum => 3,
        }
    }

    pub fn params(self) -> &'static [Param] {
        &Param::ALL[..self.n_params()]
    }

    pub fn support(self) -> Support {
        match self {
            Family::Normal => Support::Real,
            _ => Support::Positive,
        }
    }

    /// Default link for each parameter. `mu` is the mean of `y` for the
    /// Normal family and the mean of `log y` for the Log-Normal family,
    /// so both keep the identity link; every positive parameter defaults
    /// to the log link.
    pub fn default_link(self, param: Param) -> Link {
        match (self, param) {
            (Family::Normal, Param::Mu) => Link::Identity,
            (Family::LogNormal, Param::Mu) => Link::Identity,
            _ => Link::Log,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A value for each parameter of some family; unused slots are absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    vals: [f64; 4],
    len: u8,
}

impl ParamVector {
    pub fn two(mu: f64, sigma: f64) -> Self {
        ParamVector {
            vals: [mu, sigma, 0.0, 0.0],
            len: 2,
        }
    }

    pub fn three(mu: f64, sigma: f64, nu: f64) -> Self {
        ParamVector {
            vals: [mu, sigma, nu, 0.0],
            len: 3,
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        assert!((2..=4).contains(&s.len()), "2 to 4 parameters expected");
        let mut vals = [0.0; 4];
        vals[..s.len()].copy_from_slice(s);
        ParamVector {
            vals,
            len: s.len() as u8,
        }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vals[..self.len as usize]
    }

    pub fn get(&self, p: Param) -> Option<f64> {
        if p.index() < self.len as usize {
            Some(self.vals[p.index()])
        } else {
            None
        }
    }

    pub fn set(&mut self, p: Param, value: f64) {
        assert!(p.index() < self.len as usize, "parameter {p} absent");
        self.vals[p.index()] = value;
    }

    pub fn mu(&self) -> f64 {
        self.vals[0]
    }

    pub fn sigma(&self) -> f64 {
        self.vals[1]
    }

    pub fn nu(&self) -> f64 {
        self.vals[2]
    }
}

/// Validate that `theta` matches the family's arity and parameter domains.
pub fn check_params(family: Family, theta: &ParamVector) -> Result<()> {
    if theta.len() != family.n_params() {
        return Err(Error::Domain(format!(
            "{} expects {} parameters, got {}",
            family,
            family.n_params(),
            theta.len()
        )));
    }
    for (i, &v) in theta.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "{} parameter {} is not finite",
                family,
                Param::from_index(i)
            )));
        }
    }
    let positive = |p: Param, v: f64| -> Result<()> {
        if v <= 0.0 {
            Err(Error::Domain(format!(
                "{family} parameter {p} must be positive, got {v}"
            )))
        } else {
            Ok(())
        }
    };
    match family {
        Family::Normal | Family::LogNormal => positive(Param::Sigma, theta.sigma()),
        Family::Gamma => {
            positive(Param::Mu, theta.mu())?;
            positive(Param::Sigma, theta.sigma())
        }
        Family::Dagum => {
            positive(Param::Mu, theta.mu())?;
            positive(Param::Sigma, theta.sigma())?;
            positive(Param::Nu, theta.nu())
        }
    }
}

fn check_support(family: Family, y: f64) -> Result<()> {
    if family.support().contains(y) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "response {y} outside the support of {family}"
        )))
    }
}

/// log(1 + exp(x)) without overflow.
fn ln1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1 / (1 + exp(-x)).
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Log density of `y` under the family at `theta`.
pub fn log_pdf(family: Family, y: f64, theta: &ParamVector) -> Result<f64> {
    check_params(family, theta)?;
    check_support(family, y)?;
    Ok(match family {
        Family::Normal => {
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let z = (y - mu) / sigma;
            -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
        }
        Family::LogNormal => {
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let z = (y.ln() - mu) / sigma;
            -0.5 * z * z - sigma.ln() - LN_SQRT_2PI - y.ln()
        }
        Family::Gamma => {
            // shape k = 1/sigma^2, scale s = sigma^2 mu
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let k = 1.0 / (sigma * sigma);
            let s = sigma * sigma * mu;
            (k - 1.0) * y.ln() - y / s - k * s.ln() - ln_gamma(k)
        }
        Family::Dagum => {
            // log f = log(sigma nu / y) + sigma nu log(y/mu)
            //         - (nu + 1) log(1 + (y/mu)^sigma)
            let (mu, sigma, nu) = (theta.mu(), theta.sigma(), theta.nu());
            let l = (y / mu).ln();
            sigma.ln() + nu.ln() - y.ln() + sigma * nu * l - (nu + 1.0) * ln1p_exp(sigma * l)
        }
    })
}

/// CDF of `y` under the family at `theta`.
pub fn cdf(family: Family, y: f64, theta: &ParamVector) -> Result<f64> {
    check_params(family, theta)?;
    check_support(family, y)?;
    Ok(match family {
        Family::Normal => normal_cdf((y - theta.mu()) / theta.sigma()),
        Family::LogNormal => normal_cdf((y.ln() - theta.mu()) / theta.sigma()),
        Family::Gamma => {
            let k = 1.0 / (theta.sigma() * theta.sigma());
            let s = theta.sigma() * theta.sigma() * theta.mu();
            gamma_lr(k, y / s)
        }
        Family::Dagum => {
            // F(y) = [1 + (y/mu)^{-sigma}]^{-nu}
            let l = (y / theta.mu()).ln();
            (-theta.nu() * ln1p_exp(-theta.sigma() * l)).exp()
        }
    })
}

/// Quantile function: the `u`-quantile of the family at `theta`.
pub fn quantile(family: Family, u: f64, theta: &ParamVector) -> Result<f64> {
    check_params(family, theta)?;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "quantile requires u in (0, 1), got {u}"
        )));
    }
    match family {
        Family::Normal => Ok(theta.mu() + theta.sigma() * normal_quantile(u)?),
        Family::LogNormal => Ok((theta.mu() + theta.sigma() * normal_quantile(u)?).exp()),
        Family::Gamma => {
            let k = 1.0 / (theta.sigma() * theta.sigma());
            let s = theta.sigma() * theta.sigma() * theta.mu();
            Ok(s * standard_gamma_quantile(k, u)?)
        }
        Family::Dagum => {
            // y = mu (u^{-1/nu} - 1)^{-1/sigma}
            let t = (-u.ln() / theta.nu()).exp_m1();
            Ok(theta.mu() * t.powf(-1.0 / theta.sigma()))
        }
    }
}

/// Quantile of the Gamma(k, 1) distribution by Newton refinement of a
/// Wilson-Hilferty starting value, with a bisection fallback.
fn standard_gamma_quantile(k: f64, u: f64) -> Result<f64> {
    let z = normal_quantile(u)?;
    let mut x = if k > 0.2 {
        let c = 1.0 - 1.0 / (9.0 * k) + z / (3.0 * k.sqrt());
        k * c * c * c
    } else {
        // Small-shape start from the left-tail expansion F(x) ~ x^k / Gamma(k+1).
        ((u.ln() + ln_gamma(k + 1.0)) / k).exp()
    };
    if !(x.is_finite() && x > 0.0) {
        x = k;
    }
    let log_pdf1 = |x: f64| (k - 1.0) * x.ln() - x - ln_gamma(k);
    for _ in 0..100 {
        let fx = gamma_lr(k, x);
        let err = fx - u;
        if err.abs() < 1e-14 {
            return Ok(x);
        }
        let pdf = log_pdf1(x).exp();
        if pdf <= 0.0 || !pdf.is_finite() {
            break;
        }
        let mut step = err / pdf;
        // Keep the iterate strictly positive.
        while x - step <= 0.0 {
            step *= 0.5;
        }
        x -= step;
        if step.abs() < 1e-13 * x.max(1e-300) {
            return Ok(x);
        }
    }
    // Bisection fallback on a bracket grown from the start value.
    let (mut lo, mut hi) = (x, x);
    while gamma_lr(k, lo) > u && lo > 1e-300 {
        lo *= 0.25;
    }
    while gamma_lr(k, hi) < u && hi < 1e300 {
        hi *= 4.0;
    }
    if !(lo < hi) {
        return Err(Error::convergence(format!(
            "gamma quantile failed to bracket (k = {k}, u = {u})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_lr(k, mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) < 1e-13 * hi {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::convergence(format!(
        "gamma quantile did not converge (k = {k}, u = {u})"
    )))
}

/// A uniform draw in the open interval (0, 1).
pub fn unit_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal draw by inversion.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    normal_quantile(unit_open(rng)).expect("u in (0,1)")
}

/// One draw from the family at `theta`.
pub fn sample_one(family: Family, theta: &ParamVector, rng: &mut impl RngCore) -> Result<f64> {
    check_params(family, theta)?;
    Ok(match family {
        Family::Normal => theta.mu() + theta.sigma() * standard_normal(rng),
        Family::LogNormal => (theta.mu() + theta.sigma() * standard_normal(rng)).exp(),
        Family::Dagum => {
            let u = unit_open(rng);
            let t = (-u.ln() / theta.nu()).exp_m1();
            theta.mu() * t.powf(-1.0 / theta.sigma())
        }
        Family::Gamma => {
            let k = 1.0 / (theta.sigma() * theta.sigma());
            let s = theta.sigma() * theta.sigma() * theta.mu();
            s * standard_gamma_draw(k, rng)
        }
    })
}

/// `n` draws from the family at `theta`.
pub fn sample(
    family: Family,
    theta: &ParamVector,
    n: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<f64>> {
    check_params(family, theta)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(sample_one(family, theta, rng)?);
    }
    Ok(out)
}

/// Marsaglia-Tsang rejection sampler for Gamma(k, 1).
fn standard_gamma_draw(k: f64, rng: &mut impl RngCore) -> f64 {
    if k < 1.0 {
        // Boost: draw from Gamma(k + 1) and scale by U^{1/k}.
        let g = standard_gamma_draw(k + 1.0, rng);
        let u = unit_open(rng);
        return g * u.powf(1.0 / k);
    }
    let d = k - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u = unit_open(rng);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v3;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v3 + v3.ln()) {
            return d * v3;
        }
    }
}

/// Mean of the family at `theta`.
///
/// The Dagum mean `mu Gamma(nu + 1/sigma) Gamma(1 - 1/sigma) / Gamma(nu)`
/// only exists for `sigma > 1`; otherwise `MomentUndefined` is returned.
pub fn mean_of(family: Family, theta: &ParamVector) -> Result<f64> {
    check_params(family, theta)?;
    Ok(match family {
        Family::Normal => theta.mu(),
        Family::LogNormal => (theta.mu() + 0.5 * theta.sigma() * theta.sigma()).exp(),
        Family::Gamma => theta.mu(),
        Family::Dagum => {
            let (mu, sigma, nu) = (theta.mu(), theta.sigma(), theta.nu());
            if sigma <= 1.0 {
                return Err(Error::MomentUndefined(format!(
                    "Dagum mean requires sigma > 1, got sigma = {sigma}"
                )));
            }
            let ln_mean =
                ln_gamma(nu + 1.0 / sigma) + ln_gamma(1.0 - 1.0 / sigma) - ln_gamma(nu);
            mu * ln_mean.exp()
        }
    })
}

/// Score: the gradient of `log_pdf` with respect to each natural-scale
/// parameter, in parameter order.
pub fn score(family: Family, y: f64, theta: &ParamVector) -> Result<ParamVector> {
    check_params(family, theta)?;
    check_support(family, y)?;
    Ok(match family {
        Family::Normal => {
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let r = y - mu;
            ParamVector::two(r / (sigma * sigma), (r * r - sigma * sigma) / sigma.powi(3))
        }
        Family::LogNormal => {
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let r = y.ln() - mu;
            ParamVector::two(r / (sigma * sigma), (r * r - sigma * sigma) / sigma.powi(3))
        }
        Family::Gamma => {
            let (mu, sigma) = (theta.mu(), theta.sigma());
            let s2 = sigma * sigma;
            let d_mu = (y - mu) / (s2 * mu * mu);
            let d_sigma = (2.0 / (sigma * s2))
                * ((y - mu) / mu - (y / (s2 * mu)).ln() + digamma(1.0 / s2));
            ParamVector::two(d_mu, d_sigma)
        }
        Family::Dagum => {
            let (mu, sigma, nu) = (theta.mu(), theta.sigma(), theta.nu());
            let l = (y / mu).ln();
            // p = t / (1 + t) with t = (y/mu)^sigma, computed stably.
            let p = logistic(sigma * l);
            let d_mu = (sigma / mu) * ((nu + 1.0) * p - nu);
            let d_sigma = 1.0 / sigma + l * (nu - (nu + 1.0) * p);
            let d_nu = 1.0 / nu + sigma * l - ln1p_exp(sigma * l);
            ParamVector::three(d_mu, d_sigma, d_nu)
        }
    })
}

/// One row of the distribution-selection table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub family: Family,
    pub theta: ParamVector,
    pub loglik: f64,
    pub gdev: f64,
    pub gaic: f64,
    pub bic: f64,
    pub df: usize,
    pub converged: bool,
}

/// Outcome of `select_distribution`: rows ranked by GAIC plus any warnings
/// about skipped candidates.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    pub warnings: Vec<String>,
}

/// Fit each candidate family to `y` by intercept-only maximum likelihood
/// and rank them by GAIC with the given penalty. Candidates whose support
/// excludes some observation are skipped with a warning.
pub fn select_distribution(
    y: &[f64],
    candidates: &[Family],
    penalty: f64,
) -> Result<SelectionReport> {
    if y.is_empty() {
        return Err(Error::Data("select_distribution needs data".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite response values".into()));
    }
    let n = y.len() as f64;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &family in candidates {
        if !y.iter().all(|&v| family.support().contains(v)) {
            warnings.push(format!(
                "{family} skipped: observations outside its support"
            ));
            continue;
        }
        let (theta, loglik, converged) = fit_marginal(family, y);
        let df = family.n_params();
        let gdev = -2.0 * loglik;
        rows.push(SelectionRow {
            family,
            theta,
            loglik,
            gdev,
            gaic: gdev + penalty * df as f64,
            bic: gdev + n.ln() * df as f64,
            df,
            converged,
        });
    }
    rows.sort_by(|a, b| a.gaic.partial_cmp(&b.gaic).unwrap());
    Ok(SelectionReport { rows, warnings })
}

/// Intercept-only maximum likelihood for one family. Closed forms where
/// they exist, otherwise Nelder-Mead on log-transformed parameters with a
/// score-based Newton polish.
fn fit_marginal(family: Family, y: &[f64]) -> (ParamVector, f64, bool) {
    let n = y.len() as f64;
    let loglik = |theta: &ParamVector| -> f64 {
        y.iter()
            .map(|&v| log_pdf(family, v, theta).unwrap_or(f64::NEG_INFINITY))
            .sum()
    };
    match family {
        Family::Normal => {
            let m = crate::numeric::mean(y);
            let v = y.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let theta = ParamVector::two(m, v.sqrt().max(PARAM_FLOOR));
            let ll = loglik(&theta);
            (theta, ll, true)
        }
        Family::LogNormal => {
            let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
            let m = crate::numeric::mean(&logs);
            let v = logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let theta = ParamVector::two(m, v.sqrt().max(PARAM_FLOOR));
            let ll = loglik(&theta);
            (theta, ll, true)
        }
        Family::Gamma => {
            // Newton on the shape k: ln k - digamma(k) = ln(mean) - mean(ln y).
            let m = crate::numeric::mean(y);
            let mean_log = y.iter().map(|v| v.ln()).sum::<f64>() / n;
            let s = (m.ln() - mean_log).max(1e-12);
            let mut k = (3.0 - s + ((s - 3.0) * (s - 3.0) + 24.0 * s).sqrt()) / (12.0 * s);
            let mut converged = false;
            for _ in 0..50 {
                let g = k.ln() - digamma(k) - s;
                let h = 1.0 / k - trigamma(k);
                let step = g / h;
                k -= step;
                if k <= 0.0 {
                    k = (k + step).max(1e-6) * 0.5;
                }
                if step.abs() < 1e-12 * k.max(1.0) {
                    converged = true;
                    break;
                }
            }
            let theta = ParamVector::two(m, (1.0 / k.sqrt()).max(PARAM_FLOOR));
            let ll = loglik(&theta);
            (theta, ll, converged)
        }
        Family::Dagum => {
            // Start from median-based moment matching with nu = 1:
            // median = mu and q1/median = 3^{-1/sigma}.
            let med = crate::numeric::median(y);
            let mut sorted = y.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q1 = sorted[sorted.len() / 4].max(PARAM_FLOOR);
            let ratio = (med / q1).max(1.0 + 1e-6);
            let sigma0 = (3f64.ln() / ratio.ln()).clamp(0.5, 10.0);
            let x0 = [med.ln(), sigma0.ln(), 0.0];
            let neg_ll = |x: &[f64]| -> f64 {
                let theta = ParamVector::three(x[0].exp(), x[1].exp(), x[2].exp());
                -loglik(&theta)
            };
            let (x, _) = crate::numeric::nelder_mead(&x0, &[0.3, 0.3, 0.3], 800, 1e-12, neg_ll);
            let mut theta = ParamVector::three(x[0].exp(), x[1].exp(), x[2].exp());
            let converged = polish_marginal(family, y, &mut theta);
            let ll = loglik(&theta);
            (theta, ll, converged)
        }
    }
}

/// A few Newton steps on the log-parameter scale using the analytic score
/// with an outer-product curvature approximation.
fn polish_marginal(family: Family, y: &[f64], theta: &mut ParamVector) -> bool {
    let p = family.n_params();
    let loglik = |t: &ParamVector| -> f64 {
        y.iter()
            .map(|&v| log_pdf(family, v, t).unwrap_or(f64::NEG_INFINITY))
            .sum()
    };
    let mut current = loglik(theta);
    for _ in 0..30 {
        // Gradient and curvature on the log scale: d/d log(theta_k) = theta_k d/d theta_k.
        let mut grad = vec![0.0; p];
        let mut info = nalgebra::DMatrix::<f64>::zeros(p, p);
        for &v in y {
            let s = match score(family, v, theta) {
                Ok(s) => s,
                Err(_) => return false,
            };
            let g: Vec<f64> = (0..p)
                .map(|k| s.as_slice()[k] * theta.as_slice()[k])
                .collect();
            for a in 0..p {
                grad[a] += g[a];
                for b in 0..p {
                    info[(a, b)] += g[a] * g[b];
                }
            }
        }
        for a in 0..p {
            info[(a, a)] += 1e-8;
        }
        let gvec = nalgebra::DVector::from_vec(grad.clone());
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&gvec),
            None => return false,
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..20 {
            let trial_logs: Vec<f64> = (0..p)
                .map(|k| theta.as_slice()[k].ln() + scale * step[k])
                .collect();
            let trial =
                ParamVector::from_slice(&trial_logs.iter().map(|v| v.exp()).collect::<Vec<_>>());
            let ll = loglik(&trial);
            if ll > current {
                *theta = trial;
                current = ll;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            return true;
        }
        if grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < 1e-6 * y.len() as f64 {
            return true;
        }
    }
    true
}

/// Trigamma via the derivative recurrence and asymptotic series.
fn trigamma(x: f64) -> f64 {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSequence;
    use approx::assert_abs_diff_eq;

    fn theta_grid(family: Family) -> Vec<ParamVector> {
        match family {
            Family::Normal => vec![
                ParamVector::two(0.0, 1.0),
                ParamVector::two(100.0, 20.0),
                ParamVector::two(-3.0, 0.4),
            ],
            Family::LogNormal => vec![
                ParamVector::two(0.0, 1.0),
                ParamVector::two(7.0, 0.14),
                ParamVector::two(2.0, 0.8),
            ],
            Family::Gamma => vec![
                ParamVector::two(1.0, 1.0),
                ParamVector::two(5.0, 0.3),
                ParamVector::two(0.5, 1.4),
            ],
            Family::Dagum => vec![
                ParamVector::three(1.0, 2.0, 1.0),
                ParamVector::three(20.0, 3.4, 0.6),
                ParamVector::three(2.5, 4.5, 1.8),
            ],
        }
    }

    /// Composite Simpson integration of the density. Positive-support
    /// families are integrated in log space.
    fn integrate_density(family: Family, theta: &ParamVector) -> f64 {
        let lo = quantile(family, 1e-9, theta).unwrap();
        let hi = quantile(family, 1.0 - 1e-9, theta).unwrap();
        let n = 40_000usize;
        match family.support() {
            Support::Real => {
                let h = (hi - lo) / n as f64;
                let f = |y: f64| log_pdf(family, y, theta).unwrap().exp();
                let mut s = f(lo) + f(hi);
                for i in 1..n {
                    let y = lo + i as f64 * h;
                    s += f(y) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                s * h / 3.0
            }
            Support::Positive => {
                let (a, b) = (lo.ln(), hi.ln());
                let h = (b - a) / n as f64;
                let f = |t: f64| {
                    let y = t.exp();
                    log_pdf(family, y, theta).unwrap().exp() * y
                };
                let mut s = f(a) + f(b);
                for i in 1..n {
                    let t = a + i as f64 * h;
                    s += f(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                s * h / 3.0
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        for family in Family::ALL {
            for theta in theta_grid(family) {
                let mass = integrate_density(family, &theta);
                assert!(
                    (mass - 1.0).abs() < 1e-6,
                    "{family} {theta:?}: integral {mass}"
                );
            }
        }
    }

    #[test]
    fn known_log_density_values() {
        let v = log_pdf(Family::Normal, 0.0, &ParamVector::two(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, -0.918_938_533_204_672_8, epsilon = 1e-12);

        // At y = 1 the Log-Normal density reduces to the normal density
        // of log y = 0.
        let v = log_pdf(Family::LogNormal, 1.0, &ParamVector::two(0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, -0.918_938_533_204_672_8, epsilon = 1e-12);

        // Dagum closed form at (y, mu, sigma, nu) = (2, 1, 2, 1):
        // log(2/2) + 2 log 2 - 2 log 5.
        let v = log_pdf(Family::Dagum, 2.0, &ParamVector::three(1.0, 2.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, 2.0 * 2f64.ln() - 2.0 * 5f64.ln(), epsilon = 1e-12);

        // Gamma with sigma = 1 is Exponential(1/mu): f(y) = exp(-y/mu)/mu.
        let v = log_pdf(Family::Gamma, 3.0, &ParamVector::two(2.0, 1.0)).unwrap();
        assert_abs_diff_eq!(v, -3.0 / 2.0 - 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cdf_matches_integrated_density() {
        for family in Family::ALL {
            for theta in theta_grid(family) {
                for u in [0.1, 0.5, 0.9] {
                    let y = quantile(family, u, &theta).unwrap();
                    // Integrate the density from far below up to y.
                    let lo = quantile(family, 1e-9, &theta).unwrap();
                    let n = 20_000usize;
                    let integral = match family.support() {
                        Support::Real => {
                            let h = (y - lo) / n as f64;
                            let f = |x: f64| log_pdf(family, x, &theta).unwrap().exp();
                            let mut s = f(lo) + f(y);
                            for i in 1..n {
                                s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                            }
                            s * h / 3.0
                        }
                        Support::Positive => {
                            let (a, b) = (lo.ln(), y.ln());
                            let h = (b - a) / n as f64;
                            let f = |t: f64| {
                                let x = t.exp();
                                log_pdf(family, x, &theta).unwrap().exp() * x
                            };
                            let mut s = f(a) + f(b);
                            for i in 1..n {
                                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                            }
                            s * h / 3.0
                        }
                    };
                    let got = cdf(family, y, &theta).unwrap();
                    assert!(
                        (got - integral).abs() < 1e-6,
                        "{family} {theta:?} u={u}: cdf {got} vs integral {integral}"
                    );
                }
            }
        }
    }

    #[test]
    fn quantile_cdf_round_trip() {
        for family in Family::ALL {
            for theta in theta_grid(family) {
                for i in 1..100 {
                    let u = i as f64 / 100.0;
                    let y = quantile(family, u, &theta).unwrap();
                    let u2 = cdf(family, y, &theta).unwrap();
                    assert!(
                        (u2 - u).abs() < 1e-8,
                        "{family} {theta:?}: u {u} -> y {y} -> {u2}"
                    );
                    let y2 = quantile(family, u2, &theta).unwrap();
                    assert!(
                        (y2 - y).abs() <= 1e-8 * y.abs().max(1.0),
                        "{family} {theta:?}: y {y} vs {y2}"
                    );
                }
            }
        }
    }

    #[test]
    fn median_is_exp_mu_for_lognormal() {
        let theta = ParamVector::two(7.0, 0.14);
        let med = quantile(Family::LogNormal, 0.5, &theta).unwrap();
        assert_abs_diff_eq!(med, 7f64.exp(), epsilon = 1e-9 * 7f64.exp());
        assert_abs_diff_eq!(
            cdf(Family::LogNormal, 7f64.exp(), &theta).unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn score_matches_central_finite_differences() {
        for family in Family::ALL {
            for theta in theta_grid(family) {
                for u in [0.15, 0.5, 0.85] {
                    let y = quantile(family, u, &theta).unwrap();
                    let s = score(family, y, &theta).unwrap();
                    for k in 0..family.n_params() {
                        let h = 1e-6 * theta.as_slice()[k].abs().max(1.0);
                        let mut up = theta;
                        up.set(Param::from_index(k), theta.as_slice()[k] + h);
                        let mut dn = theta;
                        dn.set(Param::from_index(k), theta.as_slice()[k] - h);
                        let fd = (log_pdf(family, y, &up).unwrap()
                            - log_pdf(family, y, &dn).unwrap())
                            / (2.0 * h);
                        let got = s.as_slice()[k];
                        assert!(
                            (got - fd).abs() <= 1e-6 * got.abs().max(1.0),
                            "{family} {theta:?} param {k}: score {got} vs fd {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn score_known_special_points() {
        // Normal: d/d mu vanishes at y = mu.
        let s = score(Family::Normal, 5.0, &ParamVector::two(5.0, 2.0)).unwrap();
        assert_abs_diff_eq!(s.mu(), 0.0, epsilon = 1e-14);
        // Log-Normal: d/d sigma at y = exp(mu) is -1/sigma.
        let s = score(Family::LogNormal, 2f64.exp(), &ParamVector::two(2.0, 0.5)).unwrap();
        assert_abs_diff_eq!(s.sigma(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn normal_sample_mean_within_clt_band() {
        let mut rng = SeedSequence::new(7).stream(&[0]);
        let theta = ParamVector::two(100.0, 20.0);
        let ys = sample(Family::Normal, &theta, 100_000, &mut rng).unwrap();
        let m = crate::numeric::mean(&ys);
        assert!((m - 100.0).abs() < 0.4, "mean {m}");
    }

    fn ks_statistic(sorted: &[f64], family: Family, theta: &ParamVector) -> f64 {
        let n = sorted.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &y) in sorted.iter().enumerate() {
            let f = cdf(family, y, theta).unwrap();
            let hi = (i as f64 + 1.0) / n - f;
            let lo = f - i as f64 / n;
            d = d.max(hi.max(lo));
        }
        d
    }

    #[test]
    fn samples_pass_kolmogorov_smirnov() {
        // Critical value at alpha = 0.01 is 1.628 / sqrt(n) for large n.
        let n = 10_000usize;
        let crit = 1.628 / (n as f64).sqrt();
        for (i, family) in Family::ALL.into_iter().enumerate() {
            let theta = theta_grid(family)[1];
            let mut rng = SeedSequence::new(11).stream(&[i as u64]);
            let mut ys = sample(family, &theta, n, &mut rng).unwrap();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = ks_statistic(&ys, family, &theta);
            assert!(d < crit, "{family}: KS statistic {d} >= {crit}");
        }
    }

    #[test]
    fn gamma_sample_moments() {
        let mut rng = SeedSequence::new(3).stream(&[0]);
        let theta = ParamVector::two(5.0, 0.3);
        let ys = sample(Family::Gamma, &theta, 200_000, &mut rng).unwrap();
        let m = crate::numeric::moments(&ys);
        assert!((m.mean - 5.0).abs() < 0.02, "mean {}", m.mean);
        // Var = sigma^2 mu^2 = 2.25.
        assert!((m.variance - 2.25).abs() < 0.05, "var {}", m.variance);
    }

    #[test]
    fn dagum_mean_against_monte_carlo() {
        let theta = ParamVector::three(1.0, 3.4, 0.6);
        let exact = mean_of(Family::Dagum, &theta).unwrap();
        let mut rng = SeedSequence::new(5).stream(&[0]);
        let n = 1_000_000usize;
        let ys = sample(Family::Dagum, &theta, n, &mut rng).unwrap();
        let m = crate::numeric::mean(&ys);
        let sd = crate::numeric::sample_variance(&ys).sqrt();
        let band = 3.0 * sd / (n as f64).sqrt();
        assert!(
            (exact - m).abs() < band,
            "formula {exact} vs mc {m} (band {band})"
        );
    }

    #[test]
    fn dagum_mean_undefined_for_small_sigma() {
        let err = mean_of(Family::Dagum, &ParamVector::three(1.0, 1.0, 2.0)).unwrap_err();
        assert!(matches!(err, Error::MomentUndefined(_)));
        let err = mean_of(Family::Dagum, &ParamVector::three(1.0, 0.7, 2.0)).unwrap_err();
        assert!(matches!(err, Error::MomentUndefined(_)));
    }

    #[test]
    fn lognormal_mean_closed_form() {
        let theta = ParamVector::two(7.0, 0.14);
        assert_abs_diff_eq!(
            mean_of(Family::LogNormal, &theta).unwrap(),
            (7.0 + 0.5 * 0.14 * 0.14f64).exp(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn domain_violations_are_rejected() {
        assert!(log_pdf(Family::Normal, 0.0, &ParamVector::two(0.0, -1.0)).is_err());
        assert!(log_pdf(Family::LogNormal, -1.0, &ParamVector::two(0.0, 1.0)).is_err());
        assert!(log_pdf(Family::Dagum, 0.0, &ParamVector::three(1.0, 1.0, 1.0)).is_err());
        assert!(quantile(Family::Normal, 0.0, &ParamVector::two(0.0, 1.0)).is_err());
        assert!(log_pdf(Family::Gamma, 1.0, &ParamVector::three(1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn select_distribution_prefers_lognormal_on_lognormal_data() {
        let mut rng = SeedSequence::new(21).stream(&[0]);
        let theta = ParamVector::two(7.0, 0.14);
        let ys = sample(Family::LogNormal, &theta, 5_000, &mut rng).unwrap();
        let report = select_distribution(
            &ys,
            &[Family::Normal, Family::Gamma, Family::Dagum, Family::LogNormal],
            2.0,
        )
        .unwrap();
        assert_eq!(report.rows[0].family, Family::LogNormal);
        assert!(report.warnings.is_empty());
        // Fitted marginal parameters are close to the truth.
        let t = report.rows[0].theta;
        assert!((t.mu() - 7.0).abs() < 0.01);
        assert!((t.sigma() - 0.14).abs() < 0.01);
    }

    #[test]
    fn select_distribution_skips_positive_families_on_negative_data() {
        let ys = vec![-1.0, 0.5, 1.5, -0.2, 0.9, 2.0];
        let report =
            select_distribution(&ys, &[Family::Normal, Family::LogNormal, Family::Gamma], 2.0)
                .unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].family, Family::Normal);
        assert_eq!(report.warnings.len(), 2);
    }

    #[test]
    fn selection_rows_are_ranked_by_gaic() {
        let mut rng = SeedSequence::new(9).stream(&[0]);
        let ys = sample(Family::Gamma, &ParamVector::two(3.0, 0.5), 2_000, &mut rng).unwrap();
        let report = select_distribution(&ys, &[Family::Normal, Family::Gamma], 2.0).unwrap();
        for pair in report.rows.windows(2) {
            assert!(pair[0].gaic <= pair[1].gaic);
        }
        assert_eq!(report.rows[0].family, Family::Gamma);
    }

    #[test]
    fn trigamma_matches_difference_of_digamma() {
        for x in [0.3, 1.0, 2.5, 10.0] {
            let h = 1e-6;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!(
                (trigamma(x) - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "x = {x}"
            );
        }
    }
}
