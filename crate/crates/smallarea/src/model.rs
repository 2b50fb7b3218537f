//! Data containers and model specification.
//!
//! A [`Dataset`] is a columnar table of units: an area label per unit, an
//! optional response, optional unit identifiers, and named covariates that
//! are either numeric or categorical. A [`ModelSpec`] names the response
//! family and, for each distribution parameter, the covariate terms, the
//! link, and whether the parameter carries an area random intercept.
//! [`build_design`] turns the pair into per-parameter design matrices with
//! a contiguous area index.

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dist::{Family, Link, Param};
use crate::error::{Error, Result};

/// Whether a dataset is an observed sample or a population frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sample,
    Population,
}

/// One covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A unit-level dataset in columnar form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    role: Role,
    area: Vec<String>,
    unit: Option<Vec<String>>,
    y: Vec<Option<f64>>,
    covariates: IndexMap<String, Column>,
}

impl Dataset {
    /// Build a dataset from parallel columns. Sample datasets must carry a
    /// response for every unit; population datasets may omit any or all.
    pub fn from_columns(
        role: Role,
        area: Vec<String>,
        unit: Option<Vec<String>>,
        y: Vec<Option<f64>>,
        covariates: IndexMap<String, Column>,
    ) -> Result<Dataset> {
        let n = area.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if y.len() != n {
            return Err(Error::Data(format!(
                "response length {} does not match {} rows",
                y.len(),
                n
            )));
        }
        if let Some(u) = &unit {
            if u.len() != n {
                return Err(Error::Data(format!(
                    "unit id length {} does not match {} rows",
                    u.len(),
                    n
                )));
            }
        }
        for (name, col) in &covariates {
            if col.len() != n {
                return Err(Error::Data(format!(
                    "covariate '{name}' has {} values for {} rows",
                    col.len(),
                    n
                )));
            }
            if let Column::Numeric(v) = col {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Data(format!(
                        "covariate '{name}' is not finite at row {i}"
                    )));
                }
            }
        }
        if role == Role::Sample {
            let missing: Vec<usize> = y
                .iter()
                .enumerate()
                .filter_map(|(i, v)| if v.is_none() { Some(i) } else { None })
                .take(5)
                .collect();
            if !missing.is_empty() {
                return Err(Error::Data(format!(
                    "sample rows must have a response; missing at rows {missing:?}"
                )));
            }
        }
        if let Some(i) = y.iter().position(|v| v.map_or(false, |x| !x.is_finite())) {
            return Err(Error::Data(format!("response is not finite at row {i}")));
        }
        Ok(Dataset {
            role,
            area,
            unit,
            y,
            covariates,
        })
    }

    /// The same rows with a replacement response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Dataset> {
        if y.len() != self.n_units() {
            return Err(Error::Data(format!(
                "replacement response has {} values for {} rows",
                y.len(),
                self.n_units()
            )));
        }
        Dataset::from_columns(
            self.role,
            self.area.clone(),
            self.unit.clone(),
            y.into_iter().map(Some).collect(),
            self.covariates.clone(),
        )
    }

    /// The listed rows as a new dataset with the given role; all
    /// columns, categorical ones included, come along.
    pub fn subset(&self, rows: &[usize], role: Role) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n_units()) {
            return Err(Error::Data(format!(
                "subset row {bad} is out of range for {} rows",
                self.n_units()
            )));
        }
        let covariates = self
            .covariates
            .iter()
            .map(|(name, col)| {
                let taken = match col {
                    Column::Numeric(v) => {
                        Column::Numeric(rows.iter().map(|&i| v[i]).collect())
                    }
                    Column::Categorical(v) => {
                        Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
                    }
                };
                (name.clone(), taken)
            })
            .collect();
        Dataset::from_columns(
            role,
            rows.iter().map(|&i| self.area[i].clone()).collect(),
            self.unit
                .as_ref()
                .map(|u| rows.iter().map(|&i| u[i].clone()).collect()),
            rows.iter().map(|&i| self.y[i]).collect(),
            covariates,
        )
    }

    pub fn builder(role: Role) -> DatasetBuilder {
        DatasetBuilder {
            role,
            area: Vec::new(),
            unit: Vec::new(),
            has_unit: false,
            y: Vec::new(),
            numeric: IndexMap::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_units(&self) -> usize {
        self.area.len()
    }

    pub fn area_labels(&self) -> &[String] {
        &self.area
    }

    pub fn unit_ids(&self) -> Option<&[String]> {
        self.unit.as_deref()
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    /// Responses of a sample dataset, which are guaranteed present.
    pub fn y_observed(&self) -> Vec<f64> {
        self.y.iter().map(|v| v.expect("response present")).collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&Column> {
        self.covariates.get(name)
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.keys().map(|s| s.as_str())
    }

    /// Distinct area labels in sorted order.
    pub fn distinct_areas(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.area.to_vec();
        labels.sort();
        labels.dedup();
        labels
    }
}

/// Row-wise construction convenience for tests, examples and simulation.
pub struct DatasetBuilder {
    role: Role,
    area: Vec<String>,
    unit: Vec<String>,
    has_unit: bool,
    y: Vec<Option<f64>>,
    numeric: IndexMap<String, Vec<f64>>,
}

impl DatasetBuilder {
    /// Append one unit. Covariates must be the same set in every call.
    pub fn push(&mut self, area: &str, y: Option<f64>, covariates: &[(&str, f64)]) -> &mut Self {
        self.area.push(area.to_string());
        self.y.push(y);
        for (name, value) in covariates {
            self.numeric
                .entry(name.to_string())
                .or_default()
                .push(*value);
        }
        self
    }

    /// Append one unit with an explicit unit identifier.
    pub fn push_with_id(
        &mut self,
        area: &str,
        unit: &str,
        y: Option<f64>,
        covariates: &[(&str, f64)],
    ) -> &mut Self {
        self.has_unit = true;
        self.unit.push(unit.to_string());
        self.push(area, y, covariates)
    }

    pub fn build(self) -> Result<Dataset> {
        let covariates = self
            .numeric
            .into_iter()
            .map(|(k, v)| (k, Column::Numeric(v)))
            .collect();
        let unit = if self.has_unit { Some(self.unit) } else { None };
        Dataset::from_columns(self.role, self.area, unit, self.y, covariates)
    }
}

/// Specification of one distribution parameter's predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    /// Covariate names, expanded in order after the intercept.
    pub terms: Vec<String>,
    /// Link between the natural parameter and the linear predictor.
    pub link: Link,
    /// Whether this parameter carries an area random intercept.
    pub random_intercept: bool,
}

impl ParamSpec {
    pub fn intercept_only(link: Link) -> ParamSpec {
        ParamSpec {
            terms: Vec::new(),
            link,
            random_intercept: false,
        }
    }
}

/// Full model specification: a family plus one [`ParamSpec`] per
/// distribution parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub params: Vec<ParamSpec>,
}

impl ModelSpec {
    /// Intercept-only model with default links and no random intercepts.
    pub fn new(family: Family) -> ModelSpec {
        let params = family
            .params()
            .iter()
            .map(|&p| ParamSpec::intercept_only(family.default_link(p)))
            .collect();
        ModelSpec { family, params }
    }

    /// Replace the spec of one parameter, given by slot.
    pub fn with_param(mut self, param: Param, spec: ParamSpec) -> ModelSpec {
        assert!(
            param.index() < self.params.len(),
            "{} has no parameter {param}",
            self.family
        );
        self.params[param.index()] = spec;
        self
    }

    /// Convenience: terms plus random intercept for one parameter,
    /// keeping the default link.
    pub fn with_terms(self, param: Param, terms: &[&str], random_intercept: bool) -> ModelSpec {
        let link = self.family.default_link(param);
        self.with_param(
            param,
            ParamSpec {
                terms: terms.iter().map(|s| s.to_string()).collect(),
                link,
                random_intercept,
            },
        )
    }

    pub fn param(&self, param: Param) -> &ParamSpec {
        &self.params[param.index()]
    }

    /// Parameters that carry a random intercept.
    pub fn random_params(&self) -> Vec<Param> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, s)| s.random_intercept)
            .map(|(i, _)| Param::from_index(i))
            .collect()
    }
}

/// Design matrices and area indexing shared by the fitting routines.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    /// One design matrix per distribution parameter, intercept first.
    pub x: Vec<DMatrix<f64>>,
    /// Column names per parameter, aligned with `x`.
    pub col_names: Vec<Vec<String>>,
    /// For each unit, the 0-based index of its area.
    pub area_index: Vec<usize>,
    /// Sorted distinct area labels; `area_index` points into this.
    pub area_labels: Vec<String>,
}

impl DesignBundle {
    pub fn n_units(&self) -> usize {
        self.area_index.len()
    }

    pub fn n_areas(&self) -> usize {
        self.area_labels.len()
    }

    /// Units per area.
    pub fn area_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_areas()];
        for &j in &self.area_index {
            sizes[j] += 1;
        }
        sizes
    }
}

/// Validate a spec against a dataset and collect non-fatal warnings:
/// areas with a single sampled unit, categorical levels seen fewer than
/// twice, and random intercepts requested on parameters the family
/// does not have.
pub fn validate_spec(data: &Dataset, spec: &ModelSpec) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut counts: IndexMap<&str, usize> = IndexMap::new();
    for a in data.area_labels() {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    for (area, n) in counts {
        if n == 1 {
            warnings.push(format!("area '{area}' has a single unit"));
        }
    }
    for ps in &spec.params {
        for term in &ps.terms {
            if let Some(Column::Categorical(values)) = data.covariate(term) {
                let mut level_counts: IndexMap<&str, usize> = IndexMap::new();
                for v in values {
                    *level_counts.entry(v.as_str()).or_default() += 1;
                }
                for (level, n) in level_counts {
                    if n < 2 {
                        warnings.push(format!(
                            "categorical '{term}' level '{level}' appears only {n} time"
                        ));
                    }
                }
            }
        }
    }
    warnings
}

/// Expand a spec into design matrices. The intercept column comes first,
/// then the listed terms in order; categorical covariates become
/// treatment-coded indicators with the lexicographically first level as
/// the reference. Each matrix is checked for full column rank.
pub fn build_design(data: &Dataset, spec: &ModelSpec) -> Result<DesignBundle> {
    if spec.params.len() != spec.family.n_params() {
        return Err(Error::Spec(format!(
            "{} takes {} parameters but the spec lists {}",
            spec.family,
            spec.family.n_params(),
            spec.params.len()
        )));
    }
    let n = data.n_units();
    let area_labels = data.distinct_areas();
    let area_pos: IndexMap<&str, usize> = area_labels
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let area_index: Vec<usize> = data
        .area_labels()
        .iter()
        .map(|a| area_pos[a.as_str()])
        .collect();

    let mut x = Vec::with_capacity(spec.params.len());
    let mut col_names = Vec::with_capacity(spec.params.len());
    for (pi, ps) in spec.params.iter().enumerate() {
        let param = Param::from_index(pi);
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        let mut names: Vec<String> = vec!["(intercept)".to_string()];
        for term in &ps.terms {
            match data.covariate(term) {
                None => {
                    return Err(Error::Spec(format!(
                        "parameter {param}: unknown covariate '{term}'"
                    )))
                }
                Some(Column::Numeric(values)) => {
                    cols.push(values.clone());
                    names.push(term.clone());
                }
                Some(Column::Categorical(values)) => {
                    let mut levels: Vec<&str> = values.iter().map(|s| s.as_str()).collect();
                    levels.sort();
                    levels.dedup();
                    // First level is the reference.
                    for level in levels.iter().skip(1) {
                        cols.push(
                            values
                                .iter()
                                .map(|v| if v == level { 1.0 } else { 0.0 })
                                .collect(),
                        );
                        names.push(format!("{term}={level}"));
                    }
                }
            }
        }
        let p = cols.len();
        let mat = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
        check_rank(&mat, &names, param)?;
        x.push(mat);
        col_names.push(names);
    }
    Ok(DesignBundle {
        x,
        col_names,
        area_index,
        area_labels,
    })
}

/// Reject rank-deficient designs, naming the columns involved.
fn check_rank(x: &DMatrix<f64>, names: &[String], param: Param) -> Result<()> {
    let p = x.ncols();
    let xtx = x.transpose() * x;
    // Scale to a correlation-like matrix so the tolerance is size-free.
    let mut scaled = xtx.clone();
    let norms: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt().max(1e-300)).collect();
    for i in 0..p {
        for j in 0..p {
            scaled[(i, j)] /= norms[i] * norms[j];
        }
    }
    let eig = scaled.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < 1e-10 {
        // Identify the offending combination from the eigenvector of the
        // smallest eigenvalue.
        let (idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let v = eig.eigenvectors.column(idx);
        let involved: Vec<&str> = (0..p)
            .filter(|&j| v[j].abs() > 1e-4)
            .map(|j| names[j].as_str())
            .collect();
        return Err(Error::Rank(format!(
            "parameter {param}: columns {involved:?} are collinear"
        )));
    }
    Ok(())
}
