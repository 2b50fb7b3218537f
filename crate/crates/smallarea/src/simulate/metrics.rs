//! Performance measures aggregated over areas and replicates.
//!
//! All nine measures compare `J x T` arrays of true values, estimates,
//! and estimated MSEs. Relative measures divide by a per-area true
//! value; when the truth varies across replicates (populations are
//! regenerated), the replicate mean plays that role, which reduces to
//! the fixed value when the truth is fixed. Per-term ratios that come
//! out non-finite (an estimate of exactly zero, a zero MSE in a
//! denominator) are dropped from their average and counted, so one
//! degenerate replicate cannot poison a whole metric.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal critical value for the nominal 95% coverage rate.
const Z_95: f64 = 1.96;

/// One estimator's `J x T` simulation traces.
#[derive(Debug, Clone)]
pub struct EstimatorTraces {
    /// True functional per area and replicate.
    pub truth: Vec<Vec<f64>>,
    /// Estimates per area and replicate.
    pub estimate: Vec<Vec<f64>>,
    /// Estimated MSE per area and replicate.
    pub mse: Vec<Vec<f64>>,
}

impl EstimatorTraces {
    fn check(&self, what: &str) -> Result<(usize, usize)> {
        let j = self.truth.len();
        if j == 0 {
            return Err(Error::Config(format!("{what}: no areas")));
        }
        let t = self.truth[0].len();
        if t == 0 {
            return Err(Error::Config(format!("{what}: no replicates")));
        }
        for arr in [&self.truth, &self.estimate, &self.mse] {
            if arr.len() != j || arr.iter().any(|row| row.len() != t) {
                return Err(Error::Config(format!(
                    "{what}: traces are not aligned {j} x {t} arrays"
                )));
            }
        }
        Ok((j, t))
    }
}

/// The nine averaged measures for one estimator. `ACVR` and `AEFF`
/// compare against the direct estimator and are absent when there is
/// nothing to compare with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct MetricBlock {
    pub arb: f64,
    pub aarb: f64,
    pub acv: f64,
    pub arrmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acvr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aeff: Option<f64>,
    pub atmse: f64,
    pub abmse: f64,
    pub pcr: f64,
    /// Non-finite per-term ratios dropped from the averages.
    #[serde(rename = "dropped_terms")]
    pub dropped_terms: usize,
}

/// Mean of the finite entries; counts the dropped rest.
pub(crate) fn finite_mean(values: impl Iterator<Item = f64>, dropped: &mut usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            *dropped += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `(1/J) sum_j inner(j)`, dropping areas whose inner value came out
/// non-finite.
fn mean_over_areas(
    j_areas: usize,
    mut inner: impl FnMut(usize, &mut usize) -> f64,
    dropped: &mut usize,
) -> f64 {
    let mut vals = Vec::with_capacity(j_areas);
    for j in 0..j_areas {
        vals.push(inner(j, dropped));
    }
    finite_mean(vals.into_iter(), dropped)
}

/// The nine §-style measures for one estimator's traces; `direct`
/// supplies the comparator traces for `ACVR`/`AEFF`.
pub fn compute_metrics(
    traces: &EstimatorTraces,
    direct: Option<&EstimatorTraces>,
) -> Result<MetricBlock> {
    let (j_areas, t_reps) = traces.check("estimator")?;
    if let Some(d) = direct {
        let (jd, td) = d.check("direct comparator")?;
        if (jd, td) != (j_areas, t_reps) {
            return Err(Error::Config(format!(
                "direct comparator traces are {jd} x {td}, estimator traces {j_areas} x {t_reps}"
            )));
        }
    }
    let mut dropped = 0usize;

    // Per-area true values; the replicate mean when truth varies.
    let h_bar: Vec<f64> = traces
        .truth
        .iter()
        .map(|row| row.iter().sum::<f64>() / t_reps as f64)
        .collect();
    if let Some(j) = h_bar.iter().position(|h| *h == 0.0) {
        return Err(Error::Domain(format!(
            "area {j} has a zero true value; relative measures are undefined"
        )));
    }

    let mut arb = 0.0;
    let mut aarb = 0.0;
    for j in 0..j_areas {
        let est_bar = traces.estimate[j].iter().sum::<f64>() / t_reps as f64;
        let rb = est_bar / h_bar[j] - 1.0;
        arb += rb;
        aarb += rb.abs();
    }
    arb *= 100.0 / j_areas as f64;
    aarb *= 100.0 / j_areas as f64;

    let acv = 100.0
        * mean_over_areas(
            j_areas,
            |j, d| {
                finite_mean(
                    (0..t_reps).map(|t| traces.mse[j][t].sqrt() / traces.estimate[j][t]),
                    d,
                )
            },
            &mut dropped,
        );
    let arrmse = 100.0
        * mean_over_areas(
            j_areas,
            |j, d| {
                finite_mean(
                    (0..t_reps).map(|t| {
                        traces.mse[j][t] / (traces.estimate[j][t] * traces.estimate[j][t])
                    }),
                    d,
                )
                .sqrt()
            },
            &mut dropped,
        );

    let (acvr, aeff) = if let Some(dir) = direct {
        let acvr = 100.0
            * mean_over_areas(
                j_areas,
                |j, d| {
                    finite_mean(
                        (0..t_reps).map(|t| {
                            let cv_mb = traces.mse[j][t].sqrt() / traces.estimate[j][t];
                            let cv_dir = dir.mse[j][t].sqrt() / dir.estimate[j][t];
                            1.0 - cv_mb / cv_dir
                        }),
                        d,
                    )
                },
                &mut dropped,
            );
        let aeff = 100.0
            * mean_over_areas(
                j_areas,
                |j, d| {
                    finite_mean((0..t_reps).map(|t| dir.mse[j][t] / traces.mse[j][t]), d)
                        .sqrt()
                },
                &mut dropped,
            );
        (Some(acvr), Some(aeff))
    } else {
        (None, None)
    };

    let atmse = mean_over_areas(
        j_areas,
        |j, d| {
            finite_mean(
                (0..t_reps).map(|t| {
                    let err = traces.estimate[j][t] - traces.truth[j][t];
                    err * err
                }),
                d,
            )
        },
        &mut dropped,
    );
    let abmse = mean_over_areas(
        j_areas,
        |j, d| finite_mean(traces.mse[j].iter().copied(), d),
        &mut dropped,
    );
    let pcr = 100.0
        * mean_over_areas(
            j_areas,
            |j, d| {
                finite_mean(
                    (0..t_reps).map(|t| {
                        let err = traces.estimate[j][t] - traces.truth[j][t];
                        let half_width = Z_95 * traces.mse[j][t].sqrt();
                        if half_width.is_finite() && err.is_finite() {
                            (err.abs() <= half_width) as usize as f64
                        } else {
                            f64::NAN
                        }
                    }),
                    d,
                )
            },
            &mut dropped,
        );

    Ok(MetricBlock {
        arb,
        aarb,
        acv,
        arrmse,
        acvr,
        aeff,
        atmse,
        abmse,
        pcr,
        dropped_terms: dropped,
    })
}

/// One `(estimator, area, replicate)` cell of the simulation, the unit
/// of the emitted trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub estimator: String,
    pub area: String,
    pub replicate: usize,
    pub h_true: f64,
    pub h_hat: f64,
    pub mse_hat: f64,
}

/// Per-area summary of one estimator, averaged over replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaSummary {
    pub estimator: String,
    pub area: String,
    pub n_j: usize,
    /// Mean relative bias in percent.
    pub rb_pct: f64,
    /// Mean estimated coefficient of variation in percent.
    pub cv_pct: f64,
    /// Empirical MSE over replicates.
    pub true_mse: f64,
    /// Mean bootstrap MSE estimate.
    pub boot_mse: f64,
}

/// Echo of the configuration a report was produced under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scenario: String,
    pub functional: String,
    pub n_total: usize,
    pub j: usize,
    pub t_requested: usize,
    /// Replicates every estimator completed; metrics are over these.
    pub t_effective: usize,
    pub b: usize,
    pub l: usize,
    pub seed: u64,
    pub estimators: Vec<String>,
    /// Per-area sample allocation, in sorted area-label order.
    pub allocation: Vec<usize>,
}

/// Everything a simulation run produces: the metric blocks, per-area
/// summaries, raw traces, and enough configuration echo to re-run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ConfigEcho,
    /// Metric block per estimator name.
    pub metrics: IndexMap<String, MetricBlock>,
    pub area_summaries: Vec<AreaSummary>,
    /// Failed replicate count per estimator.
    pub failures: IndexMap<String, usize>,
    pub warnings: Vec<String>,
    /// Raw per-replicate traces; kept out of the JSON summary, emitted
    /// as CSV instead.
    #[serde(skip)]
    pub traces: Vec<TraceRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SimulationReport {
    /// The metric summary as pretty JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The per-replicate traces as CSV, one row per
    /// `(estimator, area, replicate)`.
    pub fn traces_csv(&self) -> String {
        let mut out = String::from("estimator,area,replicate,h_true,h_hat,mse_hat\n");
        for r in &self.traces {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&r.estimator),
                csv_field(&r.area),
                r.replicate,
                r.h_true,
                r.h_hat,
                r.mse_hat
            ));
        }
        out
    }

    /// The per-area summaries as CSV.
    pub fn areas_csv(&self) -> String {
        let mut out = String::from("estimator,area,n_j,rb_pct,cv_pct,true_mse,boot_mse\n");
        for a in &self.area_summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&a.estimator),
                csv_field(&a.area),
                a.n_j,
                a.rb_pct,
                a.cv_pct,
                a.true_mse,
                a.boot_mse
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64, j: usize, t: usize) -> Vec<Vec<f64>> {
        vec![vec![v; t]; j]
    }

    #[test]
    fn hand_computed_single_cell() {
        // One area, one replicate, H = 100, estimate 110, mse 25.
        let tr = EstimatorTraces {
            truth: flat(100.0, 1, 1),
            estimate: flat(110.0, 1, 1),
            mse: flat(25.0, 1, 1),
        };
        let m = compute_metrics(&tr, None).unwrap();
        assert!((m.arb - 10.0).abs() < 1e-12);
        assert!((m.aarb - 10.0).abs() < 1e-12);
        assert!((m.acv - 100.0 * 5.0 / 110.0).abs() < 1e-12);
        assert!((m.arrmse - 100.0 * 5.0 / 110.0).abs() < 1e-12);
        assert!((m.atmse - 100.0).abs() < 1e-12);
        assert!((m.abmse - 25.0).abs() < 1e-12);
        // |110 - 100| = 10 > 1.96 * 5 = 9.8: outside the interval.
        assert_eq!(m.pcr, 0.0);
        assert!(m.acvr.is_none() && m.aeff.is_none());
    }

    #[test]
    fn hand_computed_two_by_two() {
        let tr = EstimatorTraces {
            truth: vec![vec![50.0, 50.0], vec![200.0, 200.0]],
            estimate: vec![vec![55.0, 45.0], vec![190.0, 210.0]],
            mse: vec![vec![16.0, 16.0], vec![100.0, 400.0]],
        };
        let m = compute_metrics(&tr, None).unwrap();
        // Mean estimates equal the truth in both areas.
        assert!(m.arb.abs() < 1e-12);
        assert!(m.aarb.abs() < 1e-12);
        let acv = 100.0 * 0.5
            * ((4.0 / 55.0 + 4.0 / 45.0) / 2.0 + (10.0 / 190.0 + 20.0 / 210.0) / 2.0);
        assert!((m.acv - acv).abs() < 1e-10);
        let atmse = (25.0 + 25.0 + 100.0 + 100.0) / 4.0;
        assert!((m.atmse - atmse).abs() < 1e-12);
        let abmse = (16.0 + 16.0 + 100.0 + 400.0) / 4.0;
        assert!((m.abmse - abmse).abs() < 1e-12);
        // Errors 5, 5, 10, 10 against 1.96 * rmse 7.84, 7.84, 19.6, 39.2.
        assert!((m.pcr - 100.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_estimates_give_zero_bias_full_coverage() {
        let tr = EstimatorTraces {
            truth: flat(80.0, 3, 4),
            estimate: flat(80.0, 3, 4),
            mse: flat(0.0, 3, 4),
        };
        let m = compute_metrics(&tr, None).unwrap();
        assert_eq!(m.arb, 0.0);
        assert_eq!(m.aarb, 0.0);
        assert_eq!(m.pcr, 100.0);
        assert_eq!(m.atmse, 0.0);
    }

    #[test]
    fn identical_mses_give_consistent_comparators() {
        // Same MSE and estimates for the model-based and the direct
        // estimator: no CV reduction, efficiency 100.
        let tr = EstimatorTraces {
            truth: flat(100.0, 2, 3),
            estimate: flat(95.0, 2, 3),
            mse: flat(9.0, 2, 3),
        };
        let m = compute_metrics(&tr, Some(&tr)).unwrap();
        assert!(m.acvr.unwrap().abs() < 1e-12);
        assert!((m.aeff.unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_is_a_domain_error() {
        let tr = EstimatorTraces {
            truth: flat(0.0, 1, 2),
            estimate: flat(1.0, 1, 2),
            mse: flat(1.0, 1, 2),
        };
        assert!(matches!(compute_metrics(&tr, None), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_ratio_terms_are_dropped_and_counted() {
        // One replicate has a zero estimate: its CV term is infinite
        // and must not contaminate the average.
        let tr = EstimatorTraces {
            truth: flat(10.0, 1, 2),
            estimate: vec![vec![10.0, 0.0]],
            mse: flat(4.0, 1, 2),
        };
        let m = compute_metrics(&tr, None).unwrap();
        assert!((m.acv - 100.0 * 2.0 / 10.0).abs() < 1e-12);
        assert!(m.dropped_terms > 0);
        assert!(m.atmse.is_finite());
    }

    #[test]
    fn misaligned_traces_rejected() {
        let tr = EstimatorTraces {
            truth: flat(1.0, 2, 3),
            estimate: flat(1.0, 2, 2),
            mse: flat(1.0, 2, 3),
        };
        assert!(compute_metrics(&tr, None).is_err());
    }

    #[test]
    fn csv_escapes_delimiters() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("q\"q"), "\"q\"\"q\"");
    }
}
