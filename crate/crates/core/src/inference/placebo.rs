use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effects::{counterfactual, fit_metrics, CounterfactualFit, FitMetrics};
use crate::error::{invalid, Error, Result};
use crate::estimator::EstimatorSpec;
use crate::panel::Panel;
use crate::rng;

/// Fits `spec` on the pre-period of `panel` with the unit-derived seed and
/// returns the gap series and metrics.
pub fn run_unit(panel: &Panel, spec: &EstimatorSpec, master_seed: u64) -> Result<(CounterfactualFit, FitMetrics)> {
    let seed = rng::named_seed(master_seed, panel.treated_name());
    let model = spec.with_seed(seed).fit_pre(panel)?;
    let fit = counterfactual(panel, &model)?;
    let metrics = fit_metrics(&fit);
    Ok((fit, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRun {
    pub unit: String,
    pub fit: Option<CounterfactualFit>,
    pub metrics: Option<FitMetrics>,
    /// Set when this unit's run failed; the study carries on.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboStudy {
    pub main_unit: String,
    pub runs: Vec<PlaceboRun>,
}

/// Relabels each control as treated in turn (the real treated unit joins the
/// donor pool) and reruns the estimator. Seeds derive from the unit name, so
/// the outcome does not depend on control order.
pub fn run_placebos(panel: &Panel, spec: &EstimatorSpec, master_seed: u64) -> Result<PlaceboStudy> {
    if panel.n() < 2 {
        return Err(invalid("placebo study needs at least two controls"));
    }
    let runs = (0..panel.n())
        .into_par_iter()
        .map(|j| {
            let unit = panel.control_names()[j].clone();
            match panel.swap_treated(j).and_then(|p| run_unit(&p, spec, master_seed)) {
                Ok((fit, metrics)) => PlaceboRun {
                    unit,
                    fit: Some(fit),
                    metrics: Some(metrics),
                    error: None,
                },
                Err(e) => PlaceboRun {
                    unit,
                    fit: None,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(PlaceboStudy {
        main_unit: panel.treated_name().to_string(),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub unit: String,
    pub is_main: bool,
    pub pre_rmspe: f64,
    pub post_rmspe: f64,
    pub ratio_rmspe: Option<f64>,
    pub pre_mae: f64,
    pub post_mae: f64,
    pub ratio_mae: Option<f64>,
    pub avg_gap_post: f64,
    /// Pre-period RMSPE exceeds the multiplier times the main unit's.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Main unit and every successful placebo, by RMSPE ratio, descending.
    pub rows: Vec<RankRow>,
    pub exclusion_multiplier: f64,
    pub excluded: Vec<String>,
    pub failed: Vec<String>,
    /// 1-based rank of the main unit by RMSPE ratio among retained rows.
    pub main_rank_ratio: usize,
    /// 1-based rank of the main unit by |average post gap| among retained rows.
    pub main_rank_gap: usize,
    pub retained: usize,
}

impl RankReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "unit",
            "is_main",
            "pre_mae",
            "post_mae",
            "ratio_mae",
            "pre_rmspe",
            "post_rmspe",
            "ratio_rmspe",
            "avg_gap_post",
            "excluded",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.unit.clone(),
                r.is_main.to_string(),
                r.pre_mae.to_string(),
                r.post_mae.to_string(),
                opt(r.ratio_mae),
                r.pre_rmspe.to_string(),
                r.post_rmspe.to_string(),
                opt(r.ratio_rmspe),
                r.avg_gap_post.to_string(),
                r.excluded.to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<placebo csv>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Ranks the main unit against its placebos. Placebos whose pre-period RMSPE
/// exceeds `multiplier` times the main unit's are flagged and left out of
/// the ranks.
pub fn placebo_rank_report(study: &PlaceboStudy, main: &FitMetrics, multiplier: f64) -> RankReport {
    let row = |unit: &str, is_main: bool, m: &FitMetrics| RankRow {
        unit: unit.to_string(),
        is_main,
        pre_rmspe: m.pre_rmspe,
        post_rmspe: m.post_rmspe,
        ratio_rmspe: m.ratio_rmspe,
        pre_mae: m.pre_mae,
        post_mae: m.post_mae,
        ratio_mae: m.ratio_mae,
        avg_gap_post: m.avg_gap_post,
        excluded: !is_main && m.pre_rmspe > multiplier * main.pre_rmspe,
    };
    let mut rows = vec![row(&study.main_unit, true, main)];
    let mut failed = Vec::new();
    for run in &study.runs {
        match &run.metrics {
            Some(m) => rows.push(row(&run.unit, false, m)),
            None => failed.push(run.unit.clone()),
        }
    }
    let key = |r: &RankRow| r.ratio_rmspe.unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));

    let retained: Vec<&RankRow> = rows.iter().filter(|r| !r.excluded).collect();
    let main_rank_ratio = 1 + retained
        .iter()
        .filter(|r| !r.is_main && key(r) > main.ratio_rmspe.unwrap_or(f64::NEG_INFINITY))
        .count();
    let main_rank_gap = 1 + retained
        .iter()
        .filter(|r| !r.is_main && r.avg_gap_post.abs() > main.avg_gap_post.abs())
        .count();
    RankReport {
        excluded: rows.iter().filter(|r| r.excluded).map(|r| r.unit.clone()).collect(),
        retained: retained.len(),
        rows,
        exclusion_multiplier: multiplier,
        failed,
        main_rank_ratio,
        main_rank_gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::ScmOptions;

    fn metrics(pre: f64, post: f64, gap: f64) -> FitMetrics {
        FitMetrics {
            pre_rmspe: pre,
            pre_mae: pre,
            post_rmspe: post,
            post_mae: post,
            ratio_rmspe: Some(post / pre),
            ratio_mae: Some(post / pre),
            post_std: 1.0,
            avg_gap_pre: 0.0,
            avg_gap_post: gap,
        }
    }

    fn study(runs: Vec<(&str, Option<FitMetrics>)>) -> PlaceboStudy {
        PlaceboStudy {
            main_unit: "main".into(),
            runs: runs
                .into_iter()
                .map(|(u, m)| PlaceboRun {
                    unit: u.into(),
                    error: m.is_none().then(|| "failed".to_string()),
                    fit: None,
                    metrics: m,
                })
                .collect(),
        }
    }

    #[test]
    fn main_with_largest_gap_ranks_first() {
        let s = study(vec![("a", Some(metrics(1.0, 1.5, 0.3))), ("b", Some(metrics(1.5, 2.0, -0.5)))]);
        let r = placebo_rank_report(&s, &metrics(1.2, 9.0, 8.0), 2.0);
        assert_eq!(r.main_rank_gap, 1);
        assert_eq!(r.main_rank_ratio, 1);
        assert_eq!(r.rows.len(), 3);
        assert!(r.excluded.is_empty());
        assert!(r.rows[0].is_main);
    }

    #[test]
    fn poor_pre_fit_is_excluded_and_failures_listed() {
        let s = study(vec![
            ("good", Some(metrics(1.0, 30.0, 3.0))),
            ("noisy", Some(metrics(5.0, 60.0, 20.0))),
            ("broken", None),
        ]);
        let r = placebo_rank_report(&s, &metrics(2.0, 10.0, 9.0), 2.0);
        assert_eq!(r.excluded, vec!["noisy".to_string()]);
        assert_eq!(r.failed, vec!["broken".to_string()]);
        assert_eq!(r.main_rank_ratio, 2);
        assert_eq!(r.main_rank_gap, 1);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn placebos_do_not_depend_on_control_order() {
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|j| (0..30).map(|t| ((t * (j + 2)) as f64 * 0.37).sin() + j as f64).collect())
            .collect();
        let y: Vec<f64> = (0..30).map(|t| 0.5 * cols[0][t] + 0.5 * cols[2][t]).collect();
        let panel = Panel::from_columns(y, cols, 24).unwrap();
        let spec = EstimatorSpec::Scm(ScmOptions::default());
        let a = run_placebos(&panel, &spec, 9).unwrap();
        let b = run_placebos(&panel.reorder_controls(&[3, 1, 0, 2]).unwrap(), &spec, 9).unwrap();
        for run in &a.runs {
            let other = b.runs.iter().find(|r| r.unit == run.unit).unwrap();
            let (x, y) = (run.metrics.as_ref().unwrap(), other.metrics.as_ref().unwrap());
            assert!((x.avg_gap_post - y.avg_gap_post).abs() < 1e-6);
            assert!((x.pre_rmspe - y.pre_rmspe).abs() < 1e-6);
        }
    }

    #[test]
    fn needs_two_controls() {
        let panel = Panel::from_columns(vec![1.0; 6], vec![vec![0.0; 6]], 4).unwrap();
        assert!(run_placebos(&panel, &EstimatorSpec::Scm(ScmOptions::default()), 0).is_err());
    }
}
