use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use serde::Serialize;
use serde_json::json;

use synthforest::effects::{counterfactual, effect_report, fit_metrics, fit_metrics_on, FitMetrics};
use synthforest::forest::tune_mtry;
use synthforest::inference::{
    conformal_test, placebo_rank_report, placebo_specification_test, run_placebos, run_unit,
};
use synthforest::panel::{
    aggregate_weekly, build_panel, build_panel_with_controls, ingest_csv, read_panel_csv, split_range, summarize,
    write_panel_csv, write_series_csv, UnitSummary, WeeklyOptions,
};
use synthforest::rng::named_seed;
use synthforest::sim::simulate as simulate_panel;
use synthforest::solvers::{default_enet_grid, tune_enet};
use synthforest::{EstimatorSpec, FittedModel, Panel, SplitSpec};

use crate::config::{EstimatorKind, RunConfig};
use crate::UsageError;

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(path)?, value).with_context(|| format!("writing {}", path.display()))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn file_stem(unit: &str) -> String {
    unit.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn ingest(cfg: &RunConfig, summary: bool) -> Result<()> {
    let ing = &cfg.ingest;
    let input = ing.input.as_ref().ok_or_else(|| usage("ingest needs --input"))?;
    let raw = ingest_csv(input, &ing.schema)?;
    let series = aggregate_weekly(
        &raw,
        &WeeklyOptions {
            start: ing.start,
            end: ing.end,
            merge: ing.merge.clone(),
            trailing: ing.trailing_week,
        },
    )?;
    let out = cfg.output_dir.join("panel.csv");
    write_series_csv(&series, create(&out)?)?;
    println!(
        "read {} rows; wrote {} weeks x {} units to {}",
        raw.rows_read(),
        series.len(),
        series.units.len(),
        out.display()
    );
    if summary {
        let rows: Vec<UnitSummary> = series.units.iter().map(|(n, v)| summarize(n, v)).collect();
        print_summary(&rows);
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|s| {
                vec![
                    s.unit.clone(),
                    s.mean.to_string(),
                    s.sd.to_string(),
                    s.min.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.max.to_string(),
                ]
            })
            .collect();
        write_rows(
            &cfg.output_dir.join("summary.csv"),
            &["unit", "mean", "sd", "min", "q1", "median", "q3", "max"],
            &table,
        )?;
    }
    Ok(())
}

fn print_summary(rows: &[UnitSummary]) {
    println!(
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "unit", "mean", "sd", "min", "Q1", "median", "Q3", "max"
    );
    for s in rows {
        println!(
            "{:<22} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            s.unit, s.mean, s.sd, s.min, s.q1, s.median, s.q3, s.max
        );
    }
}

/// Reads the panel CSV and resolves the treated unit, controls and onset.
fn load_panel(cfg: &RunConfig) -> Result<Panel> {
    let p = &cfg.panel;
    let path = p.path.as_ref().ok_or_else(|| usage("no panel given (--panel)"))?;
    let series = read_panel_csv(path)?;
    let treated = match &p.treated {
        Some(t) => t.clone(),
        None if series.get("treated").is_some() => "treated".to_string(),
        None => return Err(usage("no treated unit given (--treated)")),
    };
    let t0_text = p.t0.as_ref().ok_or_else(|| usage("no onset given (--t0)"))?;
    let t0 = match NaiveDate::parse_from_str(t0_text, "%Y-%m-%d") {
        Ok(date) => series.onset_index(date),
        Err(_) => t0_text
            .parse::<usize>()
            .map_err(|_| usage(format!("--t0 {t0_text:?} is neither a date nor a period index")))?,
    };
    let panel = if p.controls.is_empty() {
        build_panel(&series, &treated, t0)?
    } else {
        build_panel_with_controls(&series, &treated, &p.controls, t0)?
    };
    Ok(panel)
}

/// Estimator spec for `kind`, with hyperparameters tuned on the
/// pre-period of `panel` where requested. Returns the tuning log as JSON.
fn resolve_spec(cfg: &RunConfig, kind: EstimatorKind, panel: &Panel) -> Result<(EstimatorSpec, serde_json::Value)> {
    let split = cfg.tuning.split;
    Ok(match kind {
        EstimatorKind::Forest if cfg.tuning.enabled => {
            let grid: Vec<usize> = if cfg.tuning.mtry_grid.is_empty() {
                (1..=panel.n()).collect()
            } else {
                cfg.tuning.mtry_grid.clone()
            };
            let base = synthforest::ForestConfig {
                seed: named_seed(cfg.seed, panel.treated_name()),
                ..cfg.forest.clone()
            };
            let tuning = tune_mtry(panel, split, &base, &grid)?;
            for (m, score) in &tuning.scores {
                println!("tune mtry = {m:>3}: validation RMSPE {score:.4}");
            }
            let chosen = tuning.config.mtry;
            (
                EstimatorSpec::Forest(synthforest::ForestConfig {
                    mtry: chosen,
                    ..cfg.forest.clone()
                }),
                json!({ "parameter": "mtry", "split": split, "chosen": chosen, "scores": tuning.scores }),
            )
        }
        EstimatorKind::Forest => (EstimatorSpec::Forest(cfg.forest.clone()), serde_json::Value::Null),
        EstimatorKind::Scm => (EstimatorSpec::Scm(cfg.scm), serde_json::Value::Null),
        EstimatorKind::Enet => match (cfg.enet.lambda, cfg.enet.alpha_mix, cfg.tuning.enabled) {
            (Some(lambda), Some(alpha_mix), false) => (
                EstimatorSpec::Enet {
                    lambda,
                    alpha_mix,
                    options: cfg.enet.options,
                },
                serde_json::Value::Null,
            ),
            _ => {
                let grid = if cfg.enet.grid.is_empty() {
                    let (est, _) = split_range(panel.t0(), split)?;
                    default_enet_grid(panel, &est.collect::<Vec<_>>())?
                } else {
                    cfg.enet.grid.clone()
                };
                let tuning = tune_enet(panel, split, &grid, &cfg.enet.options)?;
                for (l, a, score) in &tuning.scores {
                    println!("tune lambda = {l:.5}, alpha_mix = {a:.2}: validation RMSPE {score:.4}");
                }
                let (lambda, alpha_mix) = (tuning.fit.lambda, tuning.fit.alpha_mix);
                println!("chosen lambda = {lambda:.5}, alpha_mix = {alpha_mix:.2}");
                (
                    EstimatorSpec::Enet {
                        lambda,
                        alpha_mix,
                        options: cfg.enet.options,
                    },
                    json!({ "parameter": "lambda_alpha_mix", "split": split, "chosen": [lambda, alpha_mix], "scores": tuning.scores }),
                )
            }
        },
    })
}

/// Fits `spec` on the pre-period with the seed derived for the treated unit,
/// exactly as a placebo run would.
fn fit_main(cfg: &RunConfig, spec: &EstimatorSpec, panel: &Panel) -> Result<FittedModel> {
    Ok(spec
        .with_seed(named_seed(cfg.seed, panel.treated_name()))
        .fit_pre(panel)?)
}

fn model_summary(model: &FittedModel, panel: &Panel) -> serde_json::Value {
    let named = |w: &[f64]| -> serde_json::Map<String, serde_json::Value> {
        panel
            .control_names()
            .iter()
            .zip(w)
            .map(|(n, v)| (n.clone(), json!(v)))
            .collect()
    };
    match model {
        FittedModel::Forest(m) => {
            let used: Vec<&String> = panel
                .control_names()
                .iter()
                .zip(m.used_directions())
                .filter(|(_, u)| *u)
                .map(|(n, _)| n)
                .collect();
            let leaves: usize = m.trees.iter().map(|t| t.n_leaves()).sum();
            json!({
                "n_trees": m.trees.len(),
                "mtry": m.config.mtry,
                "mean_leaves": leaves as f64 / m.trees.len() as f64,
                "max_depth": m.trees.iter().map(|t| t.depth()).max(),
                "controls_used": used,
            })
        }
        FittedModel::Scm(w) => json!({
            "weights": named(&w.omega),
            "objective": w.objective,
            "iterations": w.iterations,
        }),
        FittedModel::Enet(f) => json!({
            "intercept": f.mu,
            "weights": named(&f.omega),
            "lambda": f.lambda,
            "alpha_mix": f.alpha_mix,
            "objective": f.objective,
            "iterations": f.iterations,
        }),
    }
}

fn print_metrics(m: &FitMetrics) {
    let ratio = |r: Option<f64>| r.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
    println!(
        "pre MAE {:.3}  pre RMSPE {:.3}  post MAE {:.3}  post RMSPE {:.3}  ratios MAE {} RMSPE {}",
        m.pre_mae,
        m.pre_rmspe,
        m.post_mae,
        m.post_rmspe,
        ratio(m.ratio_mae),
        ratio(m.ratio_rmspe)
    );
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let panel = load_panel(cfg)?;
    let (spec, tuning) = resolve_spec(cfg, cfg.estimator, &panel)?;
    let model = fit_main(cfg, &spec, &panel)?;
    let fit = counterfactual(&panel, &model)?;
    let metrics = fit_metrics(&fit);
    let b = &cfg.bootstrap;
    let effect = effect_report(&panel, &fit, b.n_boot, b.block_length, b.level, cfg.seed)?;

    let summary = model_summary(&model, &panel);
    write_json(
        &cfg.output_dir.join("report.json"),
        &json!({
            "treated": panel.treated_name(),
            "controls": panel.control_names(),
            "t": panel.t(),
            "t0": panel.t0(),
            "onset": panel.labels()[panel.t0()],
            "spec": spec,
            "tuning": tuning,
            "model": summary,
            "effect": effect,
            "metrics": metrics,
        }),
    )?;
    fit.write_csv(create(&cfg.output_dir.join("gaps.csv"))?)?;
    write_json(&cfg.output_dir.join("model.json"), &model)?;

    println!(
        "{} on {}: T = {}, T0 = {}, {} controls",
        spec.tag(),
        panel.treated_name(),
        panel.t(),
        panel.t0(),
        panel.n()
    );
    if let FittedModel::Scm(_) | FittedModel::Enet(_) = model {
        println!("weights: {}", summary["weights"]);
    }
    let ci = &effect.bootstrap;
    println!(
        "ATE {:.3} (naive {:.3}), se {:.3}, {:.0}% CI [{:.3}, {:.3}] percentile, [{:.3}, {:.3}] normal",
        effect.ate_hat,
        effect.ate_naive,
        ci.se,
        100.0 * ci.level,
        ci.ci_low,
        ci.ci_high,
        ci.normal_low,
        ci.normal_high
    );
    print_metrics(&metrics);
    Ok(())
}

pub fn placebo(cfg: &RunConfig) -> Result<()> {
    let panel = load_panel(cfg)?;
    let (spec, _) = resolve_spec(cfg, cfg.estimator, &panel)?;
    let (main_fit, main) = run_unit(&panel, &spec, cfg.seed)?;
    let study = run_placebos(&panel, &spec, cfg.seed)?;
    let report = placebo_rank_report(&study, &main, cfg.placebo.exclude_multiplier);

    let dir = cfg.output_dir.join("placebo");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    main_fit.write_csv(create(&dir.join(format!("gaps_{}.csv", file_stem(panel.treated_name()))))?)?;
    for run in &study.runs {
        if let Some(fit) = &run.fit {
            fit.write_csv(create(&dir.join(format!("gaps_{}.csv", file_stem(&run.unit))))?)?;
        }
    }
    report.write_csv(create(&cfg.output_dir.join("placebo_summary.csv"))?)?;
    let errors: Vec<_> = study
        .runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| json!({ "unit": r.unit, "error": e })))
        .collect();
    write_json(
        &cfg.output_dir.join("placebo_report.json"),
        &json!({ "report": report, "errors": errors }),
    )?;

    println!(
        "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "unit", "pre RMSPE", "post", "ratio", "avg gap", "excluded"
    );
    for r in &report.rows {
        println!(
            "{:<22} {:>9.3} {:>9.3} {:>9} {:>9.3} {:>9}",
            if r.is_main { format!("{} *", r.unit) } else { r.unit.clone() },
            r.pre_rmspe,
            r.post_rmspe,
            r.ratio_rmspe.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into()),
            r.avg_gap_post,
            if r.excluded { "yes" } else { "" }
        );
    }
    println!(
        "{} ranks {} by RMSPE ratio and {} by |avg post gap| among {} retained units",
        panel.treated_name(),
        report.main_rank_ratio,
        report.main_rank_gap,
        report.retained
    );
    for unit in &report.failed {
        eprintln!("placebo run for {unit} failed");
    }
    Ok(())
}

pub fn conformal(cfg: &RunConfig) -> Result<()> {
    let panel = load_panel(cfg)?;
    let (spec, _) = resolve_spec(cfg, cfg.estimator, &panel)?;
    let spec = spec.with_seed(named_seed(cfg.seed, panel.treated_name()));
    let c = &cfg.conformal;
    let null = vec![c.null; panel.t() - panel.t0()];
    let result = conformal_test(&panel, &spec, &null, c.scheme(cfg.seed), c.q)?;
    write_json(&cfg.output_dir.join("conformal.json"), &result)?;
    println!(
        "S = {:.4}, p = {:.4} over {} permutations",
        result.statistic, result.p_value, result.n_permutations
    );
    if c.spec_test {
        let rows = placebo_specification_test(&panel, &spec, c.kappa_max, c.n_samples, cfg.seed, c.q)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.kappa.to_string(), r.p_iid.to_string(), r.p_moving_block.to_string()])
            .collect();
        write_rows(
            &cfg.output_dir.join("spec_test.csv"),
            &["kappa", "p_iid", "p_moving_block"],
            &table,
        )?;
        println!("{:>5} {:>8} {:>8}", "kappa", "iid", "moving");
        for r in &rows {
            println!("{:>5} {:>8.3} {:>8.3}", r.kappa, r.p_iid, r.p_moving_block);
        }
    }
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    let panel = load_panel(cfg)?;
    let kinds = [EstimatorKind::Forest, EstimatorKind::Scm, EstimatorKind::Enet];
    let (est, val) = split_range(panel.t0(), SplitSpec::holdout(cfg.compare.holdout))?;
    let est_panel = panel.with_t0(est.end)?;

    let mut main_rows = Vec::new();
    let mut val_rows = Vec::new();
    let mut records = Vec::new();
    for kind in kinds {
        let (spec, _) = resolve_spec(cfg, kind, &panel)?;
        let model = fit_main(cfg, &spec, &panel)?;
        let m = fit_metrics(&counterfactual(&panel, &model)?);

        // Hold-out protocol: tune and fit on the estimation block only.
        let (val_spec, _) = resolve_spec(cfg, kind, &est_panel)?;
        let val_model = fit_main(cfg, &val_spec, &est_panel)?;
        let v = fit_metrics_on(&counterfactual(&panel, &val_model)?, est.clone(), val.clone());

        let tag = spec.tag().to_string();
        main_rows.push(vec![
            tag.clone(),
            m.pre_mae.to_string(),
            m.pre_rmspe.to_string(),
            m.post_std.to_string(),
            m.avg_gap_post.to_string(),
            String::new(),
        ]);
        val_rows.push(vec![tag.clone(), v.post_mae.to_string(), v.post_rmspe.to_string(), String::new()]);
        records.push(json!({ "estimator": tag, "main": m, "validation": { "mae": v.post_mae, "rmspe": v.post_rmspe } }));
    }
    main_rows.push(vec![
        "matrix_completion".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        "not implemented".into(),
    ]);
    val_rows.push(vec!["matrix_completion".into(), String::new(), String::new(), "not implemented".into()]);

    write_rows(
        &cfg.output_dir.join("compare.csv"),
        &["estimator", "pre_mae", "pre_rmspe", "post_std", "avg_gap_post", "note"],
        &main_rows,
    )?;
    write_rows(
        &cfg.output_dir.join("compare_validation.csv"),
        &["estimator", "validation_mae", "validation_rmspe", "note"],
        &val_rows,
    )?;
    write_json(
        &cfg.output_dir.join("compare.json"),
        &json!({
            "estimation": [est.start, est.end],
            "validation": [val.start, val.end],
            "estimators": records,
        }),
    )?;

    println!(
        "{:<18} {:>9} {:>9} {:>9} {:>9} | {:>9} {:>9}",
        "estimator", "pre MAE", "pre RMSPE", "post std", "avg gap", "val MAE", "val RMSPE"
    );
    for (m, v) in main_rows.iter().zip(&val_rows) {
        let num = |s: &str| s.parse::<f64>().map(|x| format!("{x:.3}")).unwrap_or_else(|_| "-".into());
        println!(
            "{:<18} {:>9} {:>9} {:>9} {:>9} | {:>9} {:>9} {}",
            m[0],
            num(&m[1]),
            num(&m[2]),
            num(&m[3]),
            num(&m[4]),
            num(&v[1]),
            num(&v[2]),
            m[5]
        );
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let sim = simulate_panel(&cfg.simulate)?;
    let panel_path = cfg.output_dir.join("panel.csv");
    write_panel_csv(&sim.panel, &panel_path)?;
    let labels = sim.panel.labels();
    let rows: Vec<Vec<String>> = (0..sim.panel.t())
        .map(|t| {
            vec![
                labels[t].format("%Y-%m-%d").to_string(),
                sim.f_values[t].to_string(),
                sim.y0[t].to_string(),
                sim.tau[t].to_string(),
                sim.panel.treated()[t].to_string(),
            ]
        })
        .collect();
    write_rows(
        &cfg.output_dir.join("truth.csv"),
        &["week_start", "f", "y0", "tau", "observed"],
        &rows,
    )?;
    println!(
        "wrote {} periods x {} controls to {}; onset index {} ({})",
        sim.panel.t(),
        sim.panel.n(),
        panel_path.display(),
        sim.panel.t0(),
        labels[sim.panel.t0()]
    );
    Ok(())
}
