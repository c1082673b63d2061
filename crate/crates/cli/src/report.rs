//! Cross-run comparison tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use iaqd_core::trainer::{Diagnostics, ExperimentConfig, PhaseMetrics};
use iaqd_core::types::Strategy;
use iaqd_core::{Error, Result};
use serde::Serialize;

use crate::svg;

struct Run {
    path: PathBuf,
    config: ExperimentConfig,
    phases: Vec<PhaseMetrics>,
}

fn load_run(path: &Path) -> Result<Run> {
    let config: ExperimentConfig = serde_json::from_slice(&fs::read(path.join("config.json"))?)?;
    let mut phases = Vec::new();
    for t in 1.. {
        let f = path.join(format!("metrics/phase_{t}.json"));
        if !f.exists() {
            break;
        }
        phases.push(serde_json::from_slice::<PhaseMetrics>(&fs::read(f)?)?);
    }
    if phases.is_empty() {
        return Err(Error::Format(format!("{} has no metrics", path.display())));
    }
    Ok(Run {
        path: path.to_path_buf(),
        config,
        phases,
    })
}

/// Seed-averaged final-phase numbers for one strategy.
#[derive(Debug, Serialize)]
pub struct Row {
    pub strategy: Strategy,
    pub runs: usize,
    pub ap_all: f64,
    pub ap_old: Option<f64>,
    pub ap_new: Option<f64>,
    pub ap50_all: f64,
    pub ap_old_before_er: Option<f64>,
    pub related_total: Option<f64>,
    pub overall_iou: Option<f64>,
    pub churn_max: Option<f64>,
    pub ap_all_by_phase: Vec<f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn last_diag(r: &Run) -> Option<&Diagnostics> {
    r.phases.last().and_then(|m| m.diagnostics.as_ref())
}

pub fn churn_svg(d: &Diagnostics) -> String {
    let groups: Vec<String> = (0..d.churn.len()).map(|q| q.to_string()).collect();
    let counts: Vec<f64> = d.churn.iter().map(|&c| c as f64).collect();
    svg::bar_chart(
        "distinct teacher queries matched per student query",
        &groups,
        &[("count".into(), counts)],
    )
}

/// Writes `table.md`, `table.csv`, `summary.json` and SVG plots into `out`;
/// returns the markdown table.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<String> {
    let runs: Vec<Run> = run_dirs.iter().map(|p| load_run(p)).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut by_strategy: BTreeMap<usize, Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        let key = Strategy::ALL.iter().position(|s| *s == r.config.train.strategy).unwrap_or(usize::MAX);
        by_strategy.entry(key).or_default().push(r);
    }
    let rows: Vec<Row> = by_strategy
        .values()
        .map(|group| {
            let last = |r: &&Run| r.phases.last().cloned().expect("nonempty");
            let finals: Vec<PhaseMetrics> = group.iter().map(last).collect();
            let phases = group.iter().map(|r| r.phases.len()).min().unwrap_or(0);
            Row {
                strategy: group[0].config.train.strategy,
                runs: group.len(),
                ap_all: mean(finals.iter().map(|m| m.report.ap_all)).unwrap_or(0.0),
                ap_old: mean(finals.iter().filter_map(|m| m.report.ap_old)),
                ap_new: mean(finals.iter().filter_map(|m| m.report.ap_new)),
                ap50_all: mean(finals.iter().map(|m| m.report.ap50)).unwrap_or(0.0),
                ap_old_before_er: mean(finals.iter().filter_map(|m| m.pre_er.as_ref().and_then(|p| p.ap_old))),
                related_total: mean(group.iter().filter_map(|r| last_diag(r)).map(|d| d.related_totals as f64)),
                overall_iou: mean(group.iter().filter_map(|r| last_diag(r)).filter_map(|d| d.overall_iou.mean)),
                churn_max: mean(group.iter().filter_map(|r| last_diag(r)).map(|d| d.churn_max as f64)),
                ap_all_by_phase: (0..phases)
                    .map(|t| mean(group.iter().map(|r| r.phases[t].report.ap_all)).unwrap_or(0.0))
                    .collect(),
            }
        })
        .collect();

    let mut md = String::new();
    let _ = writeln!(md, "| Method | Runs | All AP | Old AP | New AP | All AP50 | Old AP (no ER) |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.strategy,
            r.runs,
            fmt_ap(Some(r.ap_all)),
            fmt_ap(r.ap_old),
            fmt_ap(r.ap_new),
            fmt_ap(Some(r.ap50_all)),
            fmt_ap(r.ap_old_before_er)
        );
    }
    fs::write(out.join("table.md"), &md)?;

    let mut csv = String::from("strategy,runs,ap_all,ap_old,ap_new,ap50_all,ap_old_before_er,related_total,overall_iou,churn_max\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{},{},{:.6},{},{},{},{}",
            r.strategy,
            r.runs,
            r.ap_all,
            opt(r.ap_old),
            opt(r.ap_new),
            r.ap50_all,
            opt(r.ap_old_before_er),
            opt(r.related_total),
            opt(r.overall_iou),
            opt(r.churn_max)
        );
    }
    fs::write(out.join("table.csv"), csv)?;
    let sources: Vec<String> = runs.iter().map(|r| r.path.display().to_string()).collect();
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "runs": sources, "rows": rows }))? + "\n",
    )?;

    let names: Vec<String> = rows.iter().map(|r| r.strategy.to_string()).collect();
    let ap_series = vec![
        ("All".to_string(), rows.iter().map(|r| r.ap_all).collect()),
        ("Old".to_string(), rows.iter().map(|r| r.ap_old.unwrap_or(0.0)).collect()),
        ("New".to_string(), rows.iter().map(|r| r.ap_new.unwrap_or(0.0)).collect()),
    ];
    fs::write(out.join("ap_all_old_new.svg"), svg::bar_chart("final-phase AP", &names, &ap_series))?;
    fs::write(
        out.join("related_queries.svg"),
        svg::bar_chart(
            "related queries for old categories",
            &names,
            &[("total".into(), rows.iter().map(|r| r.related_total.unwrap_or(0.0)).collect())],
        ),
    )?;
    fs::write(
        out.join("overall_iou.svg"),
        svg::bar_chart(
            "overall IoU of related-query regions",
            &names,
            &[("IoU".into(), rows.iter().map(|r| r.overall_iou.unwrap_or(0.0)).collect())],
        ),
    )?;
    let max_phases = rows.iter().map(|r| r.ap_all_by_phase.len()).max().unwrap_or(0);
    let xs: Vec<String> = (1..=max_phases).map(|t| format!("phase {t}")).collect();
    let series: Vec<(String, Vec<f64>)> =
        rows.iter().map(|r| (r.strategy.to_string(), r.ap_all_by_phase.clone())).collect();
    fs::write(out.join("ap_by_phase.svg"), svg::line_chart("All AP after each phase", &xs, &series))?;
    for (name, group) in names.iter().zip(by_strategy.values()) {
        if let Some(d) = last_diag(group[0]) {
            fs::write(out.join(format!("churn_{name}.svg")), churn_svg(d))?;
        }
    }
    Ok(md)
}
