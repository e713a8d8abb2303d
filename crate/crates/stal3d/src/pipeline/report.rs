//! Report rendering: closed-gap tables from a reference fixture of
//! published AP triples, evaluation summaries as Markdown and CSV, and
//! PR-curve data files for plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{closed_gap, EvalReport};
use crate::error::ConfigError;

/// Published results for one method: `[bev, 3d]` per class, `None` where
/// the source table reports no value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureMethod {
    pub name: String,
    pub ap: Vec<[Option<f64>; 2]>,
    pub closed_gap: Vec<[Option<f64>; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureTask {
    pub name: String,
    pub classes: Vec<String>,
    pub source_only: Vec<[f64; 2]>,
    pub oracle: Vec<[f64; 2]>,
    pub methods: Vec<FixtureMethod>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedGapFixture {
    pub description: String,
    pub tasks: Vec<FixtureTask>,
}

impl ClosedGapFixture {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&body).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// One recomputed fixture entry.
#[derive(Debug, Clone)]
pub struct GapEntry {
    pub task: String,
    pub method: String,
    pub class_name: String,
    /// 0 = BEV, 1 = 3D.
    pub metric: usize,
    pub ap: f64,
    pub computed: Option<f64>,
    pub printed: Option<f64>,
}

/// Recompute every closed-gap entry of the fixture from its AP triples.
pub fn recompute_fixture(fixture: &ClosedGapFixture) -> Vec<GapEntry> {
    let mut out = Vec::new();
    for task in &fixture.tasks {
        for method in &task.methods {
            for (c, class_name) in task.classes.iter().enumerate() {
                for metric in 0..2 {
                    let ap = match method.ap[c][metric] {
                        Some(v) => v,
                        None => continue,
                    };
                    let s = task.source_only[c][metric];
                    let o = task.oracle[c][metric];
                    out.push(GapEntry {
                        task: task.name.clone(),
                        method: method.name.clone(),
                        class_name: class_name.clone(),
                        metric,
                        ap,
                        computed: closed_gap(ap, s, o),
                        printed: method.closed_gap[c][metric],
                    });
                }
            }
        }
    }
    out
}

/// Render the recomputed closed-gap table as Markdown.
pub fn closed_gap_markdown(fixture: &ClosedGapFixture) -> String {
    let mut md = String::from("# Closed-gap report\n");
    for task in &fixture.tasks {
        md.push_str(&format!("\n## {}\n\n", task.name));
        md.push_str("| method |");
        for class in &task.classes {
            md.push_str(&format!(" {class} AP_BEV | closed gap | {class} AP_3D | closed gap |"));
        }
        md.push('\n');
        md.push_str("|---|");
        for _ in &task.classes {
            md.push_str("---|---|---|---|");
        }
        md.push('\n');
        for method in &task.methods {
            md.push_str(&format!("| {} |", method.name));
            for (c, _) in task.classes.iter().enumerate() {
                for metric in 0..2 {
                    match method.ap[c][metric] {
                        Some(ap) => {
                            let gap = closed_gap(ap, task.source_only[c][metric], task.oracle[c][metric]);
                            let gap_str = gap
                                .map(|g| format!("{g:+.2}%"))
                                .unwrap_or_else(|| "undefined".to_string());
                            md.push_str(&format!(" {ap:.2} | {gap_str} |"));
                        }
                        None => md.push_str(" -- | -- |"),
                    }
                }
            }
            md.push('\n');
        }
    }
    md
}

/// Render one evaluation report as Markdown.
pub fn eval_markdown(title: &str, report: &EvalReport) -> String {
    let mut md = format!("## {title}\n\n| class | ground truth | AP_BEV | AP_3D |\n|---|---|---|---|\n");
    for c in &report.per_class {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            c.name,
            c.num_gt,
            fmt(c.ap_bev),
            fmt(c.ap_3d)
        ));
    }
    md.push_str(&format!(
        "| **mean** | | **{:.2}** | **{:.2}** |\n",
        report.mean_ap_bev, report.mean_ap_3d
    ));
    md
}

/// Render evaluation reports as a CSV table (one row per class per run).
pub fn eval_csv(reports: &[(String, EvalReport)]) -> String {
    let mut csv = String::from("run,class,num_gt,ap_bev,ap_3d\n");
    for (name, report) in reports {
        for c in &report.per_class {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            csv.push_str(&format!(
                "{name},{},{},{},{}\n",
                c.name,
                c.num_gt,
                fmt(c.ap_bev),
                fmt(c.ap_3d)
            ));
        }
        csv.push_str(&format!(
            "{name},mean,,{},{}\n",
            report.mean_ap_bev, report.mean_ap_3d
        ));
    }
    csv
}

/// Write per-class precision-recall samples for plotting.
pub fn write_pr_curves(
    report: &EvalReport,
    dir: &Path,
    prefix: &str,
) -> Result<(), std::io::Error> {
    std::fs::create_dir_all(dir)?;
    for (c, curve) in report.pr_curves_3d.iter().enumerate() {
        let name = report
            .per_class
            .get(c)
            .map(|x| x.name.clone())
            .unwrap_or_else(|| format!("class{c}"));
        let mut body = String::from("recall,precision\n");
        for (r, p) in curve {
            body.push_str(&format!("{r},{p}\n"));
        }
        std::fs::write(dir.join(format!("{prefix}_{name}_pr3d.csv")), body)?;
    }
    Ok(())
}
