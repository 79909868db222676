//! Result rendering: console tables, CSV and JSON files, event-study plot
//! data, and the influence dump.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::run::{EffectRow, EstimateKind, EstimationResult, RunOutput};

/// Version tag written into every output file.
pub const SCHEMA_VERSION: &str = "esdid-results-v1";

/// Output format for result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Format> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(crate::error::Error::Usage(format!(
                "unknown output format {other:?}; use csv or json"
            ))),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

fn row_label(row: &EffectRow) -> String {
    match row.kind {
        EstimateKind::Effect => format!("effect_{}", row.horizon),
        EstimateKind::Placebo => format!("placebo_{}", row.horizon),
        EstimateKind::AverageTotal => "average_total".to_string(),
    }
}

fn all_rows(result: &EstimationResult) -> Vec<&EffectRow> {
    result
        .effects
        .iter()
        .chain(result.placebos.iter())
        .chain(result.average_total.iter())
        .collect()
}

/// Renders the console results table.
pub fn render_console(result: &EstimationResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>12} {:>12} {:>10} {:>9}",
        "", "estimate", "se", "ci_low", "ci_high", "N", "switchers"
    );
    for row in all_rows(result) {
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>12} {:>12} {:>10} {:>9}",
            row_label(row),
            row.estimate.map(|v| format!("{v:.6}")).unwrap_or_else(|| ".".into()),
            row.se.map(|v| format!("{v:.6}")).unwrap_or_else(|| ".".into()),
            row.ci_low.map(|v| format!("{v:.6}")).unwrap_or_else(|| ".".into()),
            row.ci_high.map(|v| format!("{v:.6}")).unwrap_or_else(|| ".".into()),
            format!("{:.1}", row.n),
            row.switchers,
        );
        if let Some(boot) = row.se_bootstrap {
            let _ = writeln!(out, "{:<14} {:>12} {:>12}", "", "bootstrap se", format!("{boot:.6}"));
        }
    }
    if let Some(w) = result.w_plus {
        let _ = writeln!(out, "share of incremental dose from switchers-in: {w:.4}");
    }
    if let Some(test) = &result.effects_equal {
        let _ = writeln!(
            out,
            "equal-effects test: chi2({}) = {:.4}, p = {:.4}",
            test.df, test.statistic, test.p_value
        );
    }
    if let Some(test) = &result.joint_placebos {
        let _ = writeln!(
            out,
            "joint placebo test:  chi2({}) = {:.4}, p = {:.4}",
            test.df, test.statistic, test.p_value
        );
    }
    if let Some(het) = &result.het {
        for table in het {
            let _ = writeln!(out, "heterogeneity regression, effect {}:", table.horizon);
            if let Some(note) = &table.note {
                let _ = writeln!(out, "  note: {note}");
            }
            for c in &table.coefs {
                let _ = writeln!(
                    out,
                    "  {:<16} {:>12.6} (se {:.6}, t {:.3}, p {:.4})",
                    c.name, c.estimate, c.se, c.t_stat, c.p_value
                );
            }
            if let Some(p) = table.joint_p {
                let _ = writeln!(out, "  joint zero test p = {p:.4} ({} switchers)", table.n_switchers);
            }
        }
    }
    if let Some(paths) = &result.design_paths {
        let _ = writeln!(out, "switcher treatment paths (baseline then doses):");
        for p in paths {
            let path: Vec<String> = p.path.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                out,
                "  ({}) share {:.4} over {} groups",
                path.join(", "),
                p.weight_share,
                p.n_groups
            );
        }
    }
    if result.analytic_se_advisory {
        let _ = writeln!(
            out,
            "note: analytic standard errors are advisory in this mode; prefer bootstrap inference"
        );
    }
    out
}

/// Writes the results table as CSV (with a schema comment line).
pub fn write_results_csv<W: Write>(mut w: W, results: &[(String, EstimationResult)]) -> Result<()> {
    writeln!(w, "# {SCHEMA_VERSION}")?;
    writeln!(w, "level,kind,horizon,estimate,se,se_bootstrap,ci_low,ci_high,n,switchers,note")?;
    for (level, result) in results {
        for row in all_rows(result) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                level,
                match row.kind {
                    EstimateKind::Effect => "effect",
                    EstimateKind::Placebo => "placebo",
                    EstimateKind::AverageTotal => "average_total",
                },
                row.horizon,
                fmt_opt(row.estimate),
                fmt_opt(row.se),
                fmt_opt(row.se_bootstrap),
                fmt_opt(row.ci_low),
                fmt_opt(row.ci_high),
                row.n,
                row.switchers,
                row.note.as_deref().unwrap_or("").replace(',', ";"),
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonTest<'a> {
    statistic: f64,
    df: usize,
    p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: &'a Option<String>,
}

#[derive(Serialize)]
struct JsonLevel<'a> {
    level: &'a str,
    n_groups: usize,
    n_periods: usize,
    normalized: bool,
    analytic_se_advisory: bool,
    rows: Vec<&'a EffectRow>,
    dose: &'a [crate::run::DoseRow],
    #[serde(skip_serializing_if = "Option::is_none")]
    w_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effects_equal: Option<JsonTest<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    joint_placebos: Option<JsonTest<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heterogeneity: Option<&'a Vec<crate::heterogeneity::HetTable>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    design_paths: Option<&'a Vec<crate::design::DesignPath>>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct JsonDoc<'a> {
    schema: &'static str,
    levels: Vec<JsonLevel<'a>>,
}

/// Writes the results as JSON.
pub fn write_results_json<W: Write>(mut w: W, results: &[(String, EstimationResult)]) -> Result<()> {
    let doc = JsonDoc {
        schema: SCHEMA_VERSION,
        levels: results
            .iter()
            .map(|(level, r)| JsonLevel {
                level,
                n_groups: r.n_groups,
                n_periods: r.n_periods,
                normalized: r.normalized,
                analytic_se_advisory: r.analytic_se_advisory,
                rows: all_rows(r),
                dose: &r.dose,
                w_plus: r.w_plus,
                effects_equal: r.effects_equal.as_ref().map(|t| JsonTest {
                    statistic: t.statistic,
                    df: t.df,
                    p_value: t.p_value,
                    note: &t.note,
                }),
                joint_placebos: r.joint_placebos.as_ref().map(|t| JsonTest {
                    statistic: t.statistic,
                    df: t.df,
                    p_value: t.p_value,
                    note: &t.note,
                }),
                heterogeneity: r.het.as_ref(),
                design_paths: r.design_paths.as_ref(),
                warnings: &r.warnings,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    Ok(())
}

/// Event-study plot data: placebos at negative horizons, the reference point
/// at zero, effects at positive horizons.
pub fn write_plot_csv<W: Write>(mut w: W, result: &EstimationResult) -> Result<()> {
    writeln!(w, "# {SCHEMA_VERSION}")?;
    writeln!(w, "horizon,estimate,se,ci_low,ci_high,n,switchers")?;
    let mut rows: Vec<(i64, Option<&EffectRow>)> = Vec::new();
    for row in result.placebos.iter() {
        rows.push((-(row.horizon as i64), Some(row)));
    }
    rows.push((0, None));
    for row in result.effects.iter() {
        rows.push((row.horizon as i64, Some(row)));
    }
    rows.sort_by_key(|(h, _)| *h);
    for (h, row) in rows {
        match row {
            Some(row) => writeln!(
                w,
                "{},{},{},{},{},{},{}",
                h,
                fmt_opt(row.estimate),
                fmt_opt(row.se),
                fmt_opt(row.ci_low),
                fmt_opt(row.ci_high),
                row.n,
                row.switchers
            )?,
            None => writeln!(w, "0,0,0,0,0,,")?,
        }
    }
    Ok(())
}

/// Per-group influence rows in long format.
pub fn write_influence_csv<W: Write>(mut w: W, results: &[(String, EstimationResult)]) -> Result<()> {
    writeln!(w, "# {SCHEMA_VERSION}")?;
    writeln!(w, "level,kind,horizon,group,u,u_var")?;
    for (level, result) in results {
        let table = &result.influence;
        for l in 0..table.l_max {
            for g in 0..table.n_groups {
                writeln!(w, "{level},effect,{},{g},{},{}", l + 1, table.u[l][g], table.u_var[l][g])?;
            }
        }
        for l in 0..table.pl_max {
            for g in 0..table.n_groups {
                writeln!(
                    w,
                    "{level},placebo,{},{g},{},{}",
                    l + 1,
                    table.u_pl[l][g],
                    table.u_var_pl[l][g]
                )?;
            }
        }
        if table.sigma2_total.is_some() {
            for g in 0..table.n_groups {
                writeln!(
                    w,
                    "{level},average_total,0,{g},{},{}",
                    table.u_total[g], table.u_var_total[g]
                )?;
            }
        }
    }
    Ok(())
}

/// Audit log writers: one human-readable line per event plus a JSON stream.
pub fn write_audit<W: Write>(mut w: W, output: &RunOutput) -> Result<()> {
    for event in &output.audit {
        writeln!(w, "{event}")?;
    }
    Ok(())
}

pub fn write_audit_json<W: Write>(mut w: W, output: &RunOutput) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &output.audit)?;
    writeln!(w)?;
    Ok(())
}

/// Convenience file writers.
pub fn save_results(path: &Path, format: Format, results: &[(String, EstimationResult)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    match format {
        Format::Csv => write_results_csv(file, results),
        Format::Json => write_results_json(file, results),
    }
}

pub fn save_plot_data(path: &Path, result: &EstimationResult) -> Result<()> {
    write_plot_csv(std::fs::File::create(path)?, result)
}

pub fn save_influence(path: &Path, results: &[(String, EstimationResult)]) -> Result<()> {
    write_influence_csv(std::fs::File::create(path)?, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::RawRow;
    use crate::run::{estimate_rows, RunConfig};

    fn result() -> EstimationResult {
        let mut rows = Vec::new();
        for (g, f) in [(0usize, 99usize), (1, 99), (2, 3), (3, 2)] {
            for t in 1..=4i64 {
                let d = if (t as usize) >= f { 1.0 } else { 0.0 };
                rows.push(RawRow::new(format!("g{g}"), t).outcome(5.0 * d).treatment(d));
            }
        }
        estimate_rows(&rows, &RunConfig { effects: 2, placebos: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn csv_has_schema_line_and_rows() {
        let res = vec![(String::new(), result())];
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &res).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# esdid-results-v1\n"));
        assert!(text.contains("effect,1,5,"));
        assert!(text.contains("average_total"));
    }

    #[test]
    fn plot_data_has_reference_point_and_negative_placebos() {
        let res = result();
        let mut buf = Vec::new();
        write_plot_csv(&mut buf, &res).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines.iter().any(|l| l.starts_with("-1,")));
        assert_eq!(lines.iter().filter(|l| l.starts_with("0,0,0,0,0")).count(), 1);
        assert!(lines.iter().any(|l| l.starts_with("2,")));
    }

    #[test]
    fn deterministic_output_bytes() {
        let res1 = vec![(String::new(), result())];
        let res2 = vec![(String::new(), result())];
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_results_csv(&mut b1, &res1).unwrap();
        write_results_csv(&mut b2, &res2).unwrap();
        assert_eq!(b1, b2);
        let mut j1 = Vec::new();
        let mut j2 = Vec::new();
        write_results_json(&mut j1, &res1).unwrap();
        write_results_json(&mut j2, &res2).unwrap();
        assert_eq!(j1, j2);
    }
}
