//! Summary tables and plots rendered from aggregated metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::metrics::{MetricsCell, PRESENTED_BAND};
use super::plan::{Family, Method};
use crate::error::{Error, Result};
use crate::simgen::{DifProportion, Scenario, Study};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Measure {
    TypeI,
    Power,
}

impl Measure {
    fn label(self) -> &'static str {
        match self {
            Measure::TypeI => "Type-I error rates",
            Measure::Power => "Power",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Measure::TypeI => "type1",
            Measure::Power => "power",
        }
    }

    fn value(self, c: &MetricsCell) -> Option<(f64, f64)> {
        match self {
            Measure::TypeI => c.type1_mean.zip(c.type1_sd),
            Measure::Power => c.power_mean.zip(c.power_sd),
        }
    }
}

fn study_title(study: Study, prop: DifProportion) -> String {
    match (study, prop) {
        (Study::DifFree, _) => "DIF-free data".into(),
        (Study::DifInA, p) => format!("DIF in a for {}% items", percent(p)),
        (Study::DifInB, p) => format!("DIF in b for {}% items", percent(p)),
    }
}

fn percent(p: DifProportion) -> u32 {
    match p {
        DifProportion::None => 0,
        DifProportion::P20 => 20,
        DifProportion::P30 => 30,
    }
}

fn scenario_label(s: Scenario) -> &'static str {
    match s {
        Scenario::SmallLow => "Small sample, low ability",
        Scenario::SmallHigh => "Small sample, high ability",
        Scenario::LargeLow => "Large sample, low ability",
        Scenario::LargeHigh => "Large sample, high ability",
    }
}

/// A power value is withheld when the same method's Type-I rate on the
/// matching DIF-free condition is above the presented band.
pub fn power_suppressed(cells: &[MetricsCell], cell: &MetricsCell) -> bool {
    let Ok(spec) = cell.spec() else { return false };
    if spec.study == Study::DifFree {
        return false;
    }
    let free = spec.dif_free_counterpart().fingerprint();
    cells
        .iter()
        .find(|c| c.condition == free && c.method == cell.method)
        .and_then(|c| c.type1_mean)
        .is_some_and(|t| t > PRESENTED_BAND.1)
}

fn lookup(
    cells: &[MetricsCell],
    study: Study,
    prop: DifProportion,
    scenario: Scenario,
    g: usize,
    m: Method,
) -> Option<&MetricsCell> {
    cells
        .iter()
        .find(|c| c.study == study && c.dif_proportion == prop && c.scenario == scenario && c.n_groups == g && c.method == m)
}

/// `(study, proportion)` pairs present, in design order.
fn studies(cells: &[MetricsCell]) -> Vec<(Study, DifProportion)> {
    cells
        .iter()
        .map(|c| (c.study, c.dif_proportion))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn measures(study: Study) -> &'static [Measure] {
    match study {
        Study::DifFree => &[Measure::TypeI],
        _ => &[Measure::TypeI, Measure::Power],
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    condition: &'a str,
    n_groups: usize,
    scenario: Scenario,
    study: Study,
    dif_proportion: DifProportion,
    method: &'static str,
    variant: Method,
    form: usize,
    measure: &'static str,
    mean: Option<f64>,
    sd: Option<f64>,
    n_effective: usize,
    suppressed: bool,
}

/// Writes the report into `dir` and returns the files written.
pub fn render_report(cells: &[MetricsCell], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if cells.is_empty() {
        return Err(Error::Config("no metrics to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Csv => {
            let path = dir.join("report.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for c in cells {
                for &measure in measures(c.study) {
                    let v = measure.value(c);
                    w.serialize(CsvRow {
                        condition: &c.condition,
                        n_groups: c.n_groups,
                        scenario: c.scenario,
                        study: c.study,
                        dif_proportion: c.dif_proportion,
                        method: c.method.family().label(),
                        variant: c.method,
                        form: c.method.form(),
                        measure: measure.slug(),
                        mean: v.map(|x| x.0),
                        sd: v.map(|x| x.1),
                        n_effective: c.n_effective,
                        suppressed: measure == Measure::Power && power_suppressed(cells, c),
                    })?;
                }
            }
            w.flush()?;
            Ok(vec![path])
        }
        ReportFormat::Markdown => {
            let path = dir.join("report.md");
            std::fs::write(&path, markdown(cells))?;
            Ok(vec![path])
        }
        ReportFormat::Svg => {
            let mut out = Vec::new();
            for (study, prop) in studies(cells) {
                for &measure in measures(study) {
                    let path = dir.join(format!("{study}-{prop}-{}.svg", measure.slug()));
                    std::fs::write(&path, svg(cells, study, prop, measure))?;
                    out.push(path);
                }
            }
            Ok(out)
        }
    }
}

fn group_counts(cells: &[MetricsCell]) -> Vec<usize> {
    cells.iter().map(|c| c.n_groups).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Paired Form 1 / Form 2 tables, mean rows followed by SD rows.
pub fn markdown(cells: &[MetricsCell]) -> String {
    let groups = group_counts(cells);
    let mut s = String::new();
    for (study, prop) in studies(cells) {
        for &measure in measures(study) {
            let _ = writeln!(s, "## {} ({})\n", measure.label(), study_title(study, prop));
            let heads: Vec<String> = groups.iter().map(|g| format!("{g}grps")).collect();
            let _ = writeln!(s, "| Conditions | Method | {} | {} |", prefixed("F1", &heads), prefixed("F2", &heads));
            let _ = writeln!(s, "|---|---|{}", "---:|".repeat(2 * groups.len()));
            for scenario in Scenario::ALL {
                for family in Family::ALL {
                    let mut means = Vec::new();
                    let mut sds = Vec::new();
                    for method in family.forms() {
                        for &g in &groups {
                            let cell = lookup(cells, study, prop, scenario, g, method);
                            let hidden = measure == Measure::Power && cell.is_some_and(|c| power_suppressed(cells, c));
                            match cell.and_then(|c| measure.value(c)).filter(|_| !hidden) {
                                Some((m, sd)) => {
                                    means.push(format!("{m:.3}"));
                                    sds.push(format!("({sd:.3})"));
                                }
                                None => {
                                    means.push(String::new());
                                    sds.push(String::new());
                                }
                            }
                        }
                    }
                    if means.iter().all(String::is_empty) {
                        continue;
                    }
                    let _ = writeln!(s, "| {} | {} | {} |", scenario_label(scenario), family.label(), means.join(" | "));
                    let _ = writeln!(s, "| | | {} |", sds.join(" | "));
                }
            }
            s.push_str("\nF1: predicted cutoff (RMSD), uniform DIF (Wald-1, GLR), unadjusted (GMH). ");
            s.push_str("F2: cutoff 0.1 (RMSD), nonuniform DIF (Wald-1, GLR), Holm-adjusted (GMH).");
            if measure == Measure::Power {
                s.push_str(" Blank power cells: the method's DIF-free Type-I rate exceeded 0.09.");
            }
            s.push_str("\n\n");
        }
    }
    s
}

fn prefixed(form: &str, heads: &[String]) -> String {
    heads.iter().map(|h| format!("{form} {h}")).collect::<Vec<_>>().join(" | ")
}

const COLOURS: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// One panel per scenario, one line per method, rate against group count.
fn svg(cells: &[MetricsCell], study: Study, prop: DifProportion, measure: Measure) -> String {
    let groups = group_counts(cells);
    let (pw, ph, pad) = (260.0, 200.0, 40.0);
    let width = 4.0 * pw + 180.0;
    let height = ph + 2.0 * pad + 20.0;
    let g_max = *groups.last().unwrap_or(&2) as f64;
    let g_min = *groups.first().unwrap_or(&2) as f64;
    let y_max = if measure == Measure::TypeI { 0.2 } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-size="14" text-anchor="middle">{} ({})</text>"#,
        width / 2.0,
        measure.label(),
        study_title(study, prop)
    );
    for (k, scenario) in Scenario::ALL.into_iter().enumerate() {
        let x0 = pad + k as f64 * pw;
        let y0 = pad + 10.0;
        let (iw, ih) = (pw - pad - 10.0, ph - 20.0);
        let px = |g: f64| x0 + if g_max > g_min { (g - g_min) / (g_max - g_min) * iw } else { iw / 2.0 };
        let py = |v: f64| y0 + ih - (v / y_max).clamp(0.0, 1.0) * ih;
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{iw}" height="{ih}" fill="none" stroke="#999"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + iw / 2.0, y0 - 4.0, scenario_label(scenario));
        for &g in &groups {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{g}</text>"#, px(g as f64), y0 + ih + 14.0);
        }
        for tick in [0.0, 0.5, 1.0] {
            let v = tick * y_max;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, py(v) + 4.0);
        }
        if measure == Measure::TypeI {
            let y = py(PRESENTED_BAND.1);
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="#bbb" stroke-dasharray="4 3"/>"##, x0 + iw);
        }
        for (m, method) in Method::ALL.into_iter().enumerate() {
            let pts: Vec<String> = groups
                .iter()
                .filter_map(|&g| {
                    let c = lookup(cells, study, prop, scenario, g, method)?;
                    if measure == Measure::Power && power_suppressed(cells, c) {
                        return None;
                    }
                    let (v, _) = measure.value(c)?;
                    Some(format!("{:.1},{:.1}", px(g as f64), py(v)))
                })
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#, pts.join(" "), COLOURS[m]);
            }
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted point");
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{}"/>"#, COLOURS[m]);
            }
        }
    }
    for (m, method) in Method::ALL.into_iter().enumerate() {
        let y = pad + 20.0 + 16.0 * m as f64;
        let x = 4.0 * pw + 20.0;
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/>"#, x + 18.0, COLOURS[m]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{method}</text>"#, x + 24.0, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(g: usize, study: Study, prop: DifProportion, method: Method, t: f64, p: Option<f64>) -> MetricsCell {
        let spec = crate::simgen::ConditionSpec::new(g, Scenario::SmallLow, study, prop, 1).unwrap();
        MetricsCell {
            condition: spec.fingerprint(),
            n_groups: g,
            scenario: Scenario::SmallLow,
            study,
            dif_proportion: prop,
            method,
            type1_mean: Some(t),
            type1_sd: Some(0.01),
            power_mean: p,
            power_sd: p.map(|_| 0.1),
            n_effective: 30,
            n_failed: 0,
            untestable: 0,
            clean_flagged: 0,
            clean_total: 0,
        }
    }

    fn sample() -> Vec<MetricsCell> {
        let mut v = Vec::new();
        for g in [2, 5] {
            v.push(cell(g, Study::DifFree, DifProportion::None, Method::RmsdPredicted, 0.03, None));
            v.push(cell(g, Study::DifFree, DifProportion::None, Method::GlrNonuniform, 0.12, None));
            v.push(cell(g, Study::DifInB, DifProportion::P20, Method::RmsdPredicted, 0.02, Some(0.4)));
            v.push(cell(g, Study::DifInB, DifProportion::P20, Method::GlrNonuniform, 0.1, Some(0.7)));
        }
        v
    }

    #[test]
    fn markdown_has_paired_form_columns() {
        let md = markdown(&sample());
        assert!(md.contains("| Conditions | Method | F1 2grps | F1 5grps | F2 2grps | F2 5grps |"));
        assert!(md.contains("## Type-I error rates (DIF-free data)"));
        assert!(md.contains("## Power (DIF in b for 20% items)"));
        assert!(md.contains("0.400"));
        assert!(!md.contains("0.700"), "GLR power must be withheld");
    }

    #[test]
    fn one_svg_per_figure_group() {
        let dir = tempfile::tempdir().unwrap();
        let files = render_report(&sample(), ReportFormat::Svg, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn csv_rows_per_measure() {
        let dir = tempfile::tempdir().unwrap();
        let files = render_report(&sample(), ReportFormat::Csv, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 4 * 2);
        assert!(text.lines().any(|l| l.contains("glr_nonuniform") && l.contains("power") && l.ends_with("true")));
        assert!("pdf".parse::<ReportFormat>().is_err());
        assert!(render_report(&[], ReportFormat::Csv, dir.path()).is_err());
    }
}
