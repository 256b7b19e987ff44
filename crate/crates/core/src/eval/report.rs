use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::probe::GridPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    #[default]
    LinearProbe,
    FewShot,
}

impl ReportKind {
    fn as_str(self) -> &'static str {
        match self {
            ReportKind::LinearProbe => "linear_probe",
            ReportKind::FewShot => "few_shot",
        }
    }
}

/// Result of one evaluation with enough context to place it in a sweep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalReport {
    pub kind: ReportKind,
    /// Series name in tables and plots, e.g. the training method.
    pub label: String,
    pub accuracy: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: Option<f64>,
    pub selected_lambda: Option<f64>,
    pub grid: Vec<GridPoint>,
    pub episodes: Option<usize>,
    pub queries_per_episode: Option<usize>,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub config_hash: String,
    pub dataset_id: Option<String>,
    pub checkpoint_id: Option<String>,
    /// Swept quantity and its value, when part of a sweep.
    pub axis: Option<String>,
    pub axis_value: Option<f64>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Table => "txt",
            Self::Csv => "csv",
            Self::Svg => "svg",
        }
    }
}

fn opt_f64(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn axis_text(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// At most four decimals, trailing zeros dropped.
fn short_number(x: f64) -> String {
    let s = format!("{x:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render reports in the requested format.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Insufficient("no reports to render".into()));
    }
    Ok(match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Table => render_table(reports),
        ReportFormat::Svg => render_svg(reports),
    })
}

pub fn write_report(reports: &[EvalReport], format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, emit_report(reports, format)?)?;
    Ok(())
}

const COLUMNS: [&str; 13] = [
    "label",
    "kind",
    "axis",
    "axis_value",
    "accuracy",
    "ci95",
    "selected_lambda",
    "episodes",
    "num_train",
    "num_test",
    "dataset_id",
    "checkpoint_id",
    "config_hash",
];

fn row(r: &EvalReport) -> [String; 13] {
    [
        r.label.clone(),
        r.kind.as_str().to_string(),
        r.axis.clone().unwrap_or_default(),
        axis_text(r.axis_value),
        format!("{:.6}", r.accuracy),
        opt_f64(r.ci95, 6),
        r.selected_lambda
            .map(|l| format!("{l:.3e}"))
            .unwrap_or_default(),
        opt_usize(r.episodes),
        r.num_train.to_string(),
        r.num_test.to_string(),
        r.dataset_id.clone().unwrap_or_default(),
        r.checkpoint_id.clone().unwrap_or_default(),
        r.config_hash.clone(),
    ]
}

fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let cells: Vec<String> = row(r).iter().map(|c| csv_field(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn render_table(reports: &[EvalReport]) -> String {
    // Identifiers are long; the table keeps the columns people compare.
    let keep = [0, 1, 2, 3, 4, 5, 6, 7, 12];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let full = row(r);
            let mut cells: Vec<String> = keep.iter().map(|&k| full[k].clone()).collect();
            cells[3] = r.axis_value.map(short_number).unwrap_or_default();
            cells[8] = cells[8].chars().take(12).collect();
            cells
        })
        .collect();
    let header: Vec<String> = keep.iter().map(|&k| COLUMNS[k].to_string()).collect();
    let widths: Vec<usize> = (0..keep.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{cell:<w$}", w = widths[c]);
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    ));
    for r in &rows {
        out.push_str(&line(r));
    }
    out
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn render_svg(reports: &[EvalReport]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        let x = r.axis_value.unwrap_or(i as f64);
        series
            .entry(r.label.clone())
            .or_default()
            .push((x, r.accuracy, r.ci95.unwrap_or(0.0)));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs = series.values().flatten().map(|p| p.0);
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let ys = series
        .values()
        .flatten()
        .flat_map(|p| [p.1 - p.2, p.1 + p.2]);
    let (y_lo, y_hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    let pad = ((y_hi - y_lo) * 0.1).max(0.01);
    let (y0, y1) = ((y_lo - pad).max(0.0), (y_hi + pad).min(1.0));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let axis = reports
        .iter()
        .find_map(|r| r.axis.clone())
        .unwrap_or_else(|| "run".to_string());
    let axis = xml_escape(&axis);
    let metric = match reports[0].kind {
        ReportKind::LinearProbe => "linear probe accuracy",
        ReportKind::FewShot => "few-shot accuracy",
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let mut hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let _ = writeln!(
        s,
        "<desc>config_hash {}</desc>",
        xml_escape(&hashes.join(" "))
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{metric} vs {axis}</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + ph
    );
    for k in 0..=4 {
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            left - 6.0,
            sy(yv) + 4.0
        );
    }
    let mut ticks: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            sx(t),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{axis}</text>"#,
        left + pw / 2.0,
        h - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in pts {
            if p.2 > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    sy(p.1 - p.2),
                    sy(p.1 + p.2),
                    x = sx(p.0)
                );
            }
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                sx(p.0),
                sy(p.1)
            );
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let name = if label.is_empty() {
            "accuracy"
        } else {
            label.as_str()
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
