//! Learning-curve SVG from a summary CSV: loss panel above accuracy panel,
//! one line per variant with a translucent +-1 std band.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, QmlError, Result};
use crate::experiment::SUMMARY_HEADER;

const WIDTH: f64 = 860.0;
const PANEL_HEIGHT: f64 = 280.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 200.0;
const MARGIN_TOP: f64 = 40.0;
const PANEL_GAP: f64 = 60.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub task: String,
    pub epoch: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Parses a summary CSV. Row numbers in errors count the header as row 1.
pub fn parse_summary_csv(text: &str, origin: &Path) -> Result<Vec<SummaryRow>> {
    let err = |line: usize, message: String| QmlError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SUMMARY_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header '{SUMMARY_HEADER}', got '{h}'"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(err(row, format!("expected 7 fields, got {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[i]
                .trim()
                .parse()
                .map_err(|_| err(row, format!("{name} is not a number: '{}'", fields[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(row, format!("{name} is not finite")))
            }
        };
        let epoch = fields[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(row, format!("epoch is not a non-negative integer: '{}'", fields[2])))?;
        let parsed = SummaryRow {
            variant: fields[0].to_string(),
            task: fields[1].to_string(),
            epoch,
            loss_mean: num(3, "loss_mean")?,
            loss_std: num(4, "loss_std")?,
            acc_mean: num(5, "acc_mean")?,
            acc_std: num(6, "acc_std")?,
        };
        if parsed.loss_std < 0.0 || parsed.acc_std < 0.0 {
            return Err(err(row, "standard deviation is negative".into()));
        }
        rows.push(parsed);
    }
    if rows.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    Ok(rows)
}

struct Series {
    label: String,
    points: Vec<SummaryRow>,
}

fn group(rows: Vec<SummaryRow>) -> Vec<Series> {
    let multi_task = rows.iter().any(|r| r.task != rows[0].task);
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = if multi_task {
            format!("{} ({})", r.variant, r.task)
        } else {
            r.variant.clone()
        };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(r),
            None => series.push(Series { label, points: vec![r] }),
        }
    }
    for s in &mut series {
        s.points.sort_by_key(|p| p.epoch);
    }
    series
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axis {
    lo: f64,
    hi: f64,
    top: f64,
}

impl Axis {
    fn y(&self, v: f64) -> f64 {
        let span = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        self.top + PANEL_HEIGHT * (1.0 - (v - self.lo) / span)
    }
}

/// Renders the SVG document.
pub fn render_svg(rows: Vec<SummaryRow>) -> String {
    let series = group(rows);
    let first_epoch = series.iter().flat_map(|s| &s.points).map(|p| p.epoch).min().unwrap_or(0);
    let last_epoch = series.iter().flat_map(|s| &s.points).map(|p| p.epoch).max().unwrap_or(0);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x = |epoch: usize| -> f64 {
        if last_epoch == first_epoch {
            MARGIN_LEFT + plot_w / 2.0
        } else {
            MARGIN_LEFT + plot_w * (epoch - first_epoch) as f64 / (last_epoch - first_epoch) as f64
        }
    };
    let loss_hi = series
        .iter()
        .flat_map(|s| &s.points)
        .map(|p| p.loss_mean + p.loss_std)
        .fold(0.0f64, f64::max);
    let loss_axis = Axis {
        lo: 0.0,
        hi: if loss_hi > 0.0 { loss_hi * 1.05 } else { 1.0 },
        top: MARGIN_TOP,
    };
    let acc_axis = Axis {
        lo: 0.0,
        hi: 1.0,
        top: MARGIN_TOP + PANEL_HEIGHT + PANEL_GAP,
    };
    let height = acc_axis.top + PANEL_HEIGHT + MARGIN_BOTTOM;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    type Pick = fn(&SummaryRow) -> (f64, f64);
    let panels: [(&str, &Axis, Pick); 2] = [
        ("Mean training loss", &loss_axis, |p| (p.loss_mean, p.loss_std)),
        ("Mean test accuracy", &acc_axis, |p| (p.acc_mean, p.acc_std)),
    ];
    for (title, axis, pick) in panels {
        let bottom = axis.top + PANEL_HEIGHT;
        let _ = writeln!(svg, r#"<g class="panel">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{title}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            axis.top - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_LEFT:.2}" y="{:.2}" width="{plot_w:.2}" height="{PANEL_HEIGHT:.2}" fill="none" stroke="black"/>"#,
            axis.top
        );
        for k in 0..=4 {
            let v = axis.lo + (axis.hi - axis.lo) * k as f64 / 4.0;
            let y = axis.y(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
                MARGIN_LEFT - 5.0,
                MARGIN_LEFT - 8.0,
                y + 4.0
            );
        }
        let label_every = ((last_epoch - first_epoch) / 10).max(1);
        for epoch in first_epoch..=last_epoch {
            let xe = x(epoch);
            let _ = write!(
                svg,
                r#"<line class="xtick" x1="{xe:.2}" y1="{bottom:.2}" x2="{xe:.2}" y2="{:.2}" stroke="black"/>"#,
                bottom + 5.0
            );
            if (epoch - first_epoch) % label_every == 0 || epoch == last_epoch {
                let _ = write!(
                    svg,
                    r#"<text x="{xe:.2}" y="{:.2}" text-anchor="middle">{epoch}</text>"#,
                    bottom + 18.0
                );
            }
            svg.push('\n');
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            bottom + 36.0
        );

        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let upper: Vec<String> = s
                .points
                .iter()
                .map(|p| {
                    let (m, sd) = pick(p);
                    format!("{:.2},{:.2}", x(p.epoch), axis.y(m + sd))
                })
                .collect();
            let lower: Vec<String> = s
                .points
                .iter()
                .rev()
                .map(|p| {
                    let (m, sd) = pick(p);
                    format!("{:.2},{:.2}", x(p.epoch), axis.y(m - sd))
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = s
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", x(p.epoch), axis.y(pick(p).0)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="line" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                line.join(" ")
            );
            for p in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                    x(p.epoch),
                    axis.y(pick(p).0)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }

    let legend_x = WIDTH - MARGIN_RIGHT + 15.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{legend_x:.2}" y="{:.2}" width="14" height="4" fill="{color}"/><text class="legend-entry" x="{:.2}" y="{:.2}">{}</text>"#,
            y - 2.0,
            legend_x + 20.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}

pub fn plot(summary_csv: &Path, out_svg: &Path) -> Result<()> {
    let text = fs::read_to_string(summary_csv).map_err(io_err(summary_csv))?;
    let rows = parse_summary_csv(&text, summary_csv)?;
    if let Some(parent) = out_svg.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out_svg, render_svg(rows)).map_err(io_err(out_svg))
}
