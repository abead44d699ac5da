//! Minimal standalone SVG 1.1 charts.

use std::fmt::Write;

use super::report::{CurveSeries, SummaryRow};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn axes(s: &mut String, y_max: f64, y_label: &str) {
    let (x0, y0) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    writeln!(s, r#"<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT
    )
    .unwrap();
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = y0 - plot_h * i as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{:.2}</text>"#,
            x0 - 6.0,
            y + 3.0,
            v
        )
        .unwrap();
        writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 3.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(s: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_TOP + 16.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT + 12.0;
        writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/>"#,
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            x + 14.0,
            y + 9.0,
            escape(name)
        )
        .unwrap();
    }
}

fn unique<'a>(items: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for it in items {
        if !out.contains(it) {
            out.push(it.clone());
        }
    }
    out
}

/// Grouped bar chart of mean Dice with standard-deviation whiskers: one group
/// per class, one bar per arm within it (one bar per summary row).
pub fn bars_svg(title: &str, rows: &[SummaryRow]) -> String {
    let mut s = header(title);
    axes(&mut s, 1.0, "Dice");
    let groups = unique(rows.iter().map(|r| &r.class));
    let arms = unique(rows.iter().map(|r| &r.arm));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / arms.len().max(1) as f64;
    for (g, group) in groups.iter().enumerate() {
        let gx = MARGIN_LEFT + group_w * g as f64 + group_w * 0.1;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            y0 + 16.0,
            escape(group)
        )
        .unwrap();
        for row in rows.iter().filter(|r| &r.class == group) {
            let a = arms.iter().position(|x| x == &row.arm).unwrap_or(0);
            let mean = if row.mean.is_finite() { row.mean.clamp(0.0, 1.0) } else { 0.0 };
            let h = plot_h * mean;
            let x = gx + bar_w * a as f64;
            writeln!(
                s,
                r#"<rect class="bar" x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{} / {}: {:.4}</title></rect>"#,
                y0 - h,
                bar_w * 0.9,
                PALETTE[a % PALETTE.len()],
                escape(&row.arm),
                escape(group),
                row.mean
            )
            .unwrap();
            if let Some(sd) = row.std {
                let cx = x + bar_w * 0.45;
                let top = y0 - plot_h * (mean + sd).min(1.0);
                let bottom = y0 - plot_h * (mean - sd).max(0.0);
                writeln!(
                    s,
                    r#"<path class="whisker" d="M {cx:.1} {top:.1} L {cx:.1} {bottom:.1} M {:.1} {top:.1} L {:.1} {top:.1} M {:.1} {bottom:.1} L {:.1} {bottom:.1}" stroke="black" fill="none"/>"#,
                    cx - 3.0,
                    cx + 3.0,
                    cx - 3.0,
                    cx + 3.0
                )
                .unwrap();
            }
        }
    }
    legend(&mut s, &arms);
    s.push_str("</svg>\n");
    s
}

/// Training and validation loss per epoch; validation dashed.
pub fn curves_svg(title: &str, series: &[CurveSeries]) -> String {
    let mut s = header(title);
    axes(&mut s, 1.0, "Dice loss");
    let max_epoch = series
        .iter()
        .flat_map(|c| c.records.iter().map(|r| r.epoch))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let labels = unique(series.iter().map(|c| &c.arm));
    for c in series {
        let colour = PALETTE[labels.iter().position(|l| l == &c.arm).unwrap_or(0) % PALETTE.len()];
        for (dash, pick) in [("", 0usize), (r#" stroke-dasharray="4 3""#, 1)] {
            let points: Vec<String> = c
                .records
                .iter()
                .map(|r| {
                    let v = if pick == 0 { r.train_loss } else { r.valid_loss };
                    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 1.0 };
                    format!(
                        "{:.1},{:.1}",
                        MARGIN_LEFT + plot_w * r.epoch as f64 / max_epoch,
                        y0 - plot_h * v
                    )
                })
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1"{dash}/>"#,
                points.join(" ")
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">epoch</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        y0 + 34.0
    )
    .unwrap();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}
