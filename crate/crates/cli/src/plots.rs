//! Log-linear SVG charts of `n,estimate,stderr` tables.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

pub struct Series {
    /// Leading `#` lines, without the marker.
    pub comments: Vec<String>,
    pub rows: Vec<(f64, f64, f64)>,
}

pub fn parse_csv(text: &str) -> Result<Series, CliError> {
    let mut comments = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(c) = lines.peek().and_then(|l| l.strip_prefix('#')) {
        comments.push(c.trim().to_string());
        lines.next();
    }
    if lines.next().map(str::trim) != Some("n,estimate,stderr") {
        return Err(CliError::Compute(
            "csv lacks the n,estimate,stderr header".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Compute(format!("csv row {}: {e}", i + 2)))?;
        if cols.len() != 3 {
            return Err(CliError::Compute(format!(
                "csv row {} has {} columns",
                i + 2,
                cols.len()
            )));
        }
        rows.push((cols[0], cols[1], cols[2]));
    }
    Ok(Series { comments, rows })
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// |estimate| on a log axis against n, with ±stderr bars. Rows with a zero
/// estimate are left out.
pub fn render(title: &str, s: &Series) -> String {
    let pts: Vec<(f64, f64, f64, f64)> = s
        .rows
        .iter()
        .filter(|r| r.1.abs() > 0.0 && r.1.is_finite())
        .map(|&(n, e, err)| {
            let a = e.abs();
            (n, a, (a - err).max(a * 1e-3), a + err)
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    for c in &s.comments {
        let _ = writeln!(out, "<!-- {} -->", c.replace("--", "- -"));
    }
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    if pts.is_empty() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">no nonzero entries</text>"#,
            W / 2.0,
            H / 2.0
        );
        out.push_str("</svg>\n");
        return out;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.2.log10());
        y1 = y1.max(p.3.log10());
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |ly: f64| TOP + (y1 - ly) / (y1 - y0) * (H - TOP - BOTTOM);
    let (bx, by) = (H - BOTTOM, W - RIGHT);
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT} {TOP}V{bx}H{by}" fill="none" stroke="black"/>"#
    );
    let mut d = y0 as i64;
    while d <= y1 as i64 {
        let y = py(d as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{by}" y2="{y:.2}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">1e{d}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
        d += 1;
    }
    let ticks = 6;
    for i in 0..=ticks {
        let x = x0 + (x1 - x0) * i as f64 / ticks as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            px(x),
            bx + 18.0,
            fmt_tick(x)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">n</text>"#,
        W / 2.0,
        H - 8.0
    );
    let mut line = String::new();
    for (i, p) in pts.iter().enumerate() {
        let _ = write!(
            line,
            "{}{:.2} {:.2}",
            if i == 0 { "M" } else { "L" },
            px(p.0),
            py(p.1.log10())
        );
    }
    let _ = writeln!(out, r##"<path d="{line}" fill="none" stroke="#1f5fa8"/>"##);
    for p in &pts {
        let (x, y) = (px(p.0), py(p.1.log10()));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#1f5fa8"/><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#1f5fa8"/>"##,
            py(p.2.log10()),
            py(p.3.log10())
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.1}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One SVG next to every CSV in `dir`, in name order.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    let mut written = Vec::new();
    for csv in csvs {
        let series = parse_csv(&fs::read_to_string(&csv)?)?;
        let title = csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let svg = csv.with_extension("svg");
        fs::write(&svg, render(&title, &series))?;
        written.push(svg);
    }
    Ok(written)
}
