//! CSV columns to a static SVG line plot. Output depends only on the input
//! values, so the same CSV always gives the same bytes.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct CsvError {
    pub line: u64,
    pub message: String,
}

fn csv_error(line: u64, message: impl Into<String>) -> CsvError {
    CsvError {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads one series per `ys` column (per distinct `group` value when that
/// column exists). `x` defaults to the first column and `ys` to every other
/// column. Every used cell must parse as a number.
pub fn read_series(text: &str, x: Option<&str>, ys: &[&str], group: Option<&str>) -> Result<Vec<Series>, CsvError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e.position().map_or(1, |p| p.line()), e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_error(1, format!("no column named `{name}`")))
    };
    let xi = match x {
        Some(name) => column(name)?,
        None => 0,
    };
    let gi = group.and_then(|g| headers.iter().position(|h| h == g));
    let yis: Vec<usize> = if ys.is_empty() {
        (0..headers.len()).filter(|&i| i != xi && Some(i) != gi).collect()
    } else {
        ys.iter().map(|y| column(y)).collect::<Result<_, _>>()?
    };
    let mut groups: Vec<String> = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    if gi.is_none() {
        series.extend(yis.iter().map(|&i| Series {
            name: headers[i].to_string(),
            points: Vec::new(),
        }));
    }
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let number = |i: usize| -> Result<f64, CsvError> {
            let cell = row.get(i).unwrap_or("");
            cell.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_error(line, format!("column `{}`: `{cell}` is not a finite number", &headers[i])))
        };
        let xv = number(xi)?;
        let base = match gi {
            None => 0,
            Some(g) => {
                let key = row.get(g).unwrap_or("").to_string();
                let k = match groups.iter().position(|k| *k == key) {
                    Some(k) => k,
                    None => {
                        groups.push(key.clone());
                        series.extend(yis.iter().map(|&i| Series {
                            name: format!("{key} {}", &headers[i]),
                            points: Vec::new(),
                        }));
                        groups.len() - 1
                    }
                };
                k * yis.len()
            }
        };
        for (s, &i) in yis.iter().enumerate() {
            let yv = number(i)?;
            series[base + s].points.push((xv, yv));
        }
    }
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn span(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    Some(if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

pub fn render_svg(series: &[Series], x_label: &str) -> String {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black" stroke-width="1"/>"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    )
    .unwrap();
    let xs = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    if let (Some((xa, xb)), Some((ya, yb))) = (xs, ys) {
        let px = |v: f64| x0 + (v - xa) / (xb - xa) * (x1 - x0);
        let py = |v: f64| y0 - (v - ya) / (yb - ya) * (y0 - y1);
        for k in 0..TICKS {
            let f = k as f64 / (TICKS - 1) as f64;
            let (xv, yv) = (xa + f * (xb - xa), ya + f * (yb - ya));
            writeln!(
                out,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
                px(xv),
                y0 + 15.0,
                tick_label(xv)
            )
            .unwrap();
            writeln!(
                out,
                r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                py(yv) + 3.0,
                tick_label(yv)
            )
            .unwrap();
        }
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let points: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                points.join(" ")
            )
            .unwrap();
            writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end" fill="{color}">{}</text>"#,
                x1 - 5.0,
                y1 + 14.0 * (i as f64 + 1.0),
                escape(&s.name)
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
