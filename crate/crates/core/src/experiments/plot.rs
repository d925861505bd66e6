//! Line charts of sweep CSVs as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    /// `recipe,k,em` columns: EM against answer position.
    Position,
    /// `recipe,r,em` columns: EM against corruption ratio.
    Noise,
    /// `recipe,k,mode,ppl` columns: perplexity (log scale) against position.
    Perplexity,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Self::Position),
            "noise" => Ok(Self::Noise),
            "perplexity" => Ok(Self::Perplexity),
            _ => Err(Error::Argument(format!("unknown plot kind {s:?}"))),
        }
    }

    fn columns(self) -> (&'static str, &'static str) {
        match self {
            Self::Position => ("k", "em"),
            Self::Noise => ("r", "em"),
            Self::Perplexity => ("k", "ppl"),
        }
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            Self::Position => ("answer position k", "EM (%)"),
            Self::Noise => ("corruption ratio R", "mean EM (%)"),
            Self::Perplexity => ("position k", "perplexity (log10)"),
        }
    }
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn read_series(csv_text: &str, kind: PlotKind) -> Result<Series> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: "csv header".into(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (xname, yname) = kind.columns();
    let rc = col("recipe")?;
    let xc = col(xname)?;
    let yc = col(yname)?;
    let mc = if kind == PlotKind::Perplexity { Some(col("mode")?) } else { None };
    let mut series: Series = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            location: format!("csv row {}", i + 2),
            message: e.to_string(),
        })?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").parse::<f64>().map_err(|e| Error::Parse {
                location: format!("csv row {}", i + 2),
                message: format!("column {}: {e}", &headers[c]),
            })
        };
        let mut name = rec.get(rc).unwrap_or("").to_string();
        if let Some(m) = mc {
            name = format!("{name} {}", rec.get(m).unwrap_or(""));
        }
        let mut y = num(yc)?;
        if kind == PlotKind::Perplexity {
            y = y.max(f64::MIN_POSITIVE).log10();
        }
        series.entry(name).or_default().push((num(xc)?, y));
    }
    if series.is_empty() {
        return Err(Error::Validation("no rows to plot".into()));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(series)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if (hi - lo).abs() < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders CSV text as an SVG line chart, one polyline per series.
pub fn render_svg(csv_text: &str, kind: PlotKind) -> Result<String> {
    let series = read_series(csv_text, kind)?;
    let (x0, x1) = bounds(series.values().flatten().map(|p| p.0));
    let (mut y0, mut y1) = bounds(series.values().flatten().map(|p| p.1));
    if kind != PlotKind::Perplexity {
        y0 = y0.min(0.0);
        y1 = y1.max(100.0);
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let (xl, yl) = kind.labels();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ccc"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        esc(xl)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(yl)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads `csv_path` and writes the chart next to it with an `.svg`
/// extension. Returns the SVG path.
pub fn emit_plot(csv_path: &Path, kind: PlotKind) -> Result<std::path::PathBuf> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let svg = render_svg(&text, kind)?;
    let out = csv_path.with_extension("svg");
    std::fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}
