//! Deterministic SVG line plots from the CSV artifacts.

use std::fmt::Write as _;

use crate::error::{CliError, CliResult};

/// Values below this are clipped before taking log10.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Per-layer magnitude statistic from a `trace` profile, log10 scale.
    #[value(name = "magnitude_by_layer", alias = "magnitude-by-layer")]
    MagnitudeByLayer,
    /// Metric against attack size from an `eval --k-list` sweep.
    #[value(name = "metric_by_k", alias = "metric-by-k")]
    MetricByK,
    /// Dropout probability against step from a `train` log.
    #[value(name = "p_by_step", alias = "p-by-step")]
    PByStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Stat {
    #[default]
    Top1,
    Top2,
    Top3,
    Median,
}

impl Stat {
    fn column(self) -> &'static str {
        match self {
            Stat::Top1 => "top1",
            Stat::Top2 => "top2",
            Stat::Top3 => "top3",
            Stat::Median => "median",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// Points in data coordinates, sorted by x.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn parse(text: &str) -> CliResult<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rd
            .headers()
            .map_err(|e| CliError::Input(format!("CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rd
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("CSV: {e}")))?;
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("CSV is missing column `{name}`")))
    }

    fn number(&self, row: usize, col: usize) -> CliResult<f64> {
        let cell = &self.rows[row][col];
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::Input(format!(
                "CSV data row {}: column `{}` holds `{cell}`, not a finite number",
                row + 1,
                self.header[col]
            ))),
        }
    }
}

/// Groups `(series, x, y)` triples in first-appearance order.
fn group(triples: Vec<(String, f64, f64)>) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for (name, x, y) in triples {
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series {
                name,
                points: vec![(x, y)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Builds the figure for `kind` from CSV text.
pub fn figure_from_csv(kind: PlotKind, text: &str, stat: Stat) -> CliResult<Figure> {
    let t = Table::parse(text)?;
    let (xc, yc, sc, x_label, y_label, title) = match kind {
        PlotKind::MagnitudeByLayer => (
            t.column("layer")?,
            t.column(stat.column())?,
            Some(t.column("state_kind")?),
            "layer".to_string(),
            format!("log10 {}", stat.column()),
            format!("{} magnitude by layer", stat.column()),
        ),
        PlotKind::MetricByK => (
            t.column("k")?,
            t.column("value")?,
            t.header.iter().position(|h| h == "series"),
            "k".to_string(),
            "metric".to_string(),
            "metric by k".to_string(),
        ),
        PlotKind::PByStep => (
            t.column("step")?,
            t.column("p")?,
            None,
            "step".to_string(),
            "p".to_string(),
            "dropout probability by step".to_string(),
        ),
    };
    if t.rows.is_empty() {
        return Err(CliError::Input("CSV has no data rows".into()));
    }
    let mut triples = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let x = t.number(r, xc)?;
        let mut y = t.number(r, yc)?;
        if kind == PlotKind::MagnitudeByLayer {
            y = y.abs().max(LOG_FLOOR).log10();
        }
        let name = match sc {
            Some(c) => t.rows[r][c].to_string(),
            None => y_label.clone(),
        };
        triples.push((name, x, y));
    }
    Ok(Figure {
        title,
        x_label,
        y_label,
        series: group(triples),
    })
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders `fig` as SVG. Output depends only on `fig`.
pub fn render_svg(fig: &Figure) -> String {
    let pts = || fig.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = range(pts().map(|p| p.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&fig.title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{b:.3}" x2="{r:.3}" y2="{b:.3}" stroke="black"/>"#,
        b = TOP + ph,
        r = LEFT + pw
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.3}" stroke="black"/>"#,
        TOP + ph
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<text x="{px:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&fig.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.3}" text-anchor="middle" transform="rotate(-90 16 {:.3})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );
    for (i, series) in fig.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.3},{:.3}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&series.name),
            points.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROFILE: &str = "layer,state_kind,top1,top2,top3,median\n\
        1,h,2,1,1,0.1\n2,h,900,3,2,0.1\n1,inter,0,0,0,0\n2,inter,5000,4,3,0.2\n";

    #[test]
    fn magnitude_series_are_log_clipped() {
        let fig = figure_from_csv(PlotKind::MagnitudeByLayer, PROFILE, Stat::Top1).unwrap();
        let names: Vec<&str> = fig.series.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["h", "inter"]);
        assert_eq!(fig.series[1].points[0], (1.0, -12.0));
        assert!((fig.series[0].points[1].1 - 900f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn missing_column_is_named() {
        let err = figure_from_csv(PlotKind::PByStep, "step,loss\n0,1\n", Stat::Top1).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        let err = figure_from_csv(PlotKind::MagnitudeByLayer, "layer,top1\n1,2\n", Stat::Top1).unwrap_err();
        assert!(err.to_string().contains("`state_kind`"), "{err}");
    }

    #[test]
    fn rejects_empty_and_non_numeric() {
        assert!(figure_from_csv(PlotKind::PByStep, "step,p\n", Stat::Top1).is_err());
        assert!(figure_from_csv(PlotKind::PByStep, "step,p\n0,high\n", Stat::Top1).is_err());
        assert!(figure_from_csv(PlotKind::PByStep, "step,p\n0,NaN\n", Stat::Top1).is_err());
    }

    #[test]
    fn metric_by_k_groups_by_series_column() {
        let csv = "series,k,value\nzeroing,0,5\nretaining,0,900\nzeroing,5,80\n";
        let fig = figure_from_csv(PlotKind::MetricByK, csv, Stat::Top1).unwrap();
        assert_eq!(fig.series.len(), 2);
        assert_eq!(fig.series[0].points, [(0.0, 5.0), (5.0, 80.0)]);
    }

    #[test]
    fn svg_has_one_polyline_per_series_and_is_stable() {
        let fig = figure_from_csv(PlotKind::MagnitudeByLayer, PROFILE, Stat::Top1).unwrap();
        let a = render_svg(&fig);
        assert_eq!(a.matches("<polyline").count(), 2);
        assert_eq!(a, render_svg(&fig));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let fig = figure_from_csv(PlotKind::PByStep, "step,p\n0,0.5\n", Stat::Top1).unwrap();
        let svg = render_svg(&fig);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
