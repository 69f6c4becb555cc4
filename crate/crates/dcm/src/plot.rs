//! Deterministic SVG plots from metrics CSVs and mask exports. No
//! timestamps, no random ids: the same inputs always produce the same bytes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DcmError, Result};
use crate::instrument::METRICS_HEADER;
use crate::masking::MaskMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    AccuracyCurve,
    GradErrCurve,
    RatioSweep,
    MaskDensity,
}

impl FromStr for PlotKind {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy_curve" => Ok(PlotKind::AccuracyCurve),
            "grad_err_curve" => Ok(PlotKind::GradErrCurve),
            "ratio_sweep" => Ok(PlotKind::RatioSweep),
            "mask_density" => Ok(PlotKind::MaskDensity),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown plot kind `{other}`"
            ))),
        }
    }
}

/// One parsed metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricsFile {
    pub mask_strategy: String,
    pub mask_ratio: f64,
    pub head: String,
    pub seed: String,
    /// (epoch, train_loss, train_acc, test_acc, grad_err)
    pub rows: Vec<(usize, f64, f64, f64, f64)>,
}

pub fn parse_metrics_csv(path: &Path) -> Result<MetricsFile> {
    let display = path.to_string_lossy().into_owned();
    let malformed = |line: usize, message: String| DcmError::MalformedInput {
        path: display.clone(),
        line,
        message,
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty metrics file".into()))?;
    if header != METRICS_HEADER {
        return Err(malformed(1, format!("bad header, expected `{METRICS_HEADER}`")));
    }
    let mut out = MetricsFile {
        mask_strategy: String::new(),
        mask_ratio: 0.0,
        head: String::new(),
        seed: String::new(),
        rows: Vec::new(),
    };
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(malformed(idx + 1, format!("expected 11 fields, got {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| malformed(idx + 1, format!("bad {what} `{s}`")))
        };
        let epoch = fields[0]
            .parse::<usize>()
            .map_err(|_| malformed(idx + 1, format!("bad epoch `{}`", fields[0])))?;
        out.rows.push((
            epoch,
            num(fields[1], "train_loss")?,
            num(fields[2], "train_acc")?,
            num(fields[3], "test_acc")?,
            num(fields[4], "grad_err")?,
        ));
        out.mask_strategy = fields[5].to_string();
        out.mask_ratio = num(fields[6], "mask_ratio")?;
        out.head = fields[9].to_string();
        out.seed = fields[10].to_string();
    }
    if out.rows.is_empty() {
        return Err(malformed(2, "metrics file has no data rows".into()));
    }
    Ok(out)
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    markers: bool,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;

fn fmt_coord(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    if trimmed.is_empty() || trimmed == "-" {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

fn render_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(DcmError::InvalidParameter(
            "cannot plot an empty series".into(),
        ));
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="monospace" font-size="16" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        title
    );

    // Axes.
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        fmt_coord(MARGIN_LEFT),
        fmt_coord(MARGIN_TOP),
        fmt_coord(MARGIN_LEFT),
        fmt_coord(MARGIN_TOP + plot_h)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        fmt_coord(MARGIN_LEFT),
        fmt_coord(MARGIN_TOP + plot_h),
        fmt_coord(MARGIN_LEFT + plot_w),
        fmt_coord(MARGIN_TOP + plot_h)
    );

    // Ticks and grid.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let xp = sx(xv);
        let yp = sy(yv);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#dddddd"/>"##,
            fmt_coord(MARGIN_LEFT),
            fmt_coord(yp),
            fmt_coord(MARGIN_LEFT + plot_w),
            fmt_coord(yp)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="end">{}</text>"#,
            fmt_coord(MARGIN_LEFT - 6.0),
            fmt_coord(yp + 4.0),
            fmt_tick(yv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="middle">{}</text>"#,
            fmt_coord(xp),
            fmt_coord(MARGIN_TOP + plot_h + 18.0),
            fmt_tick(xv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="12" text-anchor="middle">{}</text>"#,
        fmt_coord(MARGIN_LEFT + plot_w / 2.0),
        fmt_coord(HEIGHT - 10.0),
        x_label
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="monospace" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        fmt_coord(MARGIN_TOP + plot_h / 2.0),
        fmt_coord(MARGIN_TOP + plot_h / 2.0),
        y_label
    );

    // Series.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut d = String::new();
        for (pi, &(x, y)) in s.points.iter().enumerate() {
            let cmd = if pi == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{} {} ", fmt_coord(sx(x)), fmt_coord(sy(y)));
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.trim_end(),
            color
        );
        if s.markers {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{}" cy="{}" r="3" fill="{}"/>"#,
                    fmt_coord(sx(x)),
                    fmt_coord(sy(y)),
                    color
                );
            }
        }
        // Legend.
        let ly = MARGIN_TOP + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/>"#,
            fmt_coord(WIDTH - MARGIN_RIGHT + 10.0),
            fmt_coord(ly),
            color
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11">{}</text>"#,
            fmt_coord(WIDTH - MARGIN_RIGHT + 28.0),
            fmt_coord(ly + 10.0),
            s.label
        );
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

fn legend_for(m: &MetricsFile) -> String {
    if m.mask_strategy == "none" {
        format!("{} unmasked seed={}", m.head, m.seed)
    } else {
        format!(
            "{} {} p={} seed={}",
            m.head,
            m.mask_strategy,
            fmt_tick(m.mask_ratio),
            m.seed
        )
    }
}

fn curve_chart(inputs: &[MetricsFile], kind: PlotKind) -> Result<String> {
    let (title, y_label, pick): (_, _, fn(&(usize, f64, f64, f64, f64)) -> f64) = match kind {
        PlotKind::AccuracyCurve => ("test accuracy", "accuracy", |r| r.3),
        PlotKind::GradErrCurve => ("gradient error (designated layer)", "epoch L2 error sum", |r| r.4),
        _ => unreachable!(),
    };
    let series: Vec<Series> = inputs
        .iter()
        .map(|m| Series {
            label: legend_for(m),
            points: m
                .rows
                .iter()
                .map(|r| (r.0 as f64, pick(r)))
                .collect(),
            markers: false,
        })
        .collect();
    render_line_chart(title, "epoch", y_label, &series)
}

fn ratio_sweep_chart(inputs: &[MetricsFile]) -> Result<String> {
    // Group runs by mask ratio; each group's value is the mean over runs of
    // the last-10-epoch mean test accuracy.
    let mut ratios: Vec<f64> = Vec::new();
    for m in inputs {
        if !ratios.iter().any(|&r| r == m.mask_ratio) {
            ratios.push(m.mask_ratio);
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut points = Vec::new();
    for &ratio in &ratios {
        let group: Vec<&MetricsFile> = inputs.iter().filter(|m| m.mask_ratio == ratio).collect();
        let mut acc = 0.0;
        for m in &group {
            let series: Vec<f64> = m.rows.iter().map(|r| r.3).collect();
            acc += crate::instrument::last_k_mean(&series, 10)?;
        }
        points.push((ratio, acc / group.len() as f64));
    }
    let head = &inputs[0].head;
    let series = [Series {
        label: format!("{head} last-10 mean accuracy"),
        points,
        markers: true,
    }];
    render_line_chart("accuracy vs masking ratio", "masking ratio p", "accuracy", &series)
}

fn mask_density_chart(mask: &MaskMatrix, ratio: f64, strategy: &str) -> String {
    let (d, c) = (mask.features(), mask.classes());
    let cell = 16.0_f64.min(640.0 / d as f64).min(360.0 / c as f64).max(4.0);
    let grid_w = cell * d as f64;
    let grid_h = cell * c as f64;
    let width = grid_w + 120.0;
    let height = grid_h + 80.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        fmt_coord(width),
        fmt_coord(height),
        fmt_coord(width),
        fmt_coord(height)
    );
    let _ = writeln!(svg, r#"<rect width="{}" height="{}" fill="white"/>"#, fmt_coord(width), fmt_coord(height));
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="monospace" font-size="13" text-anchor="middle">mask density: strategy={} p={} (dark = masked)</text>"#,
        fmt_coord(width / 2.0),
        strategy,
        fmt_tick(ratio)
    );
    for k in 0..d {
        for j in 0..c {
            let fill = if mask.is_kept(k, j) { "#e8eef7" } else { "#1f3a5f" };
            let _ = writeln!(
                svg,
                r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" stroke="#999999" stroke-width="0.5"/>"##,
                fmt_coord(40.0 + k as f64 * cell),
                fmt_coord(40.0 + j as f64 * cell),
                fmt_coord(cell),
                fmt_coord(cell),
                fill
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="11" text-anchor="middle">input node k</text>"#,
        fmt_coord(40.0 + grid_w / 2.0),
        fmt_coord(60.0 + grid_h)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="monospace" font-size="11" text-anchor="middle" transform="rotate(-90 16 {})">class j</text>"#,
        fmt_coord(40.0 + grid_h / 2.0),
        fmt_coord(40.0 + grid_h / 2.0)
    );
    let _ = writeln!(svg, "</svg>");
    svg
}

/// Render a plot of `kind` from the input files and write it to `out`.
/// Curve and sweep kinds read metrics CSVs; the mask-density kind reads a
/// mask debug-text export. Nothing is written when validation fails.
pub fn emit_plot(kind: PlotKind, inputs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(DcmError::InvalidParameter(
            "emit_plot needs at least one input file".into(),
        ));
    }
    let svg = match kind {
        PlotKind::AccuracyCurve | PlotKind::GradErrCurve => {
            let parsed: Vec<MetricsFile> = inputs
                .iter()
                .map(|p| parse_metrics_csv(p))
                .collect::<Result<_>>()?;
            curve_chart(&parsed, kind)?
        }
        PlotKind::RatioSweep => {
            let parsed: Vec<MetricsFile> = inputs
                .iter()
                .map(|p| parse_metrics_csv(p))
                .collect::<Result<_>>()?;
            ratio_sweep_chart(&parsed)?
        }
        PlotKind::MaskDensity => {
            if inputs.len() != 1 {
                return Err(DcmError::InvalidParameter(
                    "mask_density takes exactly one mask export file".into(),
                ));
            }
            let text = std::fs::read_to_string(&inputs[0])?;
            let (mask, ratio, strategy) =
                MaskMatrix::from_debug_text(&text, &inputs[0].to_string_lossy())?;
            mask_density_chart(&mask, ratio, &strategy)
        }
    };
    std::fs::write(out, svg)?;
    Ok(())
}
