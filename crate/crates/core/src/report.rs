//! CSV and SVG artifacts for analysed cells.
//!
//! Every cell produces `<stem>_histogram.csv`, `<stem>_acceptance.csv`,
//! `<stem>_fit.csv`, `<stem>_comparison.csv` and three SVG figures. Numbers
//! are written with Rust's shortest round-trip formatting, so the readers
//! here recover exactly the values that were written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::{
    AcceptanceCurve, BandPoint, CellAnalysis, CellId, ComparisonReport, CurvePoint,
    EquilibriumGap, Histogram, PiecewiseFit, SegmentFit, SegmentStatus, Weighting,
};

pub const SIMULATED: &str = "simulated";
pub const REFERENCE: &str = "reference";
pub const CI_METHOD: &str =
    "pointwise t-interval on the mean response; residual dof = points - 2; no clamping to [0, 1]";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<T: FromStr>(s: &str) -> Result<Option<T>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad value {s:?}"))
    }
}

fn parse<T: FromStr>(s: &str) -> Result<T, String> {
    parse_opt(s)?.ok_or_else(|| "missing value".to_string())
}

struct Table {
    path: PathBuf,
    rows: Vec<BTreeMap<String, String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, ReportError> {
        let csv_err = |source| ReportError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            rows.push(
                headers
                    .iter()
                    .zip(record.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
        Ok(Self {
            path: path.to_path_buf(),
            rows,
        })
    }

    fn err(&self, row: usize, message: impl Into<String>) -> ReportError {
        ReportError::Format {
            path: self.path.clone(),
            message: format!("row {}: {}", row + 1, message.into()),
        }
    }

    fn get<'a>(&self, row: &'a BTreeMap<String, String>, i: usize, col: &str) -> Result<&'a str, ReportError> {
        row.get(col)
            .map(String::as_str)
            .ok_or_else(|| self.err(i, format!("missing column {col}")))
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        writer.write_record(row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn histogram_rows(series: &str, h: &Histogram) -> Vec<Vec<String>> {
    (0..h.counts.len())
        .map(|i| {
            let (lo, hi) = h.bin_range(i);
            vec![
                series.to_string(),
                h.bin_width.to_string(),
                lo.to_string(),
                hi.to_string(),
                h.counts[i].to_string(),
                h.frequencies[i].to_string(),
            ]
        })
        .collect()
}

pub fn write_histograms(path: &Path, series: &[(&str, &Histogram)]) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = series
        .iter()
        .flat_map(|(name, h)| histogram_rows(name, h))
        .collect();
    write_csv(
        path,
        &["series", "bin_width", "bin_start", "bin_end", "count", "frequency"],
        &rows,
    )
}

pub fn read_histograms(path: &Path) -> Result<BTreeMap<String, Histogram>, ReportError> {
    let table = Table::read(path)?;
    let mut out: BTreeMap<String, Histogram> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let field = |col: &str| table.get(row, i, col);
        let series = field("series")?.to_string();
        let bin_width: u32 = parse(field("bin_width")?).map_err(|m| table.err(i, m))?;
        let h = out.entry(series).or_insert_with(|| Histogram {
            bin_width,
            bin_starts: Vec::new(),
            counts: Vec::new(),
            frequencies: Vec::new(),
        });
        h.bin_starts
            .push(parse(field("bin_start")?).map_err(|m| table.err(i, m))?);
        h.counts.push(parse(field("count")?).map_err(|m| table.err(i, m))?);
        h.frequencies
            .push(parse(field("frequency")?).map_err(|m| table.err(i, m))?);
    }
    Ok(out)
}

pub fn write_curves(path: &Path, series: &[(&str, &AcceptanceCurve)]) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = series
        .iter()
        .flat_map(|(name, c)| {
            c.points.iter().map(move |p| {
                vec![
                    name.to_string(),
                    p.offer.to_string(),
                    p.accepted.to_string(),
                    p.total.to_string(),
                    p.rate.to_string(),
                ]
            })
        })
        .collect();
    write_csv(path, &["series", "offer", "accepted", "total", "rate"], &rows)
}

pub fn read_curves(path: &Path) -> Result<BTreeMap<String, AcceptanceCurve>, ReportError> {
    let table = Table::read(path)?;
    let mut out: BTreeMap<String, AcceptanceCurve> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let field = |col: &str| table.get(row, i, col);
        let point = CurvePoint {
            offer: parse(field("offer")?).map_err(|m| table.err(i, m))?,
            accepted: parse(field("accepted")?).map_err(|m| table.err(i, m))?,
            total: parse(field("total")?).map_err(|m| table.err(i, m))?,
            rate: parse(field("rate")?).map_err(|m| table.err(i, m))?,
        };
        out.entry(field("series")?.to_string())
            .or_insert_with(|| AcceptanceCurve { points: Vec::new() })
            .points
            .push(point);
    }
    Ok(out)
}

fn fit_rows(series: &str, fit: &PiecewiseFit) -> Vec<Vec<String>> {
    let row = |segment: &str, name: &str, offer: Option<u32>, value: String| {
        vec![
            series.to_string(),
            segment.to_string(),
            name.to_string(),
            offer.map(|o| o.to_string()).unwrap_or_default(),
            value,
        ]
    };
    let mut rows = vec![
        row("all", "breakpoint", None, fit.breakpoint.to_string()),
        row("all", "weighting", None, fit.weighting.as_str().to_string()),
        row("all", "confidence", None, fit.confidence.to_string()),
        row("all", "ci_method", None, CI_METHOD.to_string()),
        row("all", "jump", None, fmt_opt(fit.jump)),
    ];
    for (segment, seg) in [("left", &fit.left), ("right", &fit.right)] {
        rows.push(row(segment, "status", None, seg.status.as_str().to_string()));
        rows.push(row(segment, "slope", None, seg.slope.to_string()));
        rows.push(row(segment, "intercept", None, seg.intercept.to_string()));
        rows.push(row(segment, "n_points", None, seg.n_points.to_string()));
        rows.push(row(segment, "total_weight", None, seg.total_weight.to_string()));
        rows.push(row(segment, "residual_dof", None, seg.residual_dof.to_string()));
        for &o in &seg.offers {
            rows.push(row(segment, "data_offer", Some(o), String::new()));
        }
        for b in &seg.band {
            rows.push(row(segment, "fitted", Some(b.offer), b.fitted.to_string()));
            rows.push(row(segment, "lower", Some(b.offer), fmt_opt(b.lower)));
            rows.push(row(segment, "upper", Some(b.offer), fmt_opt(b.upper)));
        }
    }
    rows
}

pub fn write_fits(path: &Path, series: &[(&str, &PiecewiseFit)]) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = series
        .iter()
        .flat_map(|(name, f)| fit_rows(name, f))
        .collect();
    write_csv(path, &["series", "segment", "name", "offer", "value"], &rows)
}

#[derive(Default)]
struct FitBuilder {
    scalars: BTreeMap<(String, String), String>,
    data_offers: BTreeMap<String, Vec<u32>>,
    band: BTreeMap<String, BTreeMap<u32, [Option<String>; 3]>>,
}

impl FitBuilder {
    fn scalar(&self, segment: &str, name: &str) -> Result<&str, String> {
        self.scalars
            .get(&(segment.to_string(), name.to_string()))
            .map(String::as_str)
            .ok_or_else(|| format!("missing {segment}/{name}"))
    }

    fn segment(&self, segment: &str) -> Result<SegmentFit, String> {
        let mut band = Vec::new();
        for (&offer, [fitted, lower, upper]) in self.band.get(segment).into_iter().flatten() {
            let fitted = fitted.as_deref().ok_or_else(|| format!("{segment}: no fitted value at {offer}"))?;
            band.push(BandPoint {
                offer,
                fitted: parse(fitted)?,
                lower: parse_opt(lower.as_deref().unwrap_or(""))?,
                upper: parse_opt(upper.as_deref().unwrap_or(""))?,
            });
        }
        Ok(SegmentFit {
            status: SegmentStatus::from_str(self.scalar(segment, "status")?)
                .map_err(|e| e.to_string())?,
            slope: parse(self.scalar(segment, "slope")?)?,
            intercept: parse(self.scalar(segment, "intercept")?)?,
            n_points: parse(self.scalar(segment, "n_points")?)?,
            total_weight: parse(self.scalar(segment, "total_weight")?)?,
            residual_dof: parse(self.scalar(segment, "residual_dof")?)?,
            offers: self.data_offers.get(segment).cloned().unwrap_or_default(),
            band,
        })
    }

    fn build(&self) -> Result<PiecewiseFit, String> {
        Ok(PiecewiseFit {
            breakpoint: parse(self.scalar("all", "breakpoint")?)?,
            weighting: Weighting::from_str(self.scalar("all", "weighting")?)
                .map_err(|e| e.to_string())?,
            confidence: parse(self.scalar("all", "confidence")?)?,
            left: self.segment("left")?,
            right: self.segment("right")?,
            jump: parse_opt(self.scalar("all", "jump")?)?,
        })
    }
}

pub fn read_fits(path: &Path) -> Result<BTreeMap<String, PiecewiseFit>, ReportError> {
    let table = Table::read(path)?;
    let mut builders: BTreeMap<String, FitBuilder> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let field = |col: &str| table.get(row, i, col);
        let b = builders.entry(field("series")?.to_string()).or_default();
        let segment = field("segment")?.to_string();
        let name = field("name")?;
        let value = field("value")?.to_string();
        let offer: Option<u32> = parse_opt(field("offer")?).map_err(|m| table.err(i, m))?;
        match (name, offer) {
            ("data_offer", Some(o)) => b.data_offers.entry(segment).or_default().push(o),
            ("fitted" | "lower" | "upper", Some(o)) => {
                let slot = match name {
                    "fitted" => 0,
                    "lower" => 1,
                    _ => 2,
                };
                b.band.entry(segment).or_default().entry(o).or_default()[slot] = Some(value);
            }
            (_, None) => {
                b.scalars.insert((segment, name.to_string()), value);
            }
            _ => return Err(table.err(i, format!("unexpected offer on {name}"))),
        }
    }
    builders
        .into_iter()
        .map(|(series, b)| {
            b.build()
                .map(|fit| (series, fit))
                .map_err(|message| ReportError::Format {
                    path: path.to_path_buf(),
                    message,
                })
        })
        .collect()
}

const COMPARISON_HEADER: [&str; 11] = [
    "run_id",
    "pattern",
    "temperature",
    "n_proposers",
    "n_responders",
    "tv_distance",
    "mean_offer_gap",
    "mean_offer",
    "rejection_rate",
    "jump",
    "reference_jump",
];

fn comparison_row(c: &ComparisonReport) -> Vec<String> {
    vec![
        c.cell.run_id.clone(),
        c.cell.pattern.clone(),
        c.cell.temperature.to_string(),
        c.n_proposers.to_string(),
        c.n_responders.to_string(),
        fmt_opt(c.tv_distance),
        fmt_opt(c.mean_offer_gap),
        fmt_opt(c.equilibrium.mean_offer),
        fmt_opt(c.equilibrium.rejection_rate),
        fmt_opt(c.jump),
        fmt_opt(c.reference_jump),
    ]
}

/// Writes one row per cell. Empty fields mean the statistic does not apply.
pub fn write_comparisons(path: &Path, reports: &[ComparisonReport]) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = reports.iter().map(comparison_row).collect();
    write_csv(path, &COMPARISON_HEADER, &rows)
}

pub fn read_comparisons(path: &Path) -> Result<Vec<ComparisonReport>, ReportError> {
    let table = Table::read(path)?;
    let mut out = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        let field = |col: &str| table.get(row, i, col);
        let opt = |col: &str| -> Result<Option<f64>, ReportError> {
            parse_opt(field(col)?).map_err(|m| table.err(i, m))
        };
        out.push(ComparisonReport {
            cell: CellId {
                run_id: field("run_id")?.to_string(),
                pattern: field("pattern")?.to_string(),
                temperature: parse(field("temperature")?).map_err(|m| table.err(i, m))?,
            },
            n_proposers: parse(field("n_proposers")?).map_err(|m| table.err(i, m))?,
            n_responders: parse(field("n_responders")?).map_err(|m| table.err(i, m))?,
            tv_distance: opt("tv_distance")?,
            mean_offer_gap: opt("mean_offer_gap")?,
            equilibrium: EquilibriumGap {
                mean_offer: opt("mean_offer")?,
                rejection_rate: opt("rejection_rate")?,
            },
            jump: opt("jump")?,
            reference_jump: opt("reference_jump")?,
        });
    }
    Ok(out)
}

/// Writes all artifacts for one cell into `dir` and returns their paths.
pub fn emit_cell_report(analysis: &CellAnalysis, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let stem = analysis.comparison.cell.stem();
    let path = |suffix: &str| dir.join(format!("{stem}_{suffix}"));
    let mut written = Vec::new();

    let mut histograms = Vec::new();
    if let Some(h) = &analysis.histogram {
        histograms.push((SIMULATED, h));
    }
    histograms.push((REFERENCE, &analysis.reference_histogram));
    let p = path("histogram.csv");
    write_histograms(&p, &histograms)?;
    written.push(p);

    let mut curves = Vec::new();
    if let Some(c) = &analysis.curve {
        curves.push((SIMULATED, c));
    }
    curves.push((REFERENCE, &analysis.reference_curve));
    let p = path("acceptance.csv");
    write_curves(&p, &curves)?;
    written.push(p);

    let mut fits = Vec::new();
    if let Some(f) = &analysis.fit {
        fits.push((SIMULATED, f));
    }
    fits.push((REFERENCE, &analysis.reference_fit));
    let p = path("fit.csv");
    write_fits(&p, &fits)?;
    written.push(p);

    let p = path("comparison.csv");
    write_comparisons(&p, std::slice::from_ref(&analysis.comparison))?;
    written.push(p);

    let title = format!(
        "pattern {} at temperature {}",
        analysis.comparison.cell.pattern,
        crate::analysis::format_temperature(analysis.comparison.cell.temperature)
    );
    for (suffix, svg) in [
        ("histogram.svg", histogram_svg(&title, &histograms)),
        ("regression.svg", regression_svg(&title, &curves, &fits)),
        ("bubbles.svg", bubble_svg(&title, &curves)),
    ] {
        let p = path(suffix);
        write_text(&p, &svg)?;
        written.push(p);
    }
    Ok(written)
}

// Plot area in SVG user units.
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const COLORS: [(&str, &str); 2] = [(SIMULATED, "#1f77b4"), (REFERENCE, "#ff7f0e")];

fn color(series: &str) -> &'static str {
    COLORS
        .iter()
        .find(|(s, _)| *s == series)
        .map(|(_, c)| *c)
        .unwrap_or("#555555")
}

struct Frame {
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, offer: f64) -> f64 {
        LEFT + offer / 100.0 * (W - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (self.y_max - v) / (self.y_max - self.y_min) * (H - TOP - BOTTOM)
    }

    fn open(&self, title: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let (x0, x1) = (self.x(0.0), self.x(100.0));
        let (y0, y1) = (self.y(self.y_min), self.y(self.y_max));
        let _ = writeln!(
            s,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
        );
        for tick in (0..=100).step_by(10) {
            let x = self.x(f64::from(tick));
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{tick}</text>"#,
                y0 + 4.0,
                y0 + 18.0
            );
        }
        for i in 0..=4 {
            let v = self.y_min + (self.y_max - self.y_min) * f64::from(i) / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                trim_float(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">offer (coins)</text>"#,
            (x0 + x1) / 2.0,
            H - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        s
    }

    fn legend(&self, s: &mut String, series: &[&str]) {
        for (i, name) in series.iter().enumerate() {
            let y = TOP + 10.0 + 16.0 * i as f64;
            let x = W - RIGHT - 110.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
                y - 9.0,
                color(name),
                x + 15.0,
                y
            );
        }
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn histogram_svg(title: &str, series: &[(&str, &Histogram)]) -> String {
    let y_max = series
        .iter()
        .flat_map(|(_, h)| h.frequencies.iter().copied())
        .fold(0.0_f64, f64::max)
        .max(0.05);
    let frame = Frame {
        y_min: 0.0,
        y_max: (y_max * 10.0).ceil() / 10.0,
    };
    let mut s = frame.open(&format!("Proposer offers, {title}"), "share of proposers");
    let n = series.len().max(1) as f64;
    for (k, (name, h)) in series.iter().enumerate() {
        for (i, &f) in h.frequencies.iter().enumerate() {
            let (lo, _) = h.bin_range(i);
            let x0 = frame.x(f64::from(lo));
            let width = frame.x(f64::from(lo + h.bin_width)) - x0;
            let bar = width / n;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.8"/>"#,
                x0 + bar * k as f64,
                frame.y(f),
                bar,
                frame.y(0.0) - frame.y(f),
                color(name)
            );
        }
    }
    frame.legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn fit_range(curves: &[(&str, &AcceptanceCurve)], fits: &[(&str, &PiecewiseFit)]) -> (f64, f64) {
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    for (_, c) in curves {
        for p in &c.points {
            lo = lo.min(p.rate);
            hi = hi.max(p.rate);
        }
    }
    for (_, f) in fits {
        for b in f.band_points() {
            for v in [Some(b.fitted), b.lower, b.upper].into_iter().flatten() {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    ((lo * 4.0).floor() / 4.0, (hi * 4.0).ceil() / 4.0)
}

pub fn regression_svg(
    title: &str,
    curves: &[(&str, &AcceptanceCurve)],
    fits: &[(&str, &PiecewiseFit)],
) -> String {
    let (y_min, y_max) = fit_range(curves, fits);
    let frame = Frame { y_min, y_max };
    let mut s = frame.open(&format!("Acceptance rate, {title}"), "acceptance rate");
    for (name, fit) in fits {
        let c = color(name);
        for seg in [&fit.left, &fit.right] {
            let banded: Vec<&BandPoint> = seg
                .band
                .iter()
                .filter(|b| b.lower.is_some() && b.upper.is_some())
                .collect();
            if banded.len() > 1 {
                let mut d = String::new();
                for (i, b) in banded.iter().enumerate() {
                    let _ = write!(
                        d,
                        "{}{},{} ",
                        if i == 0 { "M" } else { "L" },
                        frame.x(f64::from(b.offer)),
                        frame.y(b.upper.unwrap_or(b.fitted))
                    );
                }
                for b in banded.iter().rev() {
                    let _ = write!(
                        d,
                        "L{},{} ",
                        frame.x(f64::from(b.offer)),
                        frame.y(b.lower.unwrap_or(b.fitted))
                    );
                }
                let _ = writeln!(s, r#"<path d="{}Z" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, d);
            }
            if let (Some(first), Some(last)) = (seg.band.first(), seg.band.last()) {
                let _ = writeln!(
                    s,
                    r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{c}" stroke-width="2"/>"#,
                    frame.x(f64::from(first.offer)),
                    frame.y(first.fitted),
                    frame.x(f64::from(last.offer)),
                    frame.y(last.fitted)
                );
            }
        }
        let x = frame.x(f64::from(fit.breakpoint));
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
            frame.y(y_min),
            frame.y(y_max)
        );
    }
    for (name, curve) in curves {
        for p in &curve.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="3" fill="{}"/>"#,
                frame.x(f64::from(p.offer)),
                frame.y(p.rate),
                color(name)
            );
        }
    }
    frame.legend(&mut s, &curves.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Acceptance rate per offer with marker area proportional to the number of
/// responders who saw that offer.
pub fn bubble_svg(title: &str, curves: &[(&str, &AcceptanceCurve)]) -> String {
    let frame = Frame {
        y_min: 0.0,
        y_max: 1.0,
    };
    let mut s = frame.open(&format!("Responses by offer, {title}"), "acceptance rate");
    let max_total = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.total))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    for (name, curve) in curves {
        for p in &curve.points {
            let r = 2.0 + 18.0 * (p.total as f64 / max_total).sqrt();
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="{r}" fill="{}" fill-opacity="0.45" stroke="{}"><title>offer {}: {}/{} accepted</title></circle>"#,
                frame.x(f64::from(p.offer)),
                frame.y(p.rate),
                color(name),
                color(name),
                p.offer,
                p.accepted,
                p.total
            );
        }
    }
    frame.legend(&mut s, &curves.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze_cell, AnalysisOptions, CellResults};
    use crate::reference::{synthesize_reference, ResponderSample};

    fn sample_analysis() -> CellAnalysis {
        let reference = synthesize_reference(3, 1000).unwrap();
        let cell = CellResults {
            id: CellId {
                run_id: "r".into(),
                pattern: "B".into(),
                temperature: 0.5,
            },
            proposer_offers: vec![50, 50, 40, 33, 0, 100],
            responder_samples: (0..=100)
                .step_by(5)
                .map(|o| ResponderSample {
                    offer: o,
                    accepted: o % 10 == 0 || o >= 50,
                })
                .collect(),
        };
        analyze_cell(&cell, &reference, &AnalysisOptions::default()).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let a = sample_analysis();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_cell_report(&a, dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        assert!(files.iter().all(|f| f.exists()));
        assert!(files[0].ends_with("B_0.5_histogram.csv"));

        let h = read_histograms(&files[0]).unwrap();
        assert_eq!(h[SIMULATED], *a.histogram.as_ref().unwrap());
        assert_eq!(h[REFERENCE], a.reference_histogram);
        let c = read_curves(&files[1]).unwrap();
        assert_eq!(c[SIMULATED], *a.curve.as_ref().unwrap());
        assert_eq!(c[REFERENCE], a.reference_curve);
        let f = read_fits(&files[2]).unwrap();
        assert_eq!(f[SIMULATED], *a.fit.as_ref().unwrap());
        assert_eq!(f[REFERENCE], a.reference_fit);
        assert_eq!(read_comparisons(&files[3]).unwrap(), vec![a.comparison.clone()]);
    }

    #[test]
    fn svgs_are_well_formed_enough() {
        let a = sample_analysis();
        let dir = tempfile::tempdir().unwrap();
        for f in emit_cell_report(&a, dir.path()).unwrap() {
            if f.extension().is_some_and(|e| e == "svg") {
                let text = fs::read_to_string(&f).unwrap();
                assert!(text.starts_with("<svg"));
                assert!(text.trim_end().ends_with("</svg>"));
                assert!(!text.contains("NaN"));
            }
        }
    }

    #[test]
    fn proposer_only_cell_omits_simulated_curve() {
        let reference = synthesize_reference(3, 1000).unwrap();
        let cell = CellResults {
            id: CellId {
                run_id: "r".into(),
                pattern: "A".into(),
                temperature: 2.0,
            },
            proposer_offers: vec![10, 20],
            responder_samples: vec![],
        };
        let a = analyze_cell(&cell, &reference, &AnalysisOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_cell_report(&a, dir.path()).unwrap();
        let c = read_curves(&files[1]).unwrap();
        assert!(!c.contains_key(SIMULATED));
        let cmp = read_comparisons(&files[3]).unwrap();
        assert_eq!(cmp[0].jump, None);
        assert_eq!(cmp[0].equilibrium.rejection_rate, None);
    }
}
