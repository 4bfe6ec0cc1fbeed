//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bound::{BoundTrajectory, PerSampleRecord};
use crate::mapping::EpochLog;
use crate::stats::{pearson, regret, CorrelationReport};
use crate::{Error, Result};

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `losses.csv`: epoch, gan_a, gan_b, cycle_a, cycle_b, distance, disc_estimate.
pub fn write_losses_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["epoch", "gan_a", "gan_b", "cycle_a", "cycle_b", "distance", "disc_estimate"],
        log.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_opt(r.losses.gan_a),
                fmt_opt(r.losses.gan_b),
                fmt_opt(r.losses.cycle_a),
                fmt_opt(r.losses.cycle_b),
                fmt_opt(r.losses.distance_loss),
                r.disc_estimate.to_string(),
            ]
        }),
    )
}

/// `trajectory.csv`: epoch, bound, disc_g1, disc_g2, truth, valid.
pub fn write_trajectory_csv(traj: &BoundTrajectory, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["epoch", "bound", "disc_g1", "disc_g2", "truth", "valid"],
        traj.records.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.bound.to_string(),
                r.disc_g1.to_string(),
                r.disc_g2.to_string(),
                fmt_opt(r.truth),
                r.valid.to_string(),
            ]
        }),
    )
}

/// `per_sample.csv`: index, x0..x{d-1}, bound_x, truth_x, disc_g2.
pub fn write_per_sample_csv(records: &[PerSampleRecord], path: &Path) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.x.len());
    let xs: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let mut header = vec!["index"];
    header.extend(xs.iter().map(String::as_str));
    header.extend(["bound_x", "truth_x", "disc_g2"]);
    write_csv(
        path,
        &header,
        records.iter().map(|r| {
            let mut row = vec![r.index.to_string()];
            row.extend(r.x.iter().map(f64::to_string));
            row.extend([r.bound_x.to_string(), fmt_opt(r.truth_x), r.disc_g2.to_string()]);
            row
        }),
    )
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    })
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: Option<&str>) -> Result<T> {
    raw.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Ingest {
        file: path.to_path_buf(),
        line,
        msg: format!("bad or missing {name}"),
    })
}

fn parse_opt(path: &Path, line: usize, name: &str, raw: Option<&str>) -> Result<Option<f64>> {
    match raw {
        Some("") | None => Ok(None),
        Some(v) => parse_field(path, line, name, Some(v)).map(Some),
    }
}

/// Reads a file written by [`write_trajectory_csv`]. Witness truths are not
/// part of the file and come back empty.
pub fn read_trajectory_csv(path: &Path) -> Result<BoundTrajectory> {
    let mut rdr = open_csv(path)?;
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        records.push(crate::bound::BoundRecord {
            epoch: parse_field(path, line, "epoch", row.get(0))?,
            bound: parse_field(path, line, "bound", row.get(1))?,
            disc_g1: parse_field(path, line, "disc_g1", row.get(2))?,
            disc_g2: parse_field(path, line, "disc_g2", row.get(3))?,
            truth: parse_opt(path, line, "truth", row.get(4))?,
            witness_truth: None,
            valid: parse_field(path, line, "valid", row.get(5))?,
        });
    }
    Ok(BoundTrajectory { records })
}

/// Reads a file written by [`write_per_sample_csv`].
pub fn read_per_sample_csv(path: &Path) -> Result<Vec<PerSampleRecord>> {
    let mut rdr = open_csv(path)?;
    let width = rdr.headers()?.len();
    if width < 4 {
        return Err(Error::Ingest {
            file: path.to_path_buf(),
            line: 1,
            msg: "expected index, x columns, bound_x, truth_x, disc_g2".into(),
        });
    }
    let dim = width - 4;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let x = (0..dim)
            .map(|k| parse_field(path, line, "x", row.get(1 + k)))
            .collect::<Result<Vec<f64>>>()?;
        out.push(PerSampleRecord {
            index: parse_field(path, line, "index", row.get(0))?,
            x,
            bound_x: parse_field(path, line, "bound_x", row.get(1 + dim))?,
            truth_x: parse_opt(path, line, "truth_x", row.get(2 + dim))?,
            disc_g2: parse_field(path, line, "disc_g2", row.get(3 + dim))?,
        });
    }
    Ok(out)
}

/// Evaluation of a bound trajectory against the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub epochs: usize,
    pub valid_epochs: usize,
    /// Pearson r of bound against truth over valid epochs.
    pub correlation: Option<CorrelationReport>,
    pub p_text: Option<String>,
    /// Over valid epochs.
    pub regret: Option<f64>,
    /// `max - min` of the truth over all epochs.
    pub truth_range: Option<f64>,
    pub eps2_hat: Option<f64>,
    /// Share of valid epochs with `bound + eps2_hat >= truth`.
    pub dominance: Option<f64>,
}

pub fn trajectory_stats(traj: &BoundTrajectory) -> TrajectoryStats {
    let valid: Vec<_> = traj.valid().filter(|r| r.truth.is_some()).collect();
    let bounds: Vec<f64> = valid.iter().map(|r| r.bound).collect();
    let truths: Vec<f64> = valid.iter().filter_map(|r| r.truth).collect();
    let correlation = pearson(&bounds, &truths).ok();
    let all: Vec<f64> = traj.records.iter().filter_map(|r| r.truth).collect();
    let truth_range = (!all.is_empty()).then(|| {
        let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        hi - lo
    });
    let eps2_hat = traj.eps2_hat();
    let dominance = eps2_hat.filter(|_| !valid.is_empty()).map(|e2| {
        let ok = valid.iter().filter(|r| r.bound + e2 >= r.truth.unwrap_or(f64::INFINITY)).count();
        ok as f64 / valid.len() as f64
    });
    TrajectoryStats {
        epochs: traj.records.len(),
        valid_epochs: traj.valid().count(),
        p_text: correlation.map(|c| c.p_text()),
        correlation,
        regret: regret(&bounds, &truths).ok(),
        truth_range,
        eps2_hat,
        dominance,
    }
}

/// Pearson r of `bound_x` against `truth_x` over records that have a truth.
pub fn per_sample_correlation(records: &[PerSampleRecord]) -> Option<CorrelationReport> {
    let (b, t): (Vec<f64>, Vec<f64>) = records.iter().filter_map(|r| r.truth_x.map(|t| (r.bound_x, t))).unzip();
    pearson(&b, &t).ok()
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// A named sequence of `(x, y)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open_svg(out: &mut String, title: &str, x_label: &str, y_label: &str, frame: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(out, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="ticks">"#);
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = frame.x.0 + f * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + f * (frame.y.1 - frame.y.0);
        let (tx, ty) = (frame.px(xv), frame.py(yv));
        let _ = writeln!(out, r#"<line class="xtick" x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(out, r#"<text x="{tx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 20.0, tick_label(xv));
        let _ = writeln!(out, r#"<line class="ytick" x1="{:.2}" y1="{ty:.2}" x2="{x0}" y2="{ty:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, ty + 4.0, tick_label(yv));
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 15.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let x = WIDTH - RIGHT - 150.0;
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(name));
    }
}

/// Line chart with one polyline per series.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame {
        x: extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut out = String::new();
    open_svg(&mut out, title, x_label, y_label, &frame);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" "),
            escape(&s.name)
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Scatter plot of `(x, y)` points with a free-text annotation.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], annotation: &str) -> String {
    let frame = Frame {
        x: extent(points.iter().map(|p| p.0)),
        y: extent(points.iter().map(|p| p.1)),
    };
    let mut out = String::new();
    open_svg(&mut out, title, x_label, y_label, &frame);
    let _ = writeln!(out, r#"<g class="points" fill="{}">"#, PALETTE[0]);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4"/>"#, frame.px(x), frame.py(y));
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<text class="annotation" x="{}" y="{}">{}</text>"#, LEFT + 10.0, TOP + 15.0, escape(annotation));
    out.push_str("</svg>\n");
    out
}

/// Bound and ground truth over epochs; valid epochs are marked.
pub fn trajectory_svg(traj: &BoundTrajectory) -> String {
    let bound: Vec<(f64, f64)> = traj.records.iter().map(|r| (r.epoch as f64, r.bound)).collect();
    let mut series = vec![Series::new("bound", bound)];
    if traj.records.iter().all(|r| r.truth.is_some()) && !traj.records.is_empty() {
        series.push(Series::new(
            "ground truth",
            traj.records.iter().map(|r| (r.epoch as f64, r.truth.unwrap())).collect(),
        ));
    }
    let mut svg = line_chart_svg("Bound and ground-truth error per epoch", "epoch", "L1 risk", &series);
    let frame = Frame {
        x: extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut marks = String::from("<g class=\"valid\" fill=\"none\" stroke=\"#2ca02c\">\n");
    for r in traj.records.iter().filter(|r| r.valid) {
        let _ = writeln!(marks, r#"<circle cx="{:.2}" cy="{:.2}" r="5"/>"#, frame.px(r.epoch as f64), frame.py(r.bound));
    }
    marks.push_str("</g>\n");
    let at = svg.rfind("</svg>").expect("closing tag");
    svg.insert_str(at, &marks);
    svg
}

/// Per-sample bound against per-sample truth, annotated with Pearson's r.
pub fn per_sample_svg(records: &[PerSampleRecord]) -> String {
    let points: Vec<(f64, f64)> = records.iter().filter_map(|r| r.truth_x.map(|t| (r.bound_x, t))).collect();
    let note = match per_sample_correlation(records) {
        Some(c) => format!("r = {:.4}, p = {}, n = {}", c.r, c.p_text(), c.n),
        None => "r undefined".to_string(),
    };
    scatter_svg("Per-sample bound against ground truth", "bound_x", "truth_x", &points, &note)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::BoundRecord;

    fn traj(n: usize) -> BoundTrajectory {
        BoundTrajectory {
            records: (1..=n)
                .map(|e| BoundRecord {
                    epoch: e,
                    bound: 1.0 / e as f64 + 0.1,
                    disc_g1: 0.1,
                    disc_g2: 0.1,
                    truth: Some(1.0 / e as f64),
                    witness_truth: Some(0.05),
                    valid: e > 2,
                })
                .collect(),
        }
    }

    #[test]
    fn trajectory_chart_structure() {
        let svg = trajectory_svg(&traj(30));
        assert!(svg.contains(r#"viewBox="0 0 800 600""#));
        let polylines: Vec<&str> = svg.split("<polyline").skip(1).collect();
        assert_eq!(polylines.len(), 2);
        for p in polylines {
            let pts = p.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            assert_eq!(pts.split(' ').count(), 30);
        }
        assert_eq!(svg.matches(r#"class="xtick""#).count(), 5);
        assert_eq!(svg.matches(r#"class="ytick""#).count(), 5);
        assert_eq!(svg.matches("<circle").count(), 28);
    }

    #[test]
    fn scatter_annotation_matches_pearson() {
        let records: Vec<PerSampleRecord> = (0..10)
            .map(|i| PerSampleRecord {
                index: i,
                x: vec![i as f64, 0.0],
                bound_x: (i as f64).sqrt(),
                truth_x: Some(i as f64 * 0.5 + ((i * 7) % 3) as f64),
                disc_g2: 0.1,
            })
            .collect();
        let c = per_sample_correlation(&records).unwrap();
        let svg = per_sample_svg(&records);
        assert!(svg.contains(&format!("r = {:.4}", c.r)), "{svg}");
        assert_eq!(svg.matches("<circle").count(), 10);
    }

    #[test]
    fn stats_of_a_tracking_bound() {
        let s = trajectory_stats(&traj(10));
        assert_eq!(s.valid_epochs, 8);
        assert!(s.correlation.unwrap().r > 0.999);
        assert_eq!(s.regret, Some(0.0));
        assert_eq!(s.eps2_hat, Some(0.05));
        assert_eq!(s.dominance, Some(1.0));
        assert!((s.truth_range.unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn csv_and_json_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/trajectory.csv");
        write_trajectory_csv(&traj(3), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,bound,disc_g1,disc_g2,truth,valid");
        assert_eq!(text.lines().count(), 4);
        let j = dir.path().join("summary.json");
        write_json(&trajectory_stats(&traj(5)), &j).unwrap();
        let back: TrajectoryStats = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(back, trajectory_stats(&traj(5)));

        let mut t = traj(4);
        t.records.iter_mut().for_each(|r| r.witness_truth = None);
        t.records[1].truth = None;
        write_trajectory_csv(&t, &p).unwrap();
        assert_eq!(read_trajectory_csv(&p).unwrap(), t);
        let recs = vec![PerSampleRecord {
            index: 3,
            x: vec![0.25, -1.5],
            bound_x: 0.1,
            truth_x: None,
            disc_g2: 0.05,
        }];
        let q = dir.path().join("per_sample.csv");
        write_per_sample_csv(&recs, &q).unwrap();
        assert_eq!(read_per_sample_csv(&q).unwrap(), recs);
    }
}
