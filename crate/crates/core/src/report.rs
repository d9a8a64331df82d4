//! Self-contained SVG charts for loss logs, metrics tables and scene edits.
//!
//! Output depends only on the input bytes, so charts can be checked in as
//! golden files.

use std::fmt::Write as _;

use crate::geometry::OrientedRect;
use crate::surrogate::EditOp;
use crate::training::LOSS_HEADER;
use crate::world::Scene;
use crate::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: [f64; 4] = [50.0, 140.0, 30.0, 50.0]; // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// A parsed CSV: header plus rows of raw cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Config(format!("csv header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::Config("csv has no header".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Config(format!("row {}: {e}", i + 1)))?;
            rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing column `{name}`")))
    }

    /// Numeric cell; `NA` reads as NaN.
    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let cell = &self.rows[row][col];
        if cell == "NA" {
            return Ok(f64::NAN);
        }
        cell.parse()
            .map_err(|_| Error::Config(format!("row {}: column `{}` holds `{cell}`, not a number", row + 1, self.header[col])))
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn header(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, WIDTH / 2.0);
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn left() -> f64 {
        MARGIN[0]
    }
    fn right() -> f64 {
        WIDTH - MARGIN[1]
    }
    fn top() -> f64 {
        MARGIN[2]
    }
    fn bottom() -> f64 {
        HEIGHT - MARGIN[3]
    }

    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(1e-12);
        Self::left() + (x - self.x.0) / span * (Self::right() - Self::left())
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(1e-12);
        Self::bottom() - (y - self.y.0) / span * (Self::bottom() - Self::top())
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str, x_ticks: bool) {
        let (l, r, t, b) = (Self::left(), Self::right(), Self::top(), Self::bottom());
        let _ = writeln!(svg, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##, l - 4.0, l - 6.0, y + 4.0, fmt_num(v));
            if i > 0 {
                let _ = writeln!(svg, r##"<line x1="{l}" y1="{y:.1}" x2="{r}" y2="{y:.1}" stroke="#ddd"/>"##);
            }
        }
        if x_ticks {
            for i in 0..=4 {
                let v = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
                let x = self.px(v);
                let _ = writeln!(svg, r#"<line x1="{x:.1}" y1="{b}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, b + 4.0, b + 16.0, fmt_num(v));
            }
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (l + r) / 2.0, HEIGHT - 12.0);
        let _ = writeln!(svg, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#, (t + b) / 2.0, (t + b) / 2.0);
    }
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN[2] + 10.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN[1] + 12.0;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#, y - 9.0, PALETTE[i % PALETTE.len()], x + 14.0, y);
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart of every loss column against the step.
pub fn loss_chart(csv_text: &str) -> Result<String> {
    let t = Table::parse(csv_text)?;
    let step = t.column("step")?;
    let series: Vec<&str> = LOSS_HEADER.split(',').filter(|c| !matches!(*c, "step" | "lr")).collect();
    let cols = series.iter().map(|c| t.column(c)).collect::<Result<Vec<_>>>()?;
    let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cols.len()];
    for r in 0..t.rows.len() {
        let x = t.number(r, step)?;
        for (s, &c) in cols.iter().enumerate() {
            let y = t.number(r, c)?;
            if x.is_finite() && y.is_finite() {
                points[s].push((x, y));
            }
        }
    }
    let frame = Frame {
        x: bounds(points.iter().flatten().map(|p| p.0)),
        y: bounds(points.iter().flatten().map(|p| p.1).chain([0.0])),
    };
    let mut svg = String::new();
    header(&mut svg, "Training losses");
    frame.axes(&mut svg, "step", "loss", true);
    for (s, pts) in points.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.1} {:.1}", if i == 0 { "M" } else { "L" }, frame.px(*x), frame.py(*y));
        }
        let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, PALETTE[s % PALETTE.len()]);
    }
    legend(&mut svg, &series);
    svg.push_str("</svg>\n");
    Ok(svg)
}

const METRIC_BARS: [&str; 5] = ["l2_1s", "l2_2s", "l2_3s", "ave_123", "ave_all"];

/// Grouped bars of the L2 columns, one group per split and protocol, with
/// the collision rate printed under each group.
pub fn metrics_chart(csv_text: &str) -> Result<String> {
    let t = Table::parse(csv_text)?;
    let split = t.column("split")?;
    let protocol = t.column("protocol")?;
    let collision = t.column("collision")?;
    let cols = METRIC_BARS.iter().map(|c| t.column(c)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let v = cols.iter().map(|&c| t.number(r, c)).collect::<Result<Vec<_>>>()?;
        values.push((v, t.number(r, collision)?));
    }
    let top = bounds(values.iter().flat_map(|(v, _)| v.iter().copied()).chain([0.0])).1;
    let frame = Frame {
        x: (0.0, t.rows.len().max(1) as f64),
        y: (0.0, top),
    };
    let mut svg = String::new();
    header(&mut svg, "Planning L2 (m)");
    frame.axes(&mut svg, "split / protocol", "L2 (m)", false);
    let group = (Frame::right() - Frame::left()) / t.rows.len().max(1) as f64;
    let bar = group * 0.8 / METRIC_BARS.len() as f64;
    for (r, (v, coll)) in values.iter().enumerate() {
        let x0 = Frame::left() + group * r as f64 + group * 0.1;
        for (i, y) in v.iter().enumerate() {
            if !y.is_finite() {
                continue;
            }
            let top = frame.py(*y);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{top:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                x0 + bar * i as f64,
                Frame::bottom() - top,
                PALETTE[i]
            );
        }
        let cx = x0 + group * 0.4;
        let coll = if coll.is_finite() { format!("{coll:.2}%") } else { "NA".into() };
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{} {}</text><text x="{cx:.1}" y="{}" text-anchor="middle">coll {coll}</text>"#,
            Frame::bottom() + 14.0,
            t.rows[r][split],
            t.rows[r][protocol],
            Frame::bottom() + 26.0
        );
    }
    legend(&mut svg, &METRIC_BARS);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Top-down view of a scene at t = 0 with the ground-truth ego path; the
/// edited agent is drawn in red (added) or dashed (removed).
pub fn edit_preview(scene: &Scene, op: &EditOp, extent: f64) -> String {
    let scale = (HEIGHT - 40.0) / (2.0 * extent);
    let (cx, cy) = (WIDTH / 2.0, HEIGHT / 2.0 + 10.0);
    // x forward is drawn upward, y left is drawn leftward.
    let map = |p: [f64; 2]| (cx - p[1] * scale, cy - p[0] * scale);
    let poly = |r: &OrientedRect| {
        r.corners()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (x, y) = map(*c);
                format!("{}{x:.1} {y:.1}", if i == 0 { "M" } else { "L" })
            })
            .collect::<String>()
            + "Z"
    };
    let mut svg = String::new();
    header(&mut svg, &format!("scene {} ({})", scene.id, scene.kind));
    let (x0, y0) = map([extent, extent]);
    let _ = writeln!(svg, r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#999"/>"##, 2.0 * extent * scale, 2.0 * extent * scale);
    for line in &scene.map {
        let d: String = line
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (x, y) = map(*p);
                format!("{}{x:.1} {y:.1}", if i == 0 { "M" } else { "L" })
            })
            .collect();
        let _ = writeln!(svg, r##"<path d="{d}" fill="none" stroke="#bbb"/>"##);
    }
    for a in &scene.agents {
        let removed = matches!(op, EditOp::Remove { agent } if agent.id == a.id);
        let style = if removed { r#"stroke-dasharray="4 3" fill="none""# } else { r##"fill="#9ecae1""## };
        let _ = writeln!(svg, r#"<path d="{}" stroke="black" {style}/>"#, poly(&a.rect_at(0)));
    }
    if let EditOp::Add { agent } = op {
        let _ = writeln!(svg, r##"<path d="{}" stroke="black" fill="#e6550d"/>"##, poly(&agent.rect_at(0)));
    }
    let ego = OrientedRect::new([0.0, 0.0], 0.0, scene.ego.size[0], scene.ego.size[1]);
    let _ = writeln!(svg, r##"<path d="{}" stroke="black" fill="#31a354"/>"##, poly(&ego));
    let path: String = std::iter::once([0.0, 0.0])
        .chain(scene.ego.gt_traj.iter().copied())
        .enumerate()
        .map(|(i, p)| {
            let (x, y) = map(p);
            format!("{}{x:.1} {y:.1}", if i == 0 { "M" } else { "L" })
        })
        .collect();
    let _ = writeln!(svg, r##"<path d="{path}" fill="none" stroke="#31a354" stroke-width="2"/>"##);
    svg.push_str("</svg>\n");
    svg
}
