//! Metrics table and the cost/accuracy frontier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{aggregate, GradeOutcome};

/// Mode tag of runs without retrieval; the reference row for deltas.
pub const BASELINE_MODE: &str = "none";

pub const METRICS_HEADER: &str = "benchmark,model,mode,accuracy_pct,delta_pct,cost_cents";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub benchmark: String,
    pub model: String,
    pub mode: String,
    pub accuracy_pct: f64,
    /// Relative change against the baseline row of the same benchmark and
    /// model, in percent. Empty when there is no usable baseline.
    pub delta_pct: Option<f64>,
    /// Mean spend per query.
    pub cost_cents: f64,
}

/// One row per (benchmark, model, mode), sorted by those keys.
pub fn metrics_rows(outcomes: &[GradeOutcome]) -> Vec<MetricsRow> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<GradeOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((&o.benchmark, &o.model, &o.mode))
            .or_default()
            .push(o.clone());
    }
    let mut rows: Vec<MetricsRow> = groups
        .iter()
        .map(|((b, m, mode), os)| MetricsRow {
            benchmark: b.to_string(),
            model: m.to_string(),
            mode: mode.to_string(),
            accuracy_pct: aggregate(os),
            delta_pct: None,
            cost_cents: os.iter().map(|o| o.cost_cents).sum::<f64>() / os.len() as f64,
        })
        .collect();
    let baselines: BTreeMap<(String, String), f64> = rows
        .iter()
        .filter(|r| r.mode == BASELINE_MODE)
        .map(|r| ((r.benchmark.clone(), r.model.clone()), r.accuracy_pct))
        .collect();
    for r in &mut rows {
        if let Some(&base) = baselines.get(&(r.benchmark.clone(), r.model.clone())) {
            if base > 0.0 {
                r.delta_pct = Some((r.accuracy_pct - base) / base * 100.0);
            }
        }
    }
    rows
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("metrics rows serialize");
    }
    let bytes = w.into_inner().expect("in-memory writer");
    let s = String::from_utf8(bytes).expect("csv is utf-8");
    if rows.is_empty() {
        format!("{METRICS_HEADER}\n")
    } else {
        s
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub model: String,
    pub mode: String,
    pub accuracy_pct: f64,
    pub cost_cents: f64,
}

impl From<&MetricsRow> for FrontierPoint {
    fn from(r: &MetricsRow) -> Self {
        Self {
            model: r.model.clone(),
            mode: r.mode.clone(),
            accuracy_pct: r.accuracy_pct,
            cost_cents: r.cost_cents,
        }
    }
}

/// One line per (model, mode).
pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).expect("frontier points serialize");
    }
    let s = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8");
    if points.is_empty() {
        "model,mode,accuracy_pct,cost_cents\n".into()
    } else {
        s
    }
}

pub fn parse_frontier_csv(text: &str) -> Result<Vec<FrontierPoint>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Range padded by 10% on each side, widened around a single value.
fn padded(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    (lo - 0.1 * span, hi + 0.1 * span)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Cost (x, cents) against accuracy (y, percent) scatter as standalone
/// SVG. Points of the same model share a colour. Each circle carries its
/// values in `data-*` attributes so the figure can be checked without
/// rendering.
pub fn frontier_svg(points: &[FrontierPoint], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    let (x0, x1) = padded(points.iter().map(|p| p.cost_cents));
    let (y0, y1) = padded(points.iter().map(|p| p.accuracy_pct));
    let sx = |v: f64| LEFT + (v - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let sy = |v: f64| H - BOTTOM - (v - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut models: Vec<&str> = points.iter().map(|p| p.model.as_str()).collect();
    models.sort_unstable();
    models.dedup();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let (ax, ay) = (LEFT, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{ax}" y1="{ay}" x2="{}" y2="{ay}" stroke="black"/>"#,
        W - RIGHT
    );
    let _ = writeln!(s, r#"<line x1="{ax}" y1="{ay}" x2="{ax}" y2="{TOP}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            sx(xv),
            ay + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.1}</text>"#,
            ax - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Average cost per query (cents)</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">Accuracy (%)</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );
    for p in points {
        let colour = PALETTE[models.iter().position(|m| *m == p.model).unwrap_or(0) % PALETTE.len()];
        let (cx, cy) = (sx(p.cost_cents), sy(p.accuracy_pct));
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="5" fill="{colour}" data-model="{}" data-mode="{}" data-cost="{}" data-accuracy="{}"/>"#,
            xml_escape(&p.model),
            xml_escape(&p.mode),
            p.cost_cents,
            p.accuracy_pct
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{} / {} ({:.2}%, {:.2}¢)</text>"#,
            cx + 8.0,
            cy - 8.0,
            xml_escape(&p.model),
            xml_escape(&p.mode),
            p.accuracy_pct,
            p.cost_cents
        );
    }
    s.push_str("</svg>\n");
    s
}
