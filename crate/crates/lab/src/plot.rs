//! Standalone SVG plots assembled by hand. Output bytes depend only on the
//! input rows, so plots can be compared as golden files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{IoContext, Result};
use crate::results::ResultRow;
use crate::tables::Trajectories;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSpec {
    /// Metrics to plot; `None` plots every metric present.
    pub metrics: Option<Vec<String>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Linear axis mapping with rounded tick positions.
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(mut lo: f64, mut hi: f64, px_lo: f64, px_hi: f64) -> Self {
        if hi <= lo {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + step * 1e-9 {
            out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
            t += step;
        }
        out
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

struct Canvas {
    s: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            esc(title)
        );
        Self { s }
    }

    fn axes(&mut self, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str, xticks: &[(f64, String)]) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let _ = writeln!(self.s, r#"<path d="M{x0} {y1}V{y0}H{x1}" fill="none" stroke="black"/>"#);
        for (v, label) in xticks {
            let px = x.map(*v);
            let _ = writeln!(
                self.s,
                r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 18.0,
                esc(label)
            );
        }
        for t in y.ticks() {
            let py = y.map(t);
            let _ = writeln!(
                self.s,
                r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                x0 - 6.0,
                py + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            self.s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 12.0,
            esc(xlabel)
        );
        let _ = writeln!(
            self.s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (name, colour)) in entries.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = W - RIGHT + 15.0;
            let _ = writeln!(
                self.s,
                r#"<rect x="{x}" y="{}" width="12" height="12" fill="{colour}"/><text x="{}" y="{}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                esc(name)
            );
        }
    }

    fn finish(mut self) -> String {
        self.s.push_str("</svg>\n");
        self.s
    }
}

fn y_range(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, e) in points {
        lo = lo.min(v - e);
        hi = hi.max(v + e);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Metric against NFE (log2 axis), one series per experiment and solver.
pub fn line_plot(metric: &str, rows: &[&ResultRow]) -> String {
    let mut series: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = if r.solver == "-" {
            r.experiment.clone()
        } else {
            format!("{} ({})", r.experiment, r.solver)
        };
        series.entry(key).or_default().push((r.nfe, r.value, r.stderr));
    }
    let mut nfes: Vec<usize> = rows.iter().map(|r| r.nfe).collect();
    nfes.sort_unstable();
    nfes.dedup();
    let lx = |n: usize| (n.max(1) as f64).log2();
    let x = Axis::new(lx(nfes[0]) - 0.25, lx(nfes[nfes.len() - 1]) + 0.25, LEFT, W - RIGHT);
    let (ylo, yhi) = y_range(rows.iter().map(|r| (r.value, r.stderr)));
    let y = Axis::new(ylo, yhi, H - BOTTOM, TOP);
    let mut c = Canvas::new(&format!("{metric} vs NFE"));
    let xt: Vec<(f64, String)> = nfes.iter().map(|&n| (lx(n), n.to_string())).collect();
    c.axes(&x, &y, "NFE", metric, &xt);
    let mut legend = Vec::new();
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        pts.sort_by_key(|p| p.0);
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, &(n, v, _))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, x.map(lx(n)), y.map(v)))
            .collect();
        let _ = writeln!(
            c.s,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            path.join("")
        );
        for &(n, v, e) in &pts {
            let px = x.map(lx(n));
            if e > 0.0 {
                let _ = writeln!(
                    c.s,
                    r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{colour}"/>"#,
                    y.map(v - e),
                    y.map(v + e)
                );
            }
            let _ = writeln!(
                c.s,
                r#"<circle cx="{px:.2}" cy="{:.2}" r="3.5" fill="{colour}"/>"#,
                y.map(v)
            );
        }
        legend.push((name, colour));
    }
    c.legend(&legend);
    c.finish()
}

/// Metric against codebook channels, one bar per row grouped by channels.
pub fn bar_plot(metric: &str, rows: &[&ResultRow]) -> String {
    let mut groups: BTreeMap<u32, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.channels).or_default().push(r);
    }
    let mut labels: Vec<String> = rows.iter().map(|r| format!("{} {}", r.collection, r.solver)).collect();
    labels.sort();
    labels.dedup();
    let ng = groups.len() as f64;
    let x = Axis::new(0.0, ng, LEFT, W - RIGHT);
    let (_, yhi) = y_range(rows.iter().map(|r| (r.value, r.stderr)));
    let ylo = rows.iter().map(|r| r.value - r.stderr).fold(0.0, f64::min);
    let y = Axis::new(ylo, yhi, H - BOTTOM, TOP);
    let mut c = Canvas::new(&format!("{metric} vs codebook channels"));
    let xt: Vec<(f64, String)> = groups
        .keys()
        .enumerate()
        .map(|(i, d)| (i as f64 + 0.5, d.to_string()))
        .collect();
    c.axes(&x, &y, "codebook channels d", metric, &xt);
    let slot = 0.8 / labels.len() as f64;
    for (gi, (_, members)) in groups.iter().enumerate() {
        for r in members {
            let li = labels
                .iter()
                .position(|l| *l == format!("{} {}", r.collection, r.solver))
                .unwrap_or(0);
            let colour = PALETTE[li % PALETTE.len()];
            let left = x.map(gi as f64 + 0.1 + slot * li as f64);
            let right = x.map(gi as f64 + 0.1 + slot * (li as f64 + 1.0));
            let (top, base) = (y.map(r.value.max(0.0)), y.map(r.value.min(0.0)));
            let _ = writeln!(
                c.s,
                r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{colour}"/>"#,
                right - left,
                (base - top).max(0.5)
            );
            if r.stderr > 0.0 {
                let mid = (left + right) / 2.0;
                let _ = writeln!(
                    c.s,
                    r#"<line x1="{mid:.2}" y1="{:.2}" x2="{mid:.2}" y2="{:.2}" stroke="black"/>"#,
                    y.map(r.value - r.stderr),
                    y.map(r.value + r.stderr)
                );
            }
        }
    }
    let legend: Vec<(String, &str)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), PALETTE[i % PALETTE.len()]))
        .collect();
    c.legend(&legend);
    c.finish()
}

/// Sample paths over reference points: each trajectory as a grey polyline,
/// start points hollow, end points filled.
pub fn trajectory_plot(title: &str, trajectories: &Trajectories, reference: Option<&[f64]>) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (_, pts) in trajectories {
        for (_, p) in pts {
            xs.push(p[0]);
            ys.push(p.get(1).copied().unwrap_or(0.0));
        }
    }
    if let Some(r) = reference {
        for p in r.chunks(2) {
            xs.push(p[0]);
            ys.push(p.get(1).copied().unwrap_or(0.0));
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = (hi - lo).max(1e-9) * 0.05;
        (lo - pad, hi + pad)
    };
    let (xl, xh) = range(&xs);
    let (yl, yh) = range(&ys);
    let x = Axis::new(xl, xh, LEFT, W - RIGHT);
    let y = Axis::new(yl, yh, H - BOTTOM, TOP);
    let mut c = Canvas::new(title);
    let xt: Vec<(f64, String)> = x.ticks().into_iter().map(|t| (t, tick_label(t))).collect();
    c.axes(&x, &y, "x0", "x1", &xt);
    if let Some(r) = reference {
        for p in r.chunks(2) {
            let _ = writeln!(
                c.s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#2ca02c" fill-opacity="0.5"/>"##,
                x.map(p[0]),
                y.map(p.get(1).copied().unwrap_or(0.0))
            );
        }
    }
    for (_, pts) in trajectories {
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, (_, p))| {
                format!(
                    "{}{:.2} {:.2}",
                    if k == 0 { "M" } else { "L" },
                    x.map(p[0]),
                    y.map(p.get(1).copied().unwrap_or(0.0))
                )
            })
            .collect();
        let _ = writeln!(
            c.s,
            r##"<path d="{}" fill="none" stroke="#888888" stroke-width="0.7"/>"##,
            path.join("")
        );
        if let (Some((_, a)), Some((_, b))) = (pts.first(), pts.last()) {
            let py = |p: &Vec<f64>| y.map(p.get(1).copied().unwrap_or(0.0));
            let _ = writeln!(
                c.s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="none" stroke="#1f77b4"/><circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#d62728"/>"##,
                x.map(a[0]),
                py(a),
                x.map(b[0]),
                py(b)
            );
        }
    }
    let mut legend = vec![("start".to_string(), "#1f77b4"), ("end".to_string(), "#d62728")];
    if reference.is_some() {
        legend.push(("data".to_string(), "#2ca02c"));
    }
    c.legend(&legend);
    c.finish()
}

fn file_stem(metric: &str) -> String {
    metric
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '_' || ch == '-' {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes one SVG per selected metric into `out_dir`: a line plot against
/// NFE for sampled metrics, a bar plot against codebook channels otherwise.
/// Returns the written paths; a filter matching nothing writes none.
pub fn emit_plots(rows: &[ResultRow], spec: &PlotSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut by_metric: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if spec.metrics.as_ref().is_none_or(|m| m.iter().any(|x| x == &r.metric)) {
            by_metric.entry(r.metric.as_str()).or_default().push(r);
        }
    }
    if by_metric.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut written = Vec::new();
    for (metric, rs) in by_metric {
        let svg = if rs.iter().all(|r| r.nfe > 0) {
            line_plot(metric, &rs)
        } else {
            bar_plot(metric, &rs)
        };
        let p = out_dir.join(format!("{}.svg", file_stem(metric)));
        fs::write(&p, svg).at(&p)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(exp: &str, metric: &str, nfe: usize, d: u32, v: f64) -> ResultRow {
        ResultRow {
            experiment: exp.into(),
            config_hash: "h".into(),
            metric: metric.into(),
            solver: if nfe > 0 { "euler".into() } else { "-".into() },
            nfe,
            channels: d,
            collection: "offline".into(),
            value: v,
            stderr: 0.01,
            seed: 0,
        }
    }

    #[test]
    fn ticks_cover_the_range() {
        let a = Axis::new(0.31, 1.93, 0.0, 1.0);
        let t = a.ticks();
        assert!(t.len() >= 3 && t.len() <= 11, "{t:?}");
        assert!(t.iter().all(|&v| (0.31..=1.93).contains(&v)));
    }

    #[test]
    fn plots_are_deterministic() {
        let rows = [
            row("a", "w2", 2, 0, 0.8),
            row("a", "w2", 4, 0, 0.4),
            row("b&c", "w2", 2, 12, 0.3),
        ];
        let refs: Vec<&ResultRow> = rows.iter().collect();
        assert_eq!(line_plot("w2", &refs), line_plot("w2", &refs));
        assert!(line_plot("w2", &refs).contains("b&amp;c"));
    }
}
