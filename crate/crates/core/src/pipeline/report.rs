//! Static SVG charts of the per-epoch analysis results.

use std::fmt::Write as _;
use std::fs;

use super::evaluate::{read_gtheory_csv, read_spearman_csv, read_taucca_csv, HUMAN};
use super::Pipeline;
use crate::error::Result;
use crate::gtheory::Level;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 7] = ["#1b6ca8", "#d1495b", "#edae49", "#66a182", "#8d6a9f", "#5c5c5c", "#a3a3a3"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Plot {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
    legend: Vec<(String, &'static str)>,
}

impl Plot {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Plot {
            x: pad(x),
            y: pad(y),
            body: String::new(),
            legend: Vec::new(),
        }
    }

    fn sx(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn line(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.sx(x), self.sy(y)))
            .collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                self.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                self.sx(x),
                self.sy(y)
            );
        }
    }

    fn rect(&mut self, x: (f64, f64), y: (f64, f64), color: &str, opacity: f64) {
        let (x0, x1) = (self.sx(x.0), self.sx(x.1));
        let (y0, y1) = (self.sy(y.1), self.sy(y.0));
        let _ = writeln!(
            self.body,
            r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="{opacity}"/>"#,
            (x1 - x0).max(0.0),
            (y1 - y0).max(0.0)
        );
    }

    fn label(&mut self, x: f64, y: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            self.sx(x) + 5.0,
            self.sy(y) - 5.0,
            esc(text)
        );
    }

    fn render(&self, title: &str, xlabel: &str, ylabel: &str, xticks: &[f64]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{LEFT}" y="24" font-size="15">{}</text>"#, esc(title));
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            r##"<path d="M{x0},{y0} V{y1} H{x1}" fill="none" stroke="#333"/>"##
        );
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let py = self.sy(v);
            let _ = writeln!(
                s,
                r##"<line x1="{x0}" x2="{x1}" y1="{py:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.2}</text>"##,
                x0 - 6.0,
                py + 4.0
            );
        }
        for &v in xticks {
            let px = self.sx(v);
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                y1 + 16.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 16.0,
            esc(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16,{:.2}) rotate(-90)" font-size="12" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
        s.push_str(&self.body);
        for (i, (name, color)) in self.legend.iter().enumerate() {
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
                x1 + 14.0,
                ly - 10.0,
                x1 + 32.0,
                ly,
                esc(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// Renders `spearman.svg`, `gtheory.svg` and `taucca.svg` from the analysis
/// CSVs.
pub fn render_report(p: &Pipeline) -> Result<()> {
    let sp = read_spearman_csv(p.spearman_csv())?;
    let gt = read_gtheory_csv(p.gtheory_csv())?;
    let tc = read_taucca_csv(p.taucca_csv())?;
    let dir = p.report_dir();
    fs::create_dir_all(&dir)?;

    let mut epochs: Vec<u32> = sp.iter().filter_map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let xr = range(epochs.iter().map(|&e| e as f64));
    let xticks: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();

    // Partial Spearman by epoch with the human band.
    let pooled: Vec<_> = sp.iter().filter(|r| r.item == "ALL").collect();
    let (lo, hi) = range(pooled.iter().flat_map(|r| [r.rho, r.ci_lo, r.ci_hi]).flatten());
    let mut plot = Plot::new(xr, (lo.min(0.0), hi.max(1.0).min(1.0)));
    for (i, level) in ["chapter", "lesson"].into_iter().enumerate() {
        let color = PALETTE[i];
        if let Some(h) = pooled.iter().find(|r| r.checkpoint == HUMAN && r.level == level) {
            if let (Some(q1), Some(q3), Some(m)) = (h.ci_lo, h.ci_hi, h.rho) {
                plot.rect(plot.x, (q1, q3), color, 0.12);
                let x = plot.x;
                plot.line(&[(x.0, m), (x.1, m)], color, true);
            }
        }
        let pts: Vec<(f64, f64)> = pooled
            .iter()
            .filter(|r| r.level == level && r.checkpoint != HUMAN)
            .filter_map(|r| Some((r.epoch? as f64, r.rho?)))
            .collect();
        plot.line(&pts, color, false);
        plot.legend.push((format!("{level} model"), color));
        plot.legend.push((format!("{level} raters"), color));
    }
    plot.legend.dedup();
    fs::write(
        dir.join("spearman.svg"),
        plot.render("Partial Spearman vs raters", "epoch", "rho_part", &xticks),
    )?;

    // Mean variance proportions by epoch, stacked.
    let mut plot = Plot::new((xr.0 - 0.5, xr.1 + 0.5), (0.0, 1.0));
    for &e in &epochs {
        let mut base = 0.0;
        for (i, level) in Level::ALL.iter().enumerate() {
            let rho = gt
                .iter()
                .find(|r| r.epoch == e && r.item == "MEAN" && r.level == level.symbol())
                .and_then(|r| r.rho)
                .unwrap_or(0.0);
            plot.rect((e as f64 - 0.35, e as f64 + 0.35), (base, base + rho), PALETTE[i], 0.9);
            base += rho;
        }
    }
    for (i, level) in Level::ALL.iter().enumerate() {
        plot.legend.push((format!("rho_{}", level.symbol()), PALETTE[i]));
    }
    fs::write(
        dir.join("gtheory.svg"),
        plot.render("Variance proportions of prefix scores", "epoch", "proportion", &xticks),
    )?;

    // First canonical correlation against human alignment.
    let mut plot_pts: Vec<(String, Vec<(f64, f64, u32)>)> = Vec::new();
    for level in ["lesson", "chapter"] {
        let pts: Vec<(f64, f64, u32)> = epochs
            .iter()
            .filter_map(|&e| {
                let x = pooled
                    .iter()
                    .find(|r| r.epoch == Some(e) && r.level == level)
                    .and_then(|r| r.rho)?;
                let y = tc
                    .iter()
                    .find(|r| r.epoch == e && r.kind == "cca" && r.level == level && r.component == Some(1))
                    .and_then(|r| r.value)?;
                Some((x, y, e))
            })
            .collect();
        if !pts.is_empty() {
            plot_pts.push((level.to_string(), pts));
        }
    }
    let all = plot_pts.iter().flat_map(|(_, v)| v.iter());
    let xr2 = range(all.clone().map(|p| p.0));
    let yr2 = range(all.map(|p| p.1));
    let mut plot = Plot::new(
        (xr2.0.min(0.0), xr2.1.max(0.0)),
        (yr2.0.min(0.0), yr2.1.max(1.0).min(1.0)),
    );
    for (i, (level, pts)) in plot_pts.iter().enumerate() {
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
        plot.line(&xy, PALETTE[i], false);
        for &(x, y, e) in pts {
            plot.label(x, y, &format!("e{e}"));
        }
        plot.legend.push((format!("{level} units"), PALETTE[i]));
    }
    let ticks: Vec<f64> = (0..=4).map(|k| plot.x.0 + (plot.x.1 - plot.x.0) * k as f64 / 4.0).collect();
    fs::write(
        dir.join("taucca.svg"),
        plot.render("Canonical correlation vs rater alignment", "rho_part (model vs panel)", "first canonical correlation", &ticks),
    )?;
    log::info!("wrote report charts to {}", dir.display());
    Ok(())
}
