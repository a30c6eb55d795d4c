//! Standalone SVG rendering for response curves and loss maps.
//!
//! Coordinates are printed with two decimals so the same input always yields
//! the same bytes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::response_models::ResponseCurve;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const CURVE_BOTTOM: f64 = 340.0;
const HIST_TOP: f64 = 360.0;
const HIST_BOTTOM: f64 = 440.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick positions at 1, 2 or 5 times a power of ten.
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= (target + 1) as f64)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_num(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        "0".into()
    } else if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0}" height="{H:.0}" viewBox="0 0 {W:.0} {H:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{W:.0}" height="{H:.0}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

/// Binned response curve with a 95% CI band, a dashed zero line, a hollow
/// marker on the reference bin and a histogram of observations underneath.
pub fn render_curve_svg(curve: &ResponseCurve, title: &str, y_label: &str) -> Result<String> {
    if curve.points.is_empty() {
        return Err(Error::Validation("curve has no points to plot".into()));
    }
    let finite_widths: Vec<f64> = curve
        .points
        .iter()
        .filter(|p| p.bin_lo.is_finite() && p.bin_hi.is_finite())
        .map(|p| p.bin_hi - p.bin_lo)
        .collect();
    let width = finite_widths.iter().copied().fold(f64::INFINITY, f64::min);
    let width = if width.is_finite() { width } else { 1.0 };
    let span = |lo: f64, hi: f64| -> (f64, f64) {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => (lo, hi),
            (false, true) => (hi - width, hi),
            (true, false) => (lo, lo + width),
            (false, false) => (-width / 2.0, width / 2.0),
        }
    };
    let spans: Vec<(f64, f64)> = curve.points.iter().map(|p| span(p.bin_lo, p.bin_hi)).collect();
    let x_lo = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let x_hi = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = curve.points.iter().map(|p| p.ci_lo).fold(0.0, f64::min);
    let mut y_hi = curve.points.iter().map(|p| p.ci_hi).fold(0.0, f64::max);
    if y_hi - y_lo <= 0.0 {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
    let py = |y: f64| CURVE_BOTTOM - (y - y_lo) / (y_hi - y_lo) * (CURVE_BOTTOM - TOP);

    let mut out = String::new();
    header(&mut out, title);

    // axes and ticks
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{CURVE_BOTTOM:.2}" stroke="#000000"/>"##
    );
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = py(t);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT:.2}" y2="{y:.2}" stroke="#000000"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0,
            fmt_num(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (TOP + CURVE_BOTTOM) / 2.0,
        (TOP + CURVE_BOTTOM) / 2.0,
        esc(y_label)
    );
    for t in nice_ticks(x_lo, x_hi, 8) {
        let x = px(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{HIST_BOTTOM:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            HIST_BOTTOM + 4.0,
            HIST_BOTTOM + 16.0,
            fmt_num(t)
        );
    }
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.2}" y1="{HIST_BOTTOM:.2}" x2="{:.2}" y2="{HIST_BOTTOM:.2}" stroke="#000000"/>"##,
        W - RIGHT
    );

    // zero reference
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        py(0.0),
        W - RIGHT,
        py(0.0)
    );

    let centers: Vec<f64> = spans.iter().map(|s| (s.0 + s.1) / 2.0).collect();
    // CI band
    if curve.points.len() > 1 {
        let mut pts: Vec<String> = curve
            .points
            .iter()
            .zip(&centers)
            .map(|(p, &c)| format!("{:.2},{:.2}", px(c), py(p.ci_hi)))
            .collect();
        pts.extend(
            curve
                .points
                .iter()
                .zip(&centers)
                .rev()
                .map(|(p, &c)| format!("{:.2},{:.2}", px(c), py(p.ci_lo))),
        );
        let _ = writeln!(out, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, pts.join(" "));
        let line: Vec<String> = curve
            .points
            .iter()
            .zip(&centers)
            .map(|(p, &c)| format!("{:.2},{:.2}", px(c), py(p.coef)))
            .collect();
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##, line.join(" "));
    }
    for (p, &c) in curve.points.iter().zip(&centers) {
        if p.bin == curve.reference_bin {
            let _ = writeln!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#ffffff" stroke="#08519c" stroke-width="2"/>"##,
                px(c),
                py(0.0)
            );
        } else {
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#08519c"/><circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="#08519c"/>"##,
                py(p.ci_lo),
                py(p.ci_hi),
                py(p.coef),
                x = px(c)
            );
        }
    }

    // histogram
    let max_n = curve.points.iter().map(|p| p.n_obs).max().unwrap_or(0).max(1) as f64;
    for (p, s) in curve.points.iter().zip(&spans) {
        let h = p.n_obs as f64 / max_n * (HIST_BOTTOM - HIST_TOP);
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#bdbdbd" stroke="#ffffff"/>"##,
            px(s.0),
            HIST_BOTTOM - h,
            px(s.1) - px(s.0)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Sequential white-to-red ramp.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 165.0), lerp(245.0, 15.0), lerp(240.0, 21.0))
}

fn min_spacing(mut v: Vec<f64>) -> Option<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2).map(|w| w[1] - w[0]).fold(None, |m, d| Some(m.map_or(d, |m: f64| m.min(d))))
}

/// Equirectangular map of `(lat, lon, value)` cells colored by value.
pub fn render_map_svg(cells: &[(f64, f64, f64)], title: &str, legend: &str) -> Result<String> {
    if cells.is_empty() {
        return Err(Error::Validation("no cells to plot".into()));
    }
    let dlat = min_spacing(cells.iter().map(|c| c.0).collect()).unwrap_or(1.0);
    let dlon = min_spacing(cells.iter().map(|c| c.1).collect()).unwrap_or(1.0);
    let vmin = cells.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let vmax = cells.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let map_w = W - 40.0;
    let map_h = map_w / 2.0;
    let (x0, y0) = (20.0, TOP);
    let px = |lon: f64| x0 + (lon + 180.0) / 360.0 * map_w;
    let py = |lat: f64| y0 + (90.0 - lat) / 180.0 * map_h;
    let scale = |v: f64| if vmax > vmin { (v - vmin) / (vmax - vmin) } else { 0.5 };

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{map_w:.2}" height="{map_h:.2}" fill="#f0f0f0" stroke="#000000"/>"##
    );
    for &(lat, lon, v) in cells {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            px(lon - dlon / 2.0),
            py(lat + dlat / 2.0),
            dlon / 360.0 * map_w,
            dlat / 180.0 * map_h,
            ramp(scale(v))
        );
    }
    // legend
    let ly = y0 + map_h + 30.0;
    let steps = 10;
    for k in 0..steps {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{ly:.2}" width="30" height="12" fill="{}"/>"#,
            x0 + 30.0 * k as f64,
            ramp(k as f64 / (steps - 1) as f64)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{x0:.2}" y="{:.2}">{}</text><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text><text x="{:.2}" y="{:.2}">{}</text>"#,
        ly + 26.0,
        fmt_num(vmin),
        x0 + 30.0 * steps as f64,
        ly + 26.0,
        fmt_num(vmax),
        x0 + 30.0 * steps as f64 + 10.0,
        ly + 10.0,
        esc(legend)
    );
    out.push_str("</svg>\n");
    Ok(out)
}
