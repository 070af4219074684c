//! Standalone SVG charts for sweep curves and method comparisons — a few
//! polylines, circles, and rects written by hand, no plotting dependency.
//!
//! [`sweep_svg`] draws one line per (family, split) series over the sweep
//! grid, with an optional log-scaled y axis and the per-member scatter
//! behind bagging curves. [`comparison_svg`] draws grouped bars, one group
//! per label family, one bar per method and split.

use crate::eval::{Family, Method, RmseReport, SplitKind, SweepCurve};
use std::fmt::Write as _;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 76.0;
const MARGIN_R: f64 = 148.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 56.0;

fn family_color(family: Family) -> &'static str {
    match family {
        Family::BusP => "#1f77b4",
        Family::BusQ => "#d62728",
        Family::BranchP => "#2ca02c",
        Family::BranchQ => "#9467bd",
    }
}

fn method_color(method: Method) -> &'static str {
    match method {
        Method::Pr => "#7f7f7f",
        Method::Gb => "#1f77b4",
        Method::Bagging => "#ff7f0e",
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Compact tick label: plain decimal in a middling range, scientific outside.
fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Vertical axis: maps data values into pixel rows, linearly or by decade.
struct YAxis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl YAxis {
    /// Fit the axis around the finite values, padding a degenerate range.
    /// A log axis ignores non-positive values and falls back to linear when
    /// nothing positive remains.
    fn fit(values: &[f64], want_log: bool) -> YAxis {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if want_log {
            let pos: Vec<f64> = finite.iter().copied().filter(|&v| v > 0.0).collect();
            if !pos.is_empty() {
                let min = pos.iter().copied().fold(f64::INFINITY, f64::min);
                let max = pos.iter().copied().fold(0.0_f64, f64::max);
                // Nudge so values sitting exactly on a decade keep that decade
                // as the bound instead of spilling into the next one.
                let lo = (min.log10() + 1e-9).floor();
                let mut hi = (max.log10() - 1e-9).ceil();
                if hi <= lo {
                    hi = lo + 1.0;
                }
                return YAxis { lo, hi, log: true };
            }
        }
        let (mut lo, mut hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < f64::EPSILON * hi.abs().max(1.0) {
            let pad = hi.abs().max(1.0) * 0.1;
            lo -= pad;
            hi += pad;
        } else {
            let pad = (hi - lo) * 0.06;
            lo = (lo - pad).max(if lo >= 0.0 { 0.0 } else { f64::NEG_INFINITY });
            hi += pad;
        }
        YAxis { lo, hi, log: false }
    }

    fn pos(&self, v: f64) -> f64 {
        let t = if self.log {
            let v = v.max(10f64.powf(self.lo));
            (v.log10() - self.lo) / (self.hi - self.lo)
        } else {
            (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
        };
        HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
    }

    /// Tick values in data units: decades when log, ~6 round steps when not.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            return (self.lo as i64..=self.hi as i64).map(|e| 10f64.powi(e as i32)).collect();
        }
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 2.5, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| span / s <= 6.0)
            .unwrap_or(mag * 10.0);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + step * 1e-9 {
            out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
            t += step;
        }
        out
    }

    fn tick_label(&self, v: f64) -> String {
        if self.log {
            format!("1e{}", v.log10().round() as i64)
        } else {
            fmt_num(v)
        }
    }
}

fn x_pos(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    MARGIN_L + (v - lo) / span * (WIDTH - MARGIN_L - MARGIN_R)
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        esc(title)
    );
    s
}

fn draw_frame(s: &mut String, axis: &YAxis, y_label: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    for t in axis.ticks() {
        let y = axis.pos(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 6.0,
            y + 4.0,
            axis.tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{x0}\" y=\"{y1}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
        x1 - x0,
        y0 - y1
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

fn draw_x_ticks(s: &mut String, values: &[f64], lo: f64, hi: f64, x_label: &str) {
    let y0 = HEIGHT - MARGIN_B;
    // Thin the labels so long grids stay readable.
    let stride = values.len().div_ceil(8).max(1);
    for (i, &v) in values.iter().enumerate() {
        let x = x_pos(v, lo, hi);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{y0}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
             stroke=\"#333333\" stroke-width=\"1\"/>",
            y0 + 4.0
        );
        if i % stride == 0 || i + 1 == values.len() {
            let _ = writeln!(
                s,
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                y0 + 18.0,
                fmt_num(v)
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        esc(x_label)
    );
}

/// Line chart of a tuning sweep: solid lines for the test split, dashed for
/// train, colored per label family, member scatter drawn underneath when the
/// curve carries one. `log_y` switches the vertical axis to decades.
pub fn sweep_svg(curve: &SweepCurve, log_y: bool) -> String {
    let all: Vec<f64> = curve
        .points
        .iter()
        .map(|p| p.rmse)
        .chain(curve.scatter.iter().map(|m| m.rmse))
        .collect();
    let axis = YAxis::fit(&all, log_y);
    let grid: Vec<f64> = curve.grid.iter().map(|&v| v as f64).collect();
    let (x_lo, x_hi) = match (grid.first(), grid.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0.0, 1.0),
    };

    let mut s = svg_open(&format!(
        "{} — prediction error vs {}",
        curve.case_name,
        curve.parameter.label()
    ));
    draw_frame(&mut s, &axis, if log_y { "average RMSE (log)" } else { "average RMSE" });
    draw_x_ticks(&mut s, &grid, x_lo, x_hi, curve.parameter.label());

    for m in &curve.scatter {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.3\"/>",
            x_pos((m.member + 1) as f64, x_lo, x_hi),
            axis.pos(m.rmse),
            family_color(m.family)
        );
    }

    let mut legend: Vec<Family> = Vec::new();
    for family in Family::ALL {
        for split in SplitKind::ALL {
            let pts: Vec<(f64, f64)> = curve
                .grid
                .iter()
                .filter_map(|&v| curve.rmse_at(v, family, split).map(|r| (v as f64, r)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            if !legend.contains(&family) {
                legend.push(family);
            }
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", x_pos(x, x_lo, x_hi), axis.pos(y)))
                .collect();
            let dash = match split {
                SplitKind::Test => "",
                SplitKind::Train => " stroke-dasharray=\"5,3\"",
            };
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"{dash}/>",
                coords.join(" "),
                family_color(family)
            );
        }
    }

    let lx = WIDTH - MARGIN_R + 14.0;
    let mut ly = MARGIN_T + 8.0;
    for family in legend {
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{}\" stroke-width=\"2\"/>",
            lx + 22.0,
            family_color(family)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 28.0,
            ly + 4.0,
            family.label()
        );
        ly += 18.0;
    }
    ly += 6.0;
    for (dash, name) in [("", "test"), (" stroke-dasharray=\"5,3\"", "train")] {
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"#333333\" stroke-width=\"1.6\"{dash}/>",
            lx + 22.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", lx + 28.0, ly + 4.0, name);
        ly += 18.0;
    }
    if !curve.scatter.is_empty() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{ly:.1}\" r=\"2.5\" fill=\"#333333\" \
             fill-opacity=\"0.3\"/>",
            lx + 11.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">members</text>", lx + 28.0, ly + 4.0);
    }

    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart of a comparison report: one group per label family,
/// within it a test and a train bar per method, colored by method.
pub fn comparison_svg(report: &RmseReport) -> String {
    let families: Vec<Family> =
        Family::ALL.into_iter().filter(|f| report.entries.iter().any(|e| e.family == *f)).collect();
    let all: Vec<f64> = report.entries.iter().map(|e| e.rmse).collect();
    let axis = YAxis::fit(&[all.as_slice(), &[0.0]].concat(), false);

    let mut s = svg_open(&format!("{} — average RMSE by method", report.case_name));
    draw_frame(&mut s, &axis, "average RMSE");

    let y0 = HEIGHT - MARGIN_B;
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let group_w = plot_w / families.len().max(1) as f64;
    let slot_w = group_w / (Method::ALL.len() as f64 + 0.8);
    let bar_w = slot_w * 0.42;

    for (gi, &family) in families.iter().enumerate() {
        let gx = MARGIN_L + gi as f64 * group_w;
        for (mi, method) in Method::ALL.into_iter().enumerate() {
            let sx = gx + (mi as f64 + 0.55) * slot_w;
            for (si, split) in SplitKind::ALL.into_iter().enumerate() {
                let Some(rmse) = report.get(method, family, split) else { continue };
                let x = sx + si as f64 * bar_w;
                let y = axis.pos(rmse);
                let opacity = match split {
                    SplitKind::Test => 0.95,
                    SplitKind::Train => 0.45,
                };
                let _ = writeln!(
                    s,
                    "<rect class=\"bar\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" \
                     height=\"{:.1}\" fill=\"{}\" fill-opacity=\"{opacity}\"/>",
                    (y0 - y).max(0.0),
                    method_color(method)
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            gx + group_w / 2.0,
            y0 + 18.0,
            family.label()
        );
    }

    let lx = WIDTH - MARGIN_R + 14.0;
    let mut ly = MARGIN_T + 8.0;
    for method in Method::ALL {
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{:.1}\" width=\"14\" height=\"10\" fill=\"{}\"/>",
            ly - 5.0,
            method_color(method)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 20.0,
            ly + 4.0,
            method.label()
        );
        ly += 18.0;
    }
    ly += 6.0;
    for (opacity, name) in [(0.95, "test"), (0.45, "train")] {
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{:.1}\" width=\"14\" height=\"10\" fill=\"#333333\" \
             fill-opacity=\"{opacity}\"/>",
            ly - 5.0
        );
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", lx + 20.0, ly + 4.0, name);
        ly += 18.0;
    }

    s.push_str("</svg>\n");
    s
}
