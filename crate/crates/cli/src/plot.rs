//! Prediction-interval charts as self-contained SVG.

use std::fmt::Write;

/// Quantile rows of one series, one entry per forecast step.
pub struct Bands<'a> {
    pub t: &'a [usize],
    /// `[q05, q25, q50, q75, q95]` per step.
    pub q: &'a [[f64; 5]],
    pub actual: &'a [Option<f64>],
    pub title: &'a str,
}

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

pub fn svg(b: &Bands) -> String {
    let k = b.t.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in b.q.iter().flatten().chain(b.actual.iter().flatten()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let x = |i: usize| PAD + (W - 2.0 * PAD) * if k > 1 { i as f64 / (k - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let line = |col: usize| -> String {
        (0..k).map(|i| format!("{:.2},{:.2}", x(i), y(b.q[i][col]))).collect::<Vec<_>>().join(" ")
    };
    // upper edge left to right, lower edge back
    let band = |upper: usize, lower: usize| -> String {
        let up = (0..k).map(|i| format!("{:.2},{:.2}", x(i), y(b.q[i][upper])));
        let down = (0..k).rev().map(|i| format!("{:.2},{:.2}", x(i), y(b.q[i][lower])));
        up.chain(down).collect::<Vec<_>>().join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(b.title));
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<polygon id="band90" points="{}" fill="#9ecae1" fill-opacity="0.5"/>"##,
        band(4, 0)
    );
    let _ = writeln!(
        s,
        r##"<polygon id="band50" points="{}" fill="#4292c6" fill-opacity="0.6"/>"##,
        band(3, 1)
    );
    let _ = writeln!(
        s,
        r##"<polyline id="median" points="{}" fill="none" stroke="#08306b" stroke-width="1.5"/>"##,
        line(2)
    );
    let truth: Vec<String> = (0..k)
        .filter_map(|i| b.actual[i].map(|v| format!("{:.2},{:.2}", x(i), y(v))))
        .collect();
    if !truth.is_empty() {
        let _ = writeln!(
            s,
            r##"<polyline id="actual" points="{}" fill="none" stroke="#000000" stroke-width="1.5"/>"##,
            truth.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r##"<g font-family="sans-serif" font-size="11" fill="#333333"><text x="{PAD}" y="{}">{:.3}</text><text x="{PAD}" y="{}">{:.3}</text><text x="{}" y="{}" text-anchor="end">t = {}…{}</text></g>"##,
        PAD - 6.0,
        hi,
        H - PAD + 14.0,
        lo,
        W - PAD,
        H - PAD + 14.0,
        b.t.first().copied().unwrap_or(0),
        b.t.last().copied().unwrap_or(0),
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
