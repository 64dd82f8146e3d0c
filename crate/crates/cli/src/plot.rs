//! Minimal standalone SVG charts for removal curves and attribution bars.
//! Display only; nothing reads these files back.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn frame(title: &str, y_label: &str, ymax: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD / 2.0,
        H - PAD,
        H - PAD,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\">{v:.2}</text>", PAD - 4.0);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_of(v: f64, ymax: f64) -> f64 {
    H - PAD - (H - 2.0 * PAD) * (v / ymax).clamp(0.0, 1.0)
}

/// Grouped bars: one group per label, one bar per series.
pub fn bars(title: &str, y_label: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut s = frame(title, y_label, ymax);
    let colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let group_w = (W - 1.5 * PAD) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let x0 = PAD + g as f64 * group_w + group_w * 0.1;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let y = y_of(v, ymax);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                x0 + k as f64 * bar_w,
                H - PAD - y,
                colors[k % colors.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + group_w * 0.4,
            H - PAD + 16.0,
            escape(label)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>",
            W - PAD * 2.5,
            PAD + 14.0 * k as f64,
            colors[k % colors.len()],
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series over integer x positions.
pub fn lines(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let mut s = frame(title, y_label, ymax);
    let colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let x_of = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    for i in 0..n {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{i}</text>",
            x_of(i),
            H - PAD + 16.0
        );
    }
    for (k, (name, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v, ymax)))
            .collect();
        let c = colors[k % colors.len()];
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - PAD * 2.5, PAD + 14.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
