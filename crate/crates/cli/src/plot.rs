//! Minimal static SVG line plots with mean +/- std bands.

pub struct Series {
    pub label: String,
    pub color: &'static str,
    /// (x, mean, std) triples, x ascending.
    pub points: Vec<(f64, f64, f64)>,
}

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi - lo).is_finite() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(mag * 10.0);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Render series into a complete SVG document.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let x_min = all.clone().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = all
        .clone()
        .map(|p| p.1 - p.2)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let y_max = all.map(|p| p.1 + p.2).fold(f64::NEG_INFINITY, f64::max);
    let y_pad = (y_max - y_min).max(1e-9) * 0.05;
    let (y_min, y_max) = (y_min - y_pad, y_max + y_pad);
    let (x_min, x_max) = if x_max > x_min { (x_min, x_max) } else { (x_min, x_min + 1.0) };

    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| H - MARGIN_B - (y - y_min) / (y_max - y_min) * (H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));

    for tx in nice_ticks(x_min, x_max, 6) {
        let x = sx(tx);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{tx}</text>\n",
            MARGIN_T,
            H - MARGIN_B,
            H - MARGIN_B + 18.0
        ));
    }
    for ty in nice_ticks(y_min, y_max, 6) {
        let y = sy(ty);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{ty:.2}</text>\n",
            MARGIN_L,
            W - MARGIN_R,
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B,
        H - MARGIN_B,
        W / 2.0,
        H - 14.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    ));

    for s in series {
        if s.points.is_empty() {
            continue;
        }
        // Band: mean + std forward, mean - std backward.
        let mut band = String::from("M");
        for &(x, m, sd) in &s.points {
            band.push_str(&format!(" {:.1},{:.1}", sx(x), sy(m + sd)));
        }
        for &(x, m, sd) in s.points.iter().rev() {
            band.push_str(&format!(" {:.1},{:.1}", sx(x), sy(m - sd)));
        }
        band.push('Z');
        svg.push_str(&format!(
            "<path d=\"{band}\" fill=\"{}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            s.color
        ));
        let line: Vec<String> = s
            .points
            .iter()
            .map(|&(x, m, _)| format!("{:.1},{:.1}", sx(x), sy(m)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            line.join(" "),
            s.color
        ));
    }

    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            W - MARGIN_R - 120.0,
            W - MARGIN_R - 96.0,
            s.color,
            W - MARGIN_R - 90.0,
            y + 4.0,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_well_formed_svg() {
        let series = vec![Series {
            label: "ad".into(),
            color: PALETTE[0],
            points: (0..50).map(|i| (i as f64 * 20.0, i as f64 * 0.3, 0.5)).collect(),
        }];
        let svg = line_plot("returns", "environment steps", "return", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
        assert!(svg.matches("fill-opacity").count() == 1);
    }

    #[test]
    fn ticks_cover_the_range() {
        let t = nice_ticks(0.0, 100.0, 6);
        assert!(t.first().copied().unwrap() >= 0.0);
        assert!(t.last().copied().unwrap() <= 100.0 + 1e-9);
        assert!(t.len() >= 4);
    }
}
