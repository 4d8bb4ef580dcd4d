//! Hand-rolled SVG primitives for the report plots: a multi-series line
//! chart and a bar chart with an optional overlay series. Enough for
//! histograms and usage trends without a plotting stack.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(y_label: &str, x_label: &str) -> String {
    let x0 = MARGIN_L;
    let y0 = HEIGHT - MARGIN_B;
    let x1 = WIDTH - MARGIN_R;
    let y1 = MARGIN_T;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
}

fn x_pos(i: usize, n: usize) -> f64 {
    let span = WIDTH - MARGIN_L - MARGIN_R;
    if n <= 1 {
        return MARGIN_L + span / 2.0;
    }
    MARGIN_L + span * i as f64 / (n - 1) as f64
}

fn y_pos(v: f64, lo: f64, hi: f64) -> f64 {
    let span = HEIGHT - MARGIN_T - MARGIN_B;
    let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    HEIGHT - MARGIN_B - span * frac.clamp(0.0, 1.0)
}

/// Multi-series line chart; x values shared across series.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    xs: &[f64],
    series: &[(String, Vec<f64>)],
    y_range: Option<(f64, f64)>,
) -> String {
    let mut out = header(title);
    out.push_str(&axes(y_label, x_label));
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = y_range.unwrap_or_else(|| {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        (lo, hi)
    });
    // y ticks
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_pos(v, lo, hi);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN_L,
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0
        ));
    }
    // x ticks (first, middle, last)
    if !xs.is_empty() {
        for &i in &[0usize, xs.len() / 2, xs.len() - 1] {
            let x = x_pos(i, xs.len());
            out.push_str(&format!(
                "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_B + 16.0,
                xs[i]
            ));
        }
    }
    for (s, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x_pos(i, ys.len()), y_pos(v, lo, hi)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            MARGIN_L + 8.0,
            MARGIN_T + 14.0 * (s as f64 + 1.0),
            escape(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with an optional [0, 1] overlay series drawn as points.
pub fn bar_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    labels: &[String],
    counts: &[usize],
    overlay: Option<(&str, &[Option<f64>])>,
) -> String {
    let mut out = header(title);
    out.push_str(&axes(y_label, x_label));
    let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let n = counts.len().max(1);
    let span = WIDTH - MARGIN_L - MARGIN_R;
    let bar_w = (span / n as f64) * 0.8;
    for (i, &c) in counts.iter().enumerate() {
        let x = MARGIN_L + span * (i as f64 + 0.1) / n as f64;
        let y = y_pos(c as f64, 0.0, max);
        let h = (HEIGHT - MARGIN_B) - y;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" fill=\"#1f77b4\" opacity=\"0.8\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            HEIGHT - MARGIN_B + 16.0,
            escape(&labels[i])
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{c}</text>\n",
            x + bar_w / 2.0,
            y - 4.0
        ));
    }
    if let Some((name, values)) = overlay {
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let x = MARGIN_L + span * (i as f64 + 0.5) / n as f64;
                let y = y_pos(*v, 0.0, 1.0);
                out.push_str(&format!(
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#d62728\"/>\n"
                ));
            }
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#d62728\">{} (right axis 0-1)</text>\n",
            MARGIN_L + 8.0,
            MARGIN_T + 14.0,
            escape(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_wellformed() {
        let svg = line_chart(
            "usage",
            "iteration",
            "rate",
            &[0.0, 1.0, 2.0],
            &[("a".to_string(), vec![0.0, 0.5, 1.0]), ("b".to_string(), vec![1.0, 0.5, 0.0])],
            Some((0.0, 1.0)),
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn bar_chart_handles_empty_overlay_bins() {
        let svg = bar_chart(
            "hist",
            "log10 w",
            "count",
            &["-3".into(), "-2".into(), "-1".into()],
            &[5, 0, 7],
            Some(("accuracy", &[Some(0.2), None, Some(0.9)])),
        );
        assert_eq!(svg.matches("<rect").count(), 1 + 3); // background + bars
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
