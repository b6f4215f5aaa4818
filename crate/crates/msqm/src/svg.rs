//! Minimal SVG line plots for the benchmark sweep. Deterministic output:
//! fixed layout, fixed float formatting.

use std::fmt::Write;

pub struct Panel {
    pub title: String,
    pub ylabel: String,
    /// (x, y) points, drawn in order.
    pub points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 40.0;

/// Render panels side by side into one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let total_w = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{PANEL_H}\" \
         viewBox=\"0 0 {total_w} {PANEL_H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut out, panel, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

fn render_panel(out: &mut String, panel: &Panel, x0: f64) {
    let (xmin, xmax) = bounds(panel.points.iter().map(|p| p.0));
    let (ymin, ymax) = bounds(panel.points.iter().map(|p| p.1));
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| x0 + MARGIN_L + (x - xmin) / (xmax - xmin) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h;

    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        x0 + PANEL_W / 2.0,
        panel.title
    );
    // axes
    let _ = write!(
        out,
        "<path d=\"M {:.1} {:.1} L {:.1} {:.1} L {:.1} {:.1}\" stroke=\"black\" fill=\"none\"/>\n",
        x0 + MARGIN_L,
        MARGIN_T,
        x0 + MARGIN_L,
        PANEL_H - MARGIN_B,
        x0 + PANEL_W - MARGIN_R,
        PANEL_H - MARGIN_B
    );
    // y label, rotated
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 {:.1} {:.1})\">{}</text>\n",
        x0 + 14.0,
        PANEL_H / 2.0,
        x0 + 14.0,
        PANEL_H / 2.0,
        panel.ylabel
    );
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">r</text>\n",
        x0 + MARGIN_L + plot_w / 2.0,
        PANEL_H - 8.0
    );

    // ticks: min and max on both axes
    for (v, anchor) in [(xmin, "start"), (xmax, "end")] {
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\">{}</text>\n",
            px(v),
            PANEL_H - MARGIN_B + 14.0,
            trim_float(v)
        );
    }
    for v in [ymin, ymax] {
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            x0 + MARGIN_L - 4.0,
            py(v) + 4.0,
            trim_float(v)
        );
    }

    let mut path = String::new();
    for (i, &(x, y)) in panel.points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(path, "{cmd} {:.2} {:.2} ", px(x), py(y));
    }
    let _ = write!(
        out,
        "<path d=\"{}\" stroke=\"#0a6fb8\" stroke-width=\"1.5\" fill=\"none\"/>\n",
        path.trim_end()
    );
    for &(x, y) in &panel.points {
        let _ = write!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#0a6fb8\"/>\n",
            px(x),
            py(y)
        );
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn trim_float(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_three_panels_deterministically() {
        let panels: Vec<Panel> = (0..3)
            .map(|i| Panel {
                title: format!("panel {i}"),
                ylabel: "y".into(),
                points: vec![(0.1, 1.0), (0.5, 2.0), (1.0, 4.0)],
            })
            .collect();
        let a = render(&panels);
        let b = render(&panels);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg "));
        assert!(a.contains("panel 2"));
        assert_eq!(a.matches("<circle").count(), 9);
    }

    #[test]
    fn constant_series_keeps_finite_scale() {
        let p = Panel {
            title: "flat".into(),
            ylabel: "y".into(),
            points: vec![(0.0, 5.0), (1.0, 5.0)],
        };
        let svg = render(&[p]);
        assert!(!svg.contains("NaN"));
    }
}
