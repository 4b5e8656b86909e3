//! Minimal SVG log-log line charts: fixed 800x600 canvas, decade ticks,
//! polyline series, vertical error bars, and a text legend. No external
//! plotting dependency; the output is a static figure.

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 70.0;

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// One plotted series. Error bars, when present, span `y - err ..= y + err`
/// per point (entries may be zero for no bar).
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub err: Option<Vec<f64>>,
    pub dashed: bool,
}

struct LogAxis {
    lo: f64,
    hi: f64,
}

impl LogAxis {
    fn from_values(values: impl Iterator<Item = f64>) -> LogAxis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v > 0.0 && v.is_finite() {
                let l = v.log10();
                lo = lo.min(l);
                hi = hi.max(l);
            }
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 0.5 {
            let mid = 0.5 * (lo + hi);
            lo = mid - 0.25;
            hi = mid + 0.25;
        }
        let pad = 0.05 * (hi - lo);
        LogAxis {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn decades(&self) -> Vec<i32> {
        (self.lo.ceil() as i32..=self.hi.floor() as i32).collect()
    }
}

fn fx(axis: &LogAxis, v: f64) -> f64 {
    let t = (v.log10() - axis.lo) / (axis.hi - axis.lo);
    MARGIN_LEFT + t * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
}

fn fy(axis: &LogAxis, v: f64) -> f64 {
    let t = (v.log10() - axis.lo) / (axis.hi - axis.lo);
    HEIGHT - MARGIN_BOTTOM - t * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
}

fn decade_label(exp: i32) -> String {
    format!("1e{exp}")
}

/// Render a log-log chart of the given series. Points with nonpositive
/// coordinates are dropped from the drawing (they cannot appear on log
/// axes).
pub fn render_loglog(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xaxis = LogAxis::from_values(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yaxis = LogAxis::from_values(series.iter().flat_map(|s| {
        let errs = s.err.as_deref();
        s.points.iter().enumerate().flat_map(move |(i, p)| {
            let e = errs.and_then(|es| es.get(i).copied()).unwrap_or(0.0);
            [p.1 - e, p.1, p.1 + e]
        })
    }));

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"18\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes frame.
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
    out.push_str(&format!(
        "<rect x=\"{x0}\" y=\"{y1}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"black\"/>\n",
        x1 - x0,
        y0 - y1
    ));

    // Decade ticks and grid lines.
    for exp in xaxis.decades() {
        let x = fx(&xaxis, 10f64.powi(exp));
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{y1}\" stroke=\"#dddddd\"/>\n"
        ));
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 6.0
        ));
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            y0 + 22.0,
            decade_label(exp)
        ));
    }
    for exp in yaxis.decades() {
        let y = fy(&yaxis, 10f64.powi(exp));
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.2}\" x2=\"{x1}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n"
        ));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{x0}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            x0 - 6.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            x0 - 10.0,
            y + 4.0,
            decade_label(exp)
        ));
    }

    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 20.0,
        escape(xlabel)
    ));
    out.push_str(&format!(
        "<text x=\"24\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\" transform=\"rotate(-90 24 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let mut path = String::new();
        for &(x, y) in &s.points {
            if x > 0.0 && y > 0.0 {
                path.push_str(&format!("{:.2},{:.2} ", fx(&xaxis, x), fy(&yaxis, y)));
            }
        }
        if !path.is_empty() {
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"2\"{dash}/>\n",
                path.trim_end()
            ));
        }
        if let Some(errs) = &s.err {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let e = errs.get(i).copied().unwrap_or(0.0);
                if x <= 0.0 || y <= 0.0 || e <= 0.0 {
                    continue;
                }
                let px = fx(&xaxis, x);
                let top = (y + e).max(f64::MIN_POSITIVE);
                let bot = (y - e).max(y * 1e-3); // clip below-zero bars on the log axis
                out.push_str(&format!(
                    "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" \
                     stroke=\"{color}\"/>\n",
                    fy(&yaxis, bot),
                    fy(&yaxis, top)
                ));
            }
        }
        for &(x, y) in &s.points {
            if x > 0.0 && y > 0.0 {
                out.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    fx(&xaxis, x),
                    fy(&yaxis, y)
                ));
            }
        }
    }

    // Legend, top-right inside the frame.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = y1 + 18.0 + 18.0 * si as f64;
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{color}\" \
             stroke-width=\"2\"{dash}/>\n",
            x1 - 180.0,
            x1 - 150.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
            x1 - 144.0,
            ly + 4.0,
            escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
