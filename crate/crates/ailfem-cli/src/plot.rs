//! Static SVG charts: log-log rate plots with reference-slope guides, and
//! linear per-mesh diagnostic plots. No external tooling; the output is a
//! self-contained SVG document.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color_index: usize,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, color_index: usize) -> Self {
        Series {
            label: label.into(),
            points,
            color_index,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

enum Scale {
    Linear,
    Log,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log => v.log10(),
        }
    }
}

struct Frame {
    x: Scale,
    y: Scale,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_series(series: &[Series], x: Scale, y: Scale) -> Frame {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for s in series {
            for &(px, py) in &s.points {
                if matches!(x, Scale::Log) && px <= 0.0 {
                    continue;
                }
                if matches!(y, Scale::Log) && py <= 0.0 {
                    continue;
                }
                let mx = x.map(px);
                let my = y.map(py);
                x_min = x_min.min(mx);
                x_max = x_max.max(mx);
                y_min = y_min.min(my);
                y_max = y_max.max(my);
            }
        }
        if !x_min.is_finite() {
            (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
        }
        if x_max - x_min < 1e-12 {
            x_max = x_min + 1.0;
        }
        if y_max - y_min < 1e-12 {
            y_max = y_min + 1.0;
        }
        let pad_x = 0.04 * (x_max - x_min);
        let pad_y = 0.06 * (y_max - y_min);
        Frame {
            x,
            y,
            x_min: x_min - pad_x,
            x_max: x_max + pad_x,
            y_min: y_min - pad_y,
            y_max: y_max + pad_y,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let t = (self.x.map(v) - self.x_min) / (self.x_max - self.x_min);
        MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, v: f64) -> f64 {
        let t = (self.y.map(v) - self.y_min) / (self.y_max - self.y_min);
        HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut d = lo.floor() as i64;
    while (d as f64) <= hi.ceil() {
        if (d as f64) >= lo - 1e-9 && (d as f64) <= hi + 1e-9 {
            out.push(d as f64);
        }
        d += 1;
    }
    out
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 7.0)
        .unwrap_or(mag * 10.0);
    let mut out = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

fn format_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v as i64)
    } else if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn render(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    frame: &Frame,
    guide_slope: Option<f64>,
) -> String {
    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>
"#,
        0.5 * WIDTH,
        esc(title)
    ));

    // Axes box.
    svg.push_str(&format!(
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>
"##,
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    ));

    // Ticks and gridlines.
    let (x_log, y_log) = (matches!(frame.x, Scale::Log), matches!(frame.y, Scale::Log));
    let xt = if x_log {
        log_ticks(frame.x_min, frame.x_max)
    } else {
        linear_ticks(frame.x_min, frame.x_max)
    };
    let yt = if y_log {
        log_ticks(frame.y_min, frame.y_max)
    } else {
        linear_ticks(frame.y_min, frame.y_max)
    };
    for &t in &xt {
        let v = if x_log { 10f64.powf(t) } else { t };
        let x = frame.px(v);
        svg.push_str(&format!(
            r##"<line x1="{x:.1}" y1="{MARGIN_T}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>
<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>
"##,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 18.0,
            format_tick(t, x_log)
        ));
    }
    for &t in &yt {
        let v = if y_log { 10f64.powf(t) } else { t };
        let y = frame.py(v);
        svg.push_str(&format!(
            r##"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>
<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>
"##,
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0,
            format_tick(t, y_log)
        ));
    }

    // Axis labels.
    svg.push_str(&format!(
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>
"#,
        0.5 * (MARGIN_L + WIDTH - MARGIN_R),
        HEIGHT - 14.0,
        esc(x_label),
        0.5 * (MARGIN_T + HEIGHT - MARGIN_B),
        0.5 * (MARGIN_T + HEIGHT - MARGIN_B),
        esc(y_label)
    ));

    // Reference slope guide (log-log charts only).
    if let (Some(slope), true, true) = (guide_slope, x_log, y_log) {
        let x0 = frame.x_min + 0.45 * (frame.x_max - frame.x_min);
        let x1 = frame.x_max - 0.05 * (frame.x_max - frame.x_min);
        // Anchor near the top-right of the data band.
        let y0 = frame.y_min + 0.75 * (frame.y_max - frame.y_min);
        let y1 = y0 + slope * (x1 - x0);
        svg.push_str(&format!(
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#888" stroke-dasharray="6 4"/>
<text x="{:.1}" y="{:.1}" fill="#666">slope {slope}</text>
"##,
            frame.px(10f64.powf(x0)),
            frame.py(10f64.powf(y0)),
            frame.px(10f64.powf(x1)),
            frame.py(10f64.powf(y1)),
            frame.px(10f64.powf(x0)) + 8.0,
            frame.py(10f64.powf(y0)) - 8.0,
        ));
    }

    // Data.
    for s in series {
        let color = PALETTE[s.color_index % PALETTE.len()];
        let dash = if s.dashed {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        let mut path = String::new();
        for &(x, y) in &s.points {
            if (x_log && x <= 0.0) || (y_log && y <= 0.0) {
                continue;
            }
            let cmd = if path.is_empty() { 'M' } else { 'L' };
            path.push_str(&format!("{cmd}{:.2} {:.2} ", frame.px(x), frame.py(y)));
        }
        svg.push_str(&format!(
            r#"<path d="{path}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>
"#
        ));
        for &(x, y) in &s.points {
            if (x_log && x <= 0.0) || (y_log && y <= 0.0) {
                continue;
            }
            svg.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{color}"/>
"#,
                frame.px(x),
                frame.py(y)
            ));
        }
    }

    // Legend.
    let mut ly = MARGIN_T + 14.0;
    for s in series {
        let color = PALETTE[s.color_index % PALETTE.len()];
        svg.push_str(&format!(
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>
<text x="{:.1}" y="{:.1}">{}</text>
"#,
            MARGIN_L + 10.0,
            ly - 4.0,
            MARGIN_L + 34.0,
            ly - 4.0,
            MARGIN_L + 40.0,
            ly,
            esc(&s.label)
        ));
        ly += 16.0;
    }

    svg.push_str("</svg>\n");
    svg
}

/// Log-log chart with an optional dashed reference-slope guide line.
pub fn log_log_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    guide_slope: Option<f64>,
) -> String {
    let frame = Frame::from_series(series, Scale::Log, Scale::Log);
    render(title, x_label, y_label, series, &frame, guide_slope)
}

/// Linear-axes chart.
pub fn linear_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::from_series(series, Scale::Linear, Scale::Linear);
    render(title, x_label, y_label, series, &frame, None)
}
