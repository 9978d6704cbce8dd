//! Stacked-area SVG of verdict proportions against the number of top-ranked
//! detections considered.

use std::fmt::Write as _;

use super::TrendPoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

const COLOURS: [(&str, &str); 3] = [("Cor", "#4c9a2a"), ("Loc", "#e0a526"), ("BG", "#c0392b")];

/// `points` must be ordered by `d`. A dashed vertical marker is drawn at
/// `marker_d` (typically the number of labelled people).
pub fn trend_svg(points: &[TrendPoint], marker_d: usize) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let max_d = points.last().map_or(1, |p| p.d).max(marker_d).max(1) as f64;
    let x = |d: f64| LEFT + plot_w * d / max_d;
    let y = |frac: f64| TOP + plot_h * (1.0 - frac);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    if !points.is_empty() {
        let mut lower = vec![0.0; points.len()];
        for (k, (name, colour)) in COLOURS.iter().enumerate() {
            let upper: Vec<f64> = points
                .iter()
                .zip(&lower)
                .map(|(p, lo)| lo + [p.cor, p.loc, p.bg][k])
                .collect();
            let mut path = String::new();
            for (i, p) in points.iter().enumerate() {
                let _ = write!(
                    path,
                    "{}{:.2},{:.2} ",
                    if i == 0 { "M" } else { "L" },
                    x(p.d as f64),
                    y(upper[i])
                );
            }
            for (i, p) in points.iter().enumerate().rev() {
                let _ = write!(path, "L{:.2},{:.2} ", x(p.d as f64), y(lower[i]));
            }
            let _ = writeln!(
                s,
                r#"<path d="{}Z" fill="{colour}" stroke="none"><title>{name}</title></path>"#,
                path
            );
            lower = upper;
        }
    }

    // axes
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        y(0.0),
        x(max_d),
        y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        y(0.0),
        y(1.0)
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{f:.2}</text>"#,
            LEFT - 6.0,
            y(f) + 4.0
        );
    }
    for t in 0..=4 {
        let d = max_d * t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(d),
            y(0.0) + 16.0,
            d.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">number of top-scoring detections (D)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">proportion of detections</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    if marker_d > 0 {
        let mx = x(marker_d as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{mx:.2}" y1="{}" x2="{mx:.2}" y2="{}" stroke="#777777" stroke-width="2" stroke-dasharray="6,4"/>"##,
            y(0.0),
            y(1.0)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{}" fill="#555555">D = {marker_d}</text>"##,
            mx + 4.0,
            TOP - 8.0
        );
    }

    for (k, (name, colour)) in COLOURS.iter().enumerate() {
        let lx = WIDTH - RIGHT - 150.0 + 50.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="8" width="10" height="10" fill="{colour}"/><text x="{}" y="17">{name}</text>"#,
            lx + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}
