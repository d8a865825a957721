//! Deterministic SVG rendering of a window and its counterfactual ensemble.
//!
//! One stacked panel per dimension: the original context + suspect as a
//! reference line, each member over the suspect span, colored by its
//! maximal score on a sequential scale from 0 to the threshold.

use std::fmt::Write as _;

use cfens_core::{DetectionRule, Ensemble, Error, Result, Window};
use ndarray::Array2;

/// Panels per document; larger selections must be paginated.
pub const MAX_PANELS: usize = 8;

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 150.0;
const GAP: f64 = 24.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 40.0;
const LEGEND_HEIGHT: f64 = 56.0;

/// Anchors of a perceptually ordered dark-to-light ramp.
const RAMP: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

/// Color of `score` on the scale `[0, theta]`, clamped at both ends.
pub fn color(score: f64, theta: f64) -> String {
    let x = if theta > 0.0 { (score / theta).clamp(0.0, 1.0) } else { 1.0 };
    let pos = x * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |u: f64, v: f64| (u + (v - u) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render `dims` (all dimensions when `None`) of `window` with `ensemble`.
pub fn render_svg(window: &Window, ensemble: &Ensemble, rule: &DetectionRule, dims: Option<&[usize]>) -> Result<String> {
    let all: Vec<usize> = (0..window.dims()).collect();
    let dims = dims.unwrap_or(&all);
    if dims.len() > MAX_PANELS {
        return Err(Error::TooManyDims {
            requested: dims.len(),
            max: MAX_PANELS,
        });
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= window.dims()) {
        return Err(Error::InvalidParameter {
            name: "dims",
            reason: format!("dimension {d} out of range for {} dimensions", window.dims()),
        });
    }
    let theta = rule.theta();
    let full = window.full();
    let len = full.nrows();
    let ctx = window.context_len();
    let plot_w = WIDTH - LEFT - RIGHT;
    let x_of = |t: usize| LEFT + if len > 1 { plot_w * t as f64 / (len - 1) as f64 } else { plot_w / 2.0 };
    let height = TOP + dims.len().max(1) as f64 * (PANEL_HEIGHT + GAP) + LEGEND_HEIGHT;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let title = format!(
        "{} · {} · suspect at {} · {} member(s)",
        window.origin.series,
        ensemble.method,
        window.origin.start,
        ensemble.len()
    );
    let _ = writeln!(svg, r#"<text x="{LEFT:.0}" y="22" font-size="13">{}</text>"#, escape(&title));

    for (panel, &d) in dims.iter().enumerate() {
        let top = TOP + panel as f64 * (PANEL_HEIGHT + GAP);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in full.column(d).iter().copied().chain(ensemble.suspects().flat_map(|m| m.column(d).to_vec())) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let y_of = |v: f64| top + PANEL_HEIGHT * (hi - v) / (hi - lo);

        let _ = writeln!(svg, r#"<g class="panel" data-dim="{d}">"#);
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{PANEL_HEIGHT:.2}" fill="#f2f2f2"/>"##,
            x_of(ctx),
            x_of(len - 1) - x_of(ctx)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{LEFT:.2}" y="{top:.2}" width="{plot_w:.2}" height="{PANEL_HEIGHT:.2}" fill="none" stroke="#999999"/>"##
        );
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">dim {d}</text>"#, top + 14.0);
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">{hi:.2}</text>"#, top + 28.0);
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">{lo:.2}</text>"#, top + PANEL_HEIGHT - 4.0);

        let original: Vec<(f64, f64)> = (0..len).map(|t| (x_of(t), y_of(full[[t, d]]))).collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="original" fill="none" stroke="#222222" stroke-width="1.5" points="{}"/>"##,
            polyline(&original)
        );
        for m in &ensemble.members {
            let score = m.max_score();
            let pts: Vec<(f64, f64)> = (0..m.suspect.nrows())
                .map(|s| (x_of(ctx + s), y_of(m.suspect[[s, d]])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="member" fill="none" stroke="{}" stroke-width="1.2" stroke-opacity="0.8" points="{}"><title>rank {} · max score {score:.4}</title></polyline>"#,
                color(score, theta),
                polyline(&pts),
                m.rank
            );
        }
        if ensemble.is_empty() {
            let _ = writeln!(
                svg,
                r##"<text class="failure" x="{:.2}" y="{:.2}" text-anchor="middle" fill="#b00020">no counterfactual found</text>"##,
                (x_of(ctx) + x_of(len - 1)) / 2.0,
                top + 16.0
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    let ly = height - LEGEND_HEIGHT + 12.0;
    let lw = 200.0;
    let _ = writeln!(svg, r#"<defs><linearGradient id="scale" x1="0" x2="1" y1="0" y2="0">"#);
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        let _ = writeln!(
            svg,
            r#"<stop offset="{f:.1}" stop-color="{}"/>"#,
            color(f * theta, theta)
        );
    }
    let _ = writeln!(svg, "</linearGradient></defs>");
    let _ = writeln!(svg, r#"<g class="legend">"#);
    let _ = writeln!(svg, r#"<text x="{LEFT:.2}" y="{:.2}">max score</text>"#, ly + 11.0);
    let lx = LEFT + 70.0;
    let _ = writeln!(
        svg,
        r##"<rect x="{lx:.2}" y="{ly:.2}" width="{lw:.2}" height="14" fill="url(#scale)" stroke="#999999"/>"##
    );
    let _ = writeln!(svg, r#"<text x="{lx:.2}" y="{:.2}" text-anchor="middle">0</text>"#, ly + 28.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">θ = {theta:.2}</text>"#,
        lx + lw,
        ly + 28.0
    );
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render `dims` (all when `None`) in pages of at most [`MAX_PANELS`].
pub fn render_pages(
    window: &Window,
    ensemble: &Ensemble,
    rule: &DetectionRule,
    dims: Option<&[usize]>,
) -> Result<Vec<String>> {
    let all: Vec<usize> = (0..window.dims()).collect();
    dims.unwrap_or(&all)
        .chunks(MAX_PANELS)
        .map(|page| render_svg(window, ensemble, rule, Some(page)))
        .collect()
}

/// Heat map of a perturbation map in `[0, 1]`: one row per dimension, one
/// column per suspect timestamp.
pub fn render_map_svg(map: &Array2<f64>, title: &str) -> String {
    const CELL: f64 = 24.0;
    let (steps, dims) = map.dim();
    let width = LEFT + steps as f64 * CELL + RIGHT;
    let height = TOP + dims as f64 * CELL + LEGEND_HEIGHT;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r#"<text x="{LEFT:.0}" y="22" font-size="13">{}</text>"#, escape(title));
    for d in 0..dims {
        let y = TOP + d as f64 * CELL;
        let _ = writeln!(svg, r#"<text x="6" y="{:.2}">dim {d}</text>"#, y + 16.0);
        for t in 0..steps {
            let v = map[[t, d]];
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y:.2}" width="{CELL:.2}" height="{CELL:.2}" fill="{}"><title>t {t} · dim {d} · {v:.4}</title></rect>"#,
                LEFT + t as f64 * CELL,
                color(v, 1.0)
            );
        }
    }
    let ly = TOP + dims as f64 * CELL + 20.0;
    let _ = writeln!(
        svg,
        r#"<text x="{LEFT:.2}" y="{ly:.2}">0 = unchanged, 1 = strongest perturbation</text>"#
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfens_core::{Member, Method, Origin};
    use ndarray::{array, Array2};

    fn window(dims: usize) -> Window {
        Window::new(
            Array2::from_shape_fn((6, dims), |(t, d)| (t + d) as f64),
            Array2::from_shape_fn((3, dims), |(t, _)| 10.0 * t as f64),
            Origin {
                series: "s".into(),
                start: 6,
            },
        )
        .unwrap()
    }

    fn member(w: &Window, score: f64, rank: usize) -> Member {
        Member::new(w.suspect.clone(), ndarray::Array1::from_elem(w.suspect_len(), score), rank)
    }

    #[test]
    fn color_scale_is_monotone_and_clamped() {
        assert_eq!(color(0.0, 0.5), "#440154");
        assert_eq!(color(0.5, 0.5), "#fde725");
        assert_eq!(color(0.9, 0.5), color(0.5, 0.5));
        assert_ne!(color(0.01, 0.5), color(0.49, 0.5));
        let green = |c: &str| u8::from_str_radix(&c[3..5], 16).unwrap();
        let mut last = 0;
        for i in 0..=50 {
            let g = green(&color(i as f64 / 100.0, 0.5));
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn singleton_ensemble() {
        let w = window(1);
        let e = Ensemble {
            method: Method::Ice,
            members: vec![member(&w, 0.2, 0)],
        };
        let svg = render_svg(&w, &e, &DetectionRule::default(), None).unwrap();
        assert_eq!(svg.matches(r#"class="member""#).count(), 1);
        assert!(svg.contains(&color(0.2, 0.5)));
        assert!(!svg.contains("no counterfactual found"));
        assert_eq!(svg, render_svg(&w, &e, &DetectionRule::default(), None).unwrap());
    }

    #[test]
    fn distinct_colors_for_distinct_scores() {
        let w = window(2);
        let e = Ensemble {
            method: Method::Dpe,
            members: vec![member(&w, 0.01, 0), member(&w, 0.49, 5)],
        };
        let svg = render_svg(&w, &e, &DetectionRule::default(), None).unwrap();
        assert!(svg.contains(&color(0.01, 0.5)) && svg.contains(&color(0.49, 0.5)));
        assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
    }

    #[test]
    fn empty_ensemble_is_annotated() {
        let w = window(1);
        let svg = render_svg(&w, &Ensemble::empty(Method::Ice), &DetectionRule::default(), None).unwrap();
        assert!(svg.contains("no counterfactual found"));
        assert!(svg.contains(r#"class="original""#));
    }

    #[test]
    fn pages_split_wide_windows() {
        let w = window(11);
        let pages = render_pages(&w, &Ensemble::empty(Method::Ice), &DetectionRule::default(), None).unwrap();
        assert_eq!(pages.len(), 2);
        assert_eq!(pages[0].matches(r#"class="panel""#).count(), 8);
        assert_eq!(pages[1].matches(r#"class="panel""#).count(), 3);
    }

    #[test]
    fn heat_map_has_one_cell_per_entry() {
        let map = Array2::from_shape_fn((3, 2), |(t, d)| (t + d) as f64 / 4.0);
        let svg = render_map_svg(&map, "map");
        assert_eq!(svg.matches("<title>t ").count(), 6);
        assert!(svg.contains(&color(0.75, 1.0)));
    }

    #[test]
    fn dimension_limits() {
        let w = window(9);
        let e = Ensemble::empty(Method::Ice);
        let rule = DetectionRule::default();
        assert!(matches!(render_svg(&w, &e, &rule, None), Err(Error::TooManyDims { requested: 9, max: 8 })));
        assert!(render_svg(&w, &e, &rule, Some(&[0, 8])).is_ok());
        assert!(render_svg(&w, &e, &rule, Some(&[9])).is_err());
        let flat = Window::new(array![[1.0], [1.0]], array![[1.0]], Origin::default()).unwrap();
        assert!(render_svg(&flat, &e, &rule, None).unwrap().contains("2.10"));
    }
}
