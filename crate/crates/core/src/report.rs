//! CSV and SVG emission. Output depends only on the values passed in, so identical inputs give
//! identical bytes.

use std::fmt::Write as _;

use crate::eval::EvalReport;
use crate::tensor::Tensor;

const PALETTE: [&str; 12] = [
    "#e6194b", "#f58231", "#ffe119", "#bfef45", "#3cb44b", "#42d4f4", "#4363d8", "#911eb4",
    "#f032e6", "#a9a9a9", "#9a6324", "#000075",
];

pub fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "nan".into(),
    }
}

/// `metric,value` rows: v_measure, homogeneity, completeness, cd_r, inertia, pca_ratio_1.. .
pub fn scores_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    let rows = [
        ("v_measure", Some(report.scores.v)),
        ("homogeneity", Some(report.scores.homogeneity)),
        ("completeness", Some(report.scores.completeness)),
        ("cd_r", report.cd_r),
        ("inertia", Some(report.inertia)),
    ];
    for (name, v) in rows {
        let _ = writeln!(out, "{name},{}", num(v));
    }
    for (i, r) in report.pca.variance_ratios.iter().enumerate() {
        let _ = writeln!(out, "pca_ratio_{},{}", i + 1, num(Some(*r)));
    }
    out
}

/// Square matrix with a header row and a leading label column.
pub fn matrix_csv(m: &Tensor, names: &[String]) -> String {
    let mut out = String::from("label");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (i, n) in names.iter().enumerate() {
        out.push_str(n);
        for j in 0..m.cols() {
            let _ = write!(out, ",{}", num(Some(m.get(i, j))));
        }
        out.push('\n');
    }
    out
}

/// Scatter plot of the first two columns of `coords`, one colour per label, with a legend.
pub fn scatter_svg(coords: &Tensor, labels: &[usize], names: &[String], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    const LEGEND: f64 = 120.0;
    let n = coords.rows();
    let xs: Vec<f64> = (0..n).map(|i| coords.get(i, 0)).collect();
    let ys: Vec<f64> = (0..n).map(|i| if coords.cols() > 1 { coords.get(i, 1) } else { 0.0 }).collect();
    let bounds = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
        }
    };
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let span = (x1 - x0).max(y1 - y0);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let inner = SIZE - 2.0 * PAD;
    let px = |x: f64| PAD + inner * (0.5 + (x - cx) / span);
    let py = |y: f64| PAD + inner * (0.5 - (y - cy) / span);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SIZE + LEGEND,
        h = SIZE
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="16" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    for i in 0..n {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{}" fill-opacity="0.75"/>"#,
            px(xs[i]),
            py(ys[i]),
            color(labels[i])
        );
    }
    for (k, name) in names.iter().enumerate() {
        let y = PAD + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<circle cx="{:.3}" cy="{:.3}" r="5" fill="{}"/><text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11">{}</text>"#,
            SIZE + 8.0,
            y,
            color(k),
            SIZE + 18.0,
            y + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
