//! Static SVG heatmaps: a ranked single-column head chart and a square
//! similarity matrix.

use std::fmt::Write as _;

const SCALE: [&str; 5] = ["#f7fbff", "#c6dbef", "#6baed6", "#2171b5", "#08306b"];
const CELL_W: usize = 90;
const CELL_H: usize = 22;
const LABEL_W: usize = 70;
const TITLE_H: usize = 30;

fn bucket(v: f64) -> usize {
    if !v.is_finite() || v <= 0.0 {
        return 0;
    }
    ((v * 5.0) as usize).min(4)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn cell(out: &mut String, x: usize, y: usize, w: usize, v: f64, text: &str) {
    let b = bucket(v);
    let ink = if b >= 3 { "#ffffff" } else { "#000000" };
    let _ = writeln!(
        out,
        r##"<rect x="{x}" y="{y}" width="{w}" height="{CELL_H}" fill="{}" stroke="#ffffff"/>"##,
        SCALE[b]
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" fill="{ink}">{}</text>"#,
        x + w / 2,
        y + CELL_H - 7,
        escape(text)
    );
}

fn legend(out: &mut String, x: usize, y: usize) {
    for (i, c) in SCALE.iter().enumerate() {
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{y}" width="18" height="10" fill="{c}" stroke="#999999"/>"##,
            x + i * 18
        );
    }
    let _ = writeln!(out, r#"<text x="{x}" y="{}" font-size="9">0</text>"#, y + 20);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="9">1</text>"#, x + 84, y + 20);
}

/// One row per head, sorted by descending display score (ties keep input
/// order), each cell annotated with the raw score.
pub fn ranked_heatmap(title: &str, rows: &[(String, f64, f64)]) -> String {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].1.total_cmp(&rows[a].1).then(a.cmp(&b)));
    let width = LABEL_W + CELL_W + 20;
    let height = TITLE_H + rows.len() * CELL_H + 40;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<text x="10" y="20" font-size="13">{}</text>"#, escape(title));
    for (i, &r) in order.iter().enumerate() {
        let (label, display, raw) = &rows[r];
        let y = TITLE_H + i * CELL_H;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            LABEL_W - 6,
            y + CELL_H - 7,
            escape(label)
        );
        cell(&mut out, LABEL_W, y, CELL_W, *display, &format!("{raw:.3}"));
    }
    legend(&mut out, LABEL_W, TITLE_H + rows.len() * CELL_H + 10);
    out.push_str("</svg>\n");
    out
}

/// Square matrix with names on both axes.
pub fn matrix_heatmap(title: &str, names: &[String], values: &[Vec<f64>]) -> String {
    let n = names.len();
    let side = 60;
    let left = LABEL_W + 40;
    let width = left + n * side + 20;
    let height = TITLE_H + 20 + n * CELL_H + 40;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<text x="10" y="20" font-size="13">{}</text>"#, escape(title));
    for (j, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            left + j * side + side / 2,
            TITLE_H + 12,
            escape(name)
        );
    }
    for (i, name) in names.iter().enumerate() {
        let y = TITLE_H + 20 + i * CELL_H;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            left - 6,
            y + CELL_H - 7,
            escape(name)
        );
        for j in 0..n {
            let v = values[i][j];
            cell(&mut out, left + j * side, y, side, v, &format!("{v:.2}"));
        }
    }
    legend(&mut out, left, TITLE_H + 20 + n * CELL_H + 10);
    out.push_str("</svg>\n");
    out
}
