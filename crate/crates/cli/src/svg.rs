use std::fmt::Write;

use ndarray::Array2;
use serde_json::Value;

const CELL: usize = 28;
const MARGIN_LEFT: usize = 90;
const MARGIN_TOP: usize = 40;
const MARGIN_BOTTOM: usize = 70;
const BAR_WIDTH: usize = 16;
const BAR_GAP: usize = 30;
pub const SCALE_MIN: f64 = 0.0;
pub const SCALE_MAX: f64 = 1.0;

pub struct Heatmap<'a> {
    pub data: &'a Array2<f64>,
    pub title: &'a str,
    /// Label for rows (drawn on the left axis).
    pub row_label: &'a str,
    pub col_label: &'a str,
    pub metadata: Value,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White at the bottom of the scale to dark blue at the top.
fn color(v: f64) -> String {
    let t = if v.is_finite() {
        ((v - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(247.0, 8.0), mix(251.0, 48.0), mix(255.0, 107.0))
}

/// Renders a matrix as an SVG heatmap. Row 0 is drawn at the bottom so
/// layer indices grow upward, as in layer-by-layer CKA plots.
pub fn heatmap(h: &Heatmap<'_>) -> String {
    let (rows, cols) = h.data.dim();
    let plot_w = cols * CELL;
    let plot_h = rows * CELL;
    let width = MARGIN_LEFT + plot_w + BAR_GAP + BAR_WIDTH + 50;
    let height = MARGIN_TOP + plot_h + MARGIN_BOTTOM;
    let mut meta = h.metadata.clone();
    if let Value::Object(m) = &mut meta {
        m.insert("scale_min".into(), SCALE_MIN.into());
        m.insert("scale_max".into(), SCALE_MAX.into());
        m.insert("rows".into(), rows.into());
        m.insert("cols".into(), cols.into());
    }
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(w, "<metadata id=\"repsim\">{}</metadata>", escape(&meta.to_string()));
    let _ = writeln!(w, "<title>{}</title>", escape(h.title));
    let _ = writeln!(
        w,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        MARGIN_LEFT + plot_w / 2,
        escape(h.title)
    );
    for i in 0..rows {
        let y = MARGIN_TOP + (rows - 1 - i) * CELL;
        for j in 0..cols {
            let x = MARGIN_LEFT + j * CELL;
            let v = h.data[[i, j]];
            let _ = writeln!(
                w,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{i},{j}: {v:.6}</title></rect>"#,
                color(v)
            );
        }
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{i}</text>"#,
            MARGIN_LEFT - 6,
            y + CELL / 2
        );
    }
    for j in 0..cols {
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#,
            MARGIN_LEFT + j * CELL + CELL / 2,
            MARGIN_TOP + plot_h + 16
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2,
        MARGIN_TOP + plot_h + 40,
        escape(h.col_label)
    );
    let _ = writeln!(
        w,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        MARGIN_TOP + plot_h / 2,
        MARGIN_TOP + plot_h / 2,
        escape(h.row_label)
    );

    // color bar, top = SCALE_MAX
    let bar_x = MARGIN_LEFT + plot_w + BAR_GAP;
    let steps = 20;
    let step_h = plot_h.max(CELL * 3) as f64 / steps as f64;
    for k in 0..steps {
        let v = SCALE_MAX - (k as f64 + 0.5) / steps as f64 * (SCALE_MAX - SCALE_MIN);
        let _ = writeln!(
            w,
            r#"<rect x="{bar_x}" y="{:.2}" width="{BAR_WIDTH}" height="{:.2}" fill="{}"/>"#,
            MARGIN_TOP as f64 + k as f64 * step_h,
            step_h,
            color(v)
        );
    }
    let bar_bottom = MARGIN_TOP as f64 + steps as f64 * step_h;
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" dominant-baseline="middle">{SCALE_MAX}</text>"#,
        bar_x + BAR_WIDTH + 4,
        MARGIN_TOP
    );
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{bar_bottom:.2}" dominant-baseline="middle">{SCALE_MIN}</text>"#,
        bar_x + BAR_WIDTH + 4
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn labels_and_metadata() {
        let data = Array2::from_shape_vec((2, 3), vec![1.0, 0.5, 0.0, 0.2, 1.0, 0.9]).unwrap();
        let svg = heatmap(&Heatmap {
            data: &data,
            title: "a vs b",
            row_label: "a layer",
            col_label: "b <layer>",
            metadata: json!({"model_a": "a"}),
        });
        assert!(svg.contains(r#""scale_min":0.0"#));
        assert!(svg.contains(r#""scale_max":1.0"#));
        assert!(svg.contains("b &lt;layer&gt;"));
        assert_eq!(svg.matches("<rect").count(), 6 + 20);
        assert_eq!(color(0.0), "#f7fbff");
        assert_eq!(color(1.0), "#08306b");
        assert_eq!(color(7.0), color(1.0));
    }
}
