//! SVG confusion-matrix heatmaps.
//!
//! Output is plain SVG text: diffable, versionable, and viewable
//! anywhere without a raster pipeline. Cells are shaded by row-wise
//! percentage, so each row reads as "of the true class, how often each
//! prediction happened".

use std::fmt::Write as _;

use crate::dataeval::ConfusionMatrix;
use crate::error::{Error, Result};

const CELL: f64 = 56.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 96.0;
const PAD: f64 = 12.0;

/// Linear white-to-blue shade for a fraction in [0, 1].
fn shade(fraction: f64) -> String {
    let t = fraction.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    format!("rgb({},{},{})", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a confusion matrix as an SVG heatmap. Rows are true classes,
/// columns predictions; each cell shows its row percentage to one
/// decimal and carries the raw count as a hover title.
pub fn confusion_heatmap(matrix: &ConfusionMatrix) -> String {
    let k = matrix.classes().len();
    let width = LEFT + k as f64 * CELL + PAD;
    let height = TOP + k as f64 * CELL + PAD;
    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    write!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">predicted class</text>\n",
        LEFT + k as f64 * CELL / 2.0
    )
    .unwrap();
    write!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 16 {})\">true class</text>\n",
        TOP + k as f64 * CELL / 2.0,
        TOP + k as f64 * CELL / 2.0
    )
    .unwrap();
    for (i, class) in matrix.classes().iter().enumerate() {
        let cx = LEFT + (i as f64 + 0.5) * CELL;
        write!(
            svg,
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"start\" \
             transform=\"rotate(-45 {cx} {})\">{}</text>\n",
            TOP - 8.0,
            TOP - 8.0,
            escape(class)
        )
        .unwrap();
        let cy = TOP + (i as f64 + 0.5) * CELL + 4.0;
        write!(
            svg,
            "<text x=\"{}\" y=\"{cy}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            escape(class)
        )
        .unwrap();
    }
    for t in 0..k {
        let row_total = matrix.row_total(t);
        for p in 0..k {
            let count = matrix.count(t, p);
            let fraction = if row_total == 0 { 0.0 } else { count as f64 / row_total as f64 };
            let x = LEFT + p as f64 * CELL;
            let y = TOP + t as f64 * CELL;
            write!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" \
                 stroke=\"#999\"><title>{} as {}: {count}</title></rect>\n",
                shade(fraction),
                escape(&matrix.classes()[t]),
                escape(&matrix.classes()[p]),
            )
            .unwrap();
            let color = if fraction > 0.5 { "white" } else { "#1a1a1a" };
            write!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{color}\">{:.1}%</text>\n",
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                100.0 * fraction
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads a confusion matrix back from its CSV form: a class-name header
/// row, then one row per true class led by its name.
pub fn parse_confusion_csv(text: &str) -> Result<ConfusionMatrix> {
    let bad = |message: String| Error::Config(format!("confusion csv: {message}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty input".to_string()))?;
    let mut fields = header.split(',');
    let first = fields.next().unwrap_or_default();
    if first != "class" {
        return Err(bad(format!("header must start with \"class\", got {first:?}")));
    }
    let classes: Vec<String> = fields.map(str::to_string).collect();
    if classes.is_empty() {
        return Err(bad("header names no classes".to_string()));
    }
    let mut counts = Vec::with_capacity(classes.len() * classes.len());
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default();
        if i >= classes.len() {
            return Err(bad(format!("more rows than the {} header classes", classes.len())));
        }
        if name != classes[i] {
            return Err(bad(format!("row {i} is {name:?}, expected {:?}", classes[i])));
        }
        let row: Vec<u64> = fields
            .map(|f| f.trim().parse::<u64>().map_err(|_| bad(format!("bad count {f:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != classes.len() {
            return Err(bad(format!(
                "row {name:?} has {} counts, expected {}",
                row.len(),
                classes.len()
            )));
        }
        counts.extend(row);
    }
    ConfusionMatrix::from_counts(classes, counts)
}
