//! JSON, CSV and SVG renderings of training and evaluation results.

use serde::Serialize;

use mcinet_core::train::ComparisonReport;

pub const COMPARISON_HEADER: &str = "architecture,subject_accuracy,slice_accuracy,params,train_seconds";

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

/// A result together with the configuration that produced it.
#[derive(Debug, Serialize)]
pub struct WithConfig<'a, C: Serialize, T: Serialize> {
    pub config: &'a C,
    #[serde(flatten)]
    pub body: T,
}

pub fn comparison_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.architecture, r.subject_accuracy, r.slice_accuracy, r.params, r.train_seconds
        ));
    }
    out
}

pub const PLOT_HEIGHT: f64 = 300.0;
pub const BASELINE: f64 = 340.0;
const BAR_WIDTH: f64 = 80.0;
const GAP: f64 = 40.0;
const LEFT: f64 = 60.0;

/// Bar chart of subject accuracy, one bar per row in report order. A bar's
/// height is `accuracy · 300` px.
pub fn comparison_svg(report: &ComparisonReport) -> String {
    let width = LEFT * 2.0 + report.rows.len() as f64 * (BAR_WIDTH + GAP);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"400\" viewBox=\"0 0 {width:.0} 400\">\n"
    ));
    s.push_str("<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">Subject accuracy by architecture</text>\n",
        width / 2.0
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = BASELINE - tick * PLOT_HEIGHT;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#cccccc\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.0}%</text>\n",
            LEFT - 10.0,
            width - LEFT + 10.0,
            LEFT - 14.0,
            y + 4.0,
            tick * 100.0
        ));
    }
    for (i, r) in report.rows.iter().enumerate() {
        let x = LEFT + GAP / 2.0 + i as f64 * (BAR_WIDTH + GAP);
        let h = r.subject_accuracy.clamp(0.0, 1.0) * PLOT_HEIGHT;
        let y = BASELINE - h;
        let centre = x + BAR_WIDTH / 2.0;
        s.push_str(&format!(
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{BAR_WIDTH:.2}\" height=\"{h:.2}\" fill=\"#4472c4\"/>\n\
             <text x=\"{centre:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{:.2}%</text>\n\
             <text x=\"{centre:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            y - 6.0,
            r.subject_accuracy * 100.0,
            BASELINE + 18.0,
            r.architecture
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{BASELINE:.2}\" x2=\"{:.2}\" y2=\"{BASELINE:.2}\" stroke=\"black\"/>\n",
        LEFT - 10.0,
        width - LEFT + 10.0
    ));
    s.push_str("</svg>\n");
    s
}
