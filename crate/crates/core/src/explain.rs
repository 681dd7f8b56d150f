//! Attention reports: per-sample saliency from beat and rhythm attention,
//! channel importance, JSON and SVG output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EcgRecord;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelOutput};
use crate::numcore::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub record_id: String,
    pub lead_names: Vec<String>,
    pub class_names: Vec<String>,
    /// `saliency[c][t]` in `[0, 1]`; zero past the last whole window.
    pub saliency: Vec<Vec<f64>>,
    /// Channel attention `γ`.
    pub channel_importance: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Map sample `i` of a `window`-sample beat onto one of `reduced` CNN
/// output positions, each covering a contiguous run of samples.
pub fn upsample_position(i: usize, window: usize, reduced: usize) -> usize {
    (i * reduced / window).min(reduced - 1)
}

/// `s[c][k·W + i] = β[c][k] · α[c][k][pos(i)]`, min-max normalized over the
/// whole record.
pub fn build_report<T: Scalar>(
    output: &ModelOutput<T>,
    record: &EcgRecord,
    config: &ModelConfig,
    class_names: &[String],
) -> Result<AttentionReport> {
    record.validate()?;
    let (m, t) = (record.num_leads(), record.num_samples());
    let w = config.window_length;
    let wb = config.reduced_length();
    let n = t / w;
    let shape_ok = output.beat_attention.len() == m
        && output.rhythm_attention.len() == m
        && output.channel_attention.len() == m
        && output.beat_attention.iter().all(|c| c.len() == n && c.iter().all(|a| a.len() == wb))
        && output.rhythm_attention.iter().all(|b| b.len() == n);
    if !shape_ok {
        return Err(Error::Contract(format!(
            "model output does not match a {m}-lead, {t}-sample record with window {w} ({n} beats of {wb} positions)"
        )));
    }
    if output.logits.len() != class_names.len() {
        return Err(Error::Contract(format!("{} logits for {} classes", output.logits.len(), class_names.len())));
    }

    let mut saliency = vec![vec![0.0; t]; m];
    for (c, row) in saliency.iter_mut().enumerate() {
        for k in 0..n {
            let beta = output.rhythm_attention[c][k].as_f64();
            let alpha = &output.beat_attention[c][k];
            for i in 0..w {
                row[k * w + i] = beta * alpha[upsample_position(i, w, wb)].as_f64();
            }
        }
    }
    normalize_min_max(&mut saliency, n * w);

    Ok(AttentionReport {
        record_id: record.record_id.clone(),
        lead_names: record.lead_names.clone(),
        class_names: class_names.to_vec(),
        saliency,
        channel_importance: output.channel_attention.iter().map(|g| g.as_f64()).collect(),
        probabilities: output.logits.iter().map(|&z| crate::numcore::sigmoid(z).as_f64()).collect(),
    })
}

/// Rescale the first `defined` samples of every row so the record spans
/// `[0, 1]`. A constant positive map becomes all ones; an all-zero map is
/// left as is.
fn normalize_min_max(map: &mut [Vec<f64>], defined: usize) {
    let values = || map.iter().flat_map(|r| r[..defined].iter().copied());
    let lo = values().fold(f64::INFINITY, f64::min);
    let hi = values().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > 0.0) {
        return;
    }
    for row in map.iter_mut() {
        for v in &mut row[..defined] {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 1.0 };
        }
    }
}

impl AttentionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Yellow (`#FFFF00`) at 0 to red (`#FF0000`) at 1.
pub fn saliency_color(s: f64) -> String {
    let g = (255.0 * (1.0 - s.clamp(0.0, 1.0))).round() as u8;
    format!("#ff{g:02x}00")
}

const SVG_WIDTH: f64 = 1000.0;
const MARGIN: f64 = 60.0;
const TRACE_HEIGHT: f64 = 70.0;
const BAR_HEIGHT: f64 = 18.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG 1.1 document: one saliency-colored trace group per lead, then a
/// bar chart of channel importance.
pub fn svg_string(report: &AttentionReport, record: &EcgRecord) -> Result<String> {
    let m = record.num_leads();
    let t = record.num_samples();
    if report.saliency.len() != m || report.channel_importance.len() != m || report.saliency.iter().any(|r| r.len() != t) {
        return Err(Error::Contract("report and record shapes disagree".into()));
    }
    let plot_w = SVG_WIDTH - 2.0 * MARGIN;
    let traces_h = m as f64 * TRACE_HEIGHT;
    let bars_top = MARGIN + traces_h + 40.0;
    let height = bars_top + m as f64 * (BAR_HEIGHT + 6.0) + MARGIN;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH:.0}" height="{height:.0}" viewBox="0 0 {SVG_WIDTH:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, xml_escape(&report.record_id));
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{SVG_WIDTH:.0}" height="{height:.0}" fill="white"/>"#);

    let dx = if t > 1 { plot_w / (t - 1) as f64 } else { 0.0 };
    for (c, ch) in record.signal.iter().enumerate() {
        let mid = MARGIN + (c as f64 + 0.5) * TRACE_HEIGHT;
        let peak = ch.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = if peak > 0.0 { 0.45 * TRACE_HEIGHT / peak } else { 0.0 };
        let y = |v: f64| mid - v * scale;
        let name = xml_escape(&record.lead_names[c]);
        let _ = writeln!(out, r#"<g class="trace" data-lead="{name}">"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="end">{name}</text>"#,
            MARGIN - 8.0,
            mid + 4.0
        );
        for i in 1..t {
            let s = 0.5 * (report.saliency[c][i - 1] + report.saliency[c][i]);
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"#,
                MARGIN + (i - 1) as f64 * dx,
                y(ch[i - 1]),
                MARGIN + i as f64 * dx,
                y(ch[i]),
                saliency_color(s)
            );
        }
        let _ = writeln!(out, "</g>");
    }

    let _ = writeln!(out, r#"<g class="importance">"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN:.1}" y="{:.1}" font-family="sans-serif" font-size="13">channel importance</text>"#,
        bars_top - 12.0
    );
    for (c, &g) in report.channel_importance.iter().enumerate() {
        let top = bars_top + c as f64 * (BAR_HEIGHT + 6.0);
        let name = xml_escape(&record.lead_names[c]);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="end">{name}</text>"#,
            MARGIN - 8.0,
            top + BAR_HEIGHT - 4.0
        );
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-lead="{name}" x="{MARGIN:.1}" y="{top:.1}" width="{:.2}" height="{BAR_HEIGHT:.1}" fill="{}"/>"#,
            g.clamp(0.0, 1.0) * plot_w,
            saliency_color(g)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{g:.4}</text>"#,
            MARGIN + g.clamp(0.0, 1.0) * plot_w + 6.0,
            top + BAR_HEIGHT - 4.0
        );
    }
    let _ = writeln!(out, "</g>\n</svg>");
    Ok(out)
}

pub fn render_svg(report: &AttentionReport, record: &EcgRecord, out: &Path) -> Result<()> {
    std::fs::write(out, svg_string(report, record)?)?;
    Ok(())
}
