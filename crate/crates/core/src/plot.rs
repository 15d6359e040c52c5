//! SVG charts and attention overlays rendered from emitted metric files
//! only; nothing here touches a model.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::png_io;
use crate::error::{Error, Result};
use crate::train::MetricsRecord;

/// Attention maps as written by `attn-maps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    /// Generated image the maps belong to, relative to the dump.
    pub image: String,
    pub resolution: usize,
    pub tokens: Vec<String>,
    pub blocks: Vec<AttentionBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    /// Side of the block's feature grid before upsampling.
    pub side: usize,
    /// One `resolution²` row-major map per token, values in [0, 1].
    pub maps: Vec<Vec<f32>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two-panel bar chart: ASR and perceptual distance per swap set.
pub fn sweep_chart_svg(rows: &[(String, f64, f64)]) -> String {
    let (w, h) = (760.0, 320.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let panels = [("attack success rate", 0usize), ("perceptual distance", 1usize)];
    let pw = w / 2.0;
    for (title, which) in panels {
        let x0 = which as f64 * pw + 50.0;
        let (top, bottom) = (30.0, h - 60.0);
        let vals: Vec<f64> = rows.iter().map(|r| if which == 0 { r.1 } else { r.2 }).collect();
        let max = if which == 0 { 1.0 } else { vals.iter().cloned().fold(0.0, f64::max).max(1e-9) * 1.1 };
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, x0 + (pw - 70.0) / 2.0);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{bottom}" stroke="black"/>"#);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, x0 + pw - 70.0);
        for t in 0..=4 {
            let v = max * t as f64 / 4.0;
            let y = bottom - (bottom - top) * t as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
        }
        let n = rows.len().max(1) as f64;
        let slot = (pw - 70.0) / n;
        for (i, (r, v)) in rows.iter().zip(&vals).enumerate() {
            let bh = (bottom - top) * (v / max).clamp(0.0, 1.0);
            let x = x0 + slot * i as f64 + slot * 0.15;
            let fill = if which == 0 { "#4a78b5" } else { "#d0813a" };
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{fill}"/>"#, bottom - bh, slot * 0.7);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9">{v:.3}</text>"#, x + slot * 0.35, bottom - bh - 3.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {:.1} {:.1})">{}</text>"#,
                x + slot * 0.35,
                bottom + 14.0,
                x + slot * 0.35,
                bottom + 14.0,
                esc(&r.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of the training losses.
pub fn loss_chart_svg(records: &[MetricsRecord]) -> String {
    let (w, h) = (760.0, 360.0);
    let (l, r, t, b) = (60.0, w - 140.0, 20.0, h - 40.0);
    let series: [(&str, fn(&MetricsRecord) -> f64, &str); 5] = [
        ("L_adv_G", |m| m.adv_g, "#4a78b5"),
        ("L_adv_D", |m| m.adv_d, "#d0813a"),
        ("L_FM", |m| m.fm, "#3a9d5d"),
        ("L_prc", |m| m.prc, "#b53a3a"),
        ("L_id", |m| m.id, "#7b4ab5"),
    ];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#);
    if records.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let xmax = records.iter().map(|m| m.iteration).max().unwrap_or(1).max(1) as f64;
    let ymax = records
        .iter()
        .flat_map(|m| series.iter().map(move |(_, f, _)| f(m)))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9);
    for (k, (name, f, color)) in series.iter().enumerate() {
        let pts: Vec<String> = records
            .iter()
            .map(|m| {
                let x = l + (r - l) * m.iteration as f64 / xmax;
                let y = b - (b - t) * (f(m) / ymax).clamp(0.0, 1.0);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = t + 16.0 * k as f64 + 10.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{}">{name}</text>"#, r + 15.0, ly - 4.0, r + 32.0, ly);
    }
    let _ = writeln!(s, r#"<text x="{l}" y="{}">0</text><text x="{r}" y="{}" text-anchor="end">{xmax}</text>"#, b + 15.0, b + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.2}</text>"#, l - 4.0, t + 4.0);
    s.push_str("</svg>\n");
    s
}

/// Blend a heat map (values in [0, 1]) over an RGB8 image.
pub fn overlay(rgb: &[u8], heat: &[f32], alpha: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len());
    for (px, &h) in rgb.chunks(3).zip(heat) {
        let h = h.clamp(0.0, 1.0);
        // dark blue → red → yellow
        let c = [(3.0 * h).min(1.0), (3.0 * h - 1.0).clamp(0.0, 1.0), (1.0 - 3.0 * h).max(0.0) * 0.5];
        for k in 0..3 {
            let v = (1.0 - alpha) * px[k] as f32 + alpha * 255.0 * c[k];
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Render overlays for every (block, token) into `out_dir`; returns the
/// written paths.
pub fn attention_overlays(dump_path: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let text = std::fs::read_to_string(dump_path).map_err(Error::io(dump_path))?;
    let dump: AttentionDump = serde_json::from_str(&text)?;
    let img_path = dump_path.parent().unwrap_or(Path::new(".")).join(&dump.image);
    let (w, h, ch, rgb) = png_io::read_png(&img_path)?;
    if ch != 3 || w != dump.resolution || h != dump.resolution {
        return Err(Error::Validation(format!("{} does not match the attention dump", img_path.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut written = Vec::new();
    for (b, block) in dump.blocks.iter().enumerate() {
        for (t, map) in block.maps.iter().enumerate() {
            if map.len() != w * h {
                return Err(Error::Validation(format!("block {b} token {t}: map has {} values", map.len())));
            }
            let max = map.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
            let norm: Vec<f32> = map.iter().map(|v| v / max).collect();
            let name = dump.tokens.get(t).cloned().unwrap_or_else(|| format!("token{t}"));
            let p = out_dir.join(format!("attn_block{b}_{name}.png"));
            png_io::write_rgb8(&p, w, h, &overlay(&rgb, &norm, 0.55))?;
            written.push(p);
        }
    }
    Ok(written)
}
