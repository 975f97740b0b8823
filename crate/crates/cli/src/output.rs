// SPDX-License-Identifier: MIT OR Apache-2.0

//! Number formatting, file helpers and SVG profile charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// `%.6g`-style rendering: six significant digits, trailing zeros removed,
/// scientific notation outside `1e-4 <= |x| < 1e6`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x.is_infinite() {
            if x > 0.0 { "inf".into() } else { "-inf".into() }
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.to_string() }
}

/// Case id made safe for use as a file stem.
pub fn file_stem(case_id: &str) -> String {
    let s: String = case_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() { "case".into() } else { s }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Write rows under `header` as CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let csv_err = |e: csv::Error| CliError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Mean `delta` per `(layer, component)` for one token role.
pub type LayerBars = BTreeMap<usize, BTreeMap<String, f64>>;

/// Read a per-case or mean delta CSV and average `delta` per
/// `(token_role, layer, component)`.
pub fn read_delta_csv(path: &Path) -> CliResult<BTreeMap<String, LayerBars>> {
    let err = |message: String| CliError::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = r.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(format!("missing column {name}")))
    };
    let (layer_c, comp_c, role_c, delta_c) =
        (col("layer")?, col("component")?, col("token_role")?, col("delta")?);
    let mut sums: BTreeMap<(String, usize, String), (f64, usize)> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let layer: usize = field(layer_c)
            .parse()
            .map_err(|_| err(format!("row {}: bad layer", i + 1)))?;
        let delta: f64 = field(delta_c)
            .parse()
            .map_err(|_| err(format!("row {}: bad delta", i + 1)))?;
        let e = sums
            .entry((field(role_c).to_string(), layer, field(comp_c).to_string()))
            .or_insert((0.0, 0));
        e.0 += delta;
        e.1 += 1;
    }
    let mut out: BTreeMap<String, LayerBars> = BTreeMap::new();
    for ((role, layer, comp), (sum, n)) in sums {
        out.entry(role)
            .or_default()
            .entry(layer)
            .or_default()
            .insert(comp, sum / n as f64);
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const COMPONENT_COLORS: [(&str, &str); 2] = [("attn", "#4c72b0"), ("ffn", "#dd8452")];

/// Grouped bar chart: layers along x, one bar per component, zero baseline.
pub fn render_svg(title: &str, bars: &LayerBars) -> String {
    let (w, h, margin) = (720.0f64, 360.0f64, 50.0f64);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let max_abs = bars
        .values()
        .flat_map(|m| m.values())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if max_abs > 0.0 { plot_h / 2.0 / max_abs } else { 0.0 };
    let zero_y = margin + plot_h / 2.0;
    let n = bars.len().max(1) as f64;
    let group_w = plot_w / n;
    let bar_w = group_w * 0.8 / COMPONENT_COLORS.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    for (gi, (layer, comps)) in bars.iter().enumerate() {
        let gx = margin + gi as f64 * group_w + group_w * 0.1;
        for (ci, (name, color)) in COMPONENT_COLORS.iter().enumerate() {
            let v = comps.get(*name).copied().unwrap_or(0.0);
            let bh = (v.abs() * scale).max(0.0);
            let y = if v >= 0.0 { zero_y - bh } else { zero_y };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"><title>layer {layer} {name}: {}</title></rect>"#,
                gx + ci as f64 * bar_w,
                y,
                bar_w,
                bh,
                sig6(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{layer}</text>"#,
            gx + group_w * 0.4,
            h - margin + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{margin}" y1="{zero_y}" x2="{}" y2="{zero_y}" stroke="black" stroke-width="1"/>"#,
        w - margin
    );
    for (i, (name, color)) in COMPONENT_COLORS.iter().enumerate() {
        let lx = w - margin - 120.0 + i as f64 * 60.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="34" width="10" height="10" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="43" font-family="sans-serif" font-size="10">{name}</text>"#,
            lx + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">layer</text>"#,
        w / 2.0,
        h - 12.0
    );
    s.push_str("</svg>\n");
    s
}

/// Write one SVG per token role found in `csv`; returns the written paths.
pub fn svgs_for_csv(csv: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let by_role = read_delta_csv(csv)?;
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "profile".into());
    let mut written = Vec::new();
    for (role, bars) in &by_role {
        let path = out_dir.join(format!("{stem}_{}.svg", file_stem(role)));
        write_text(&path, &render_svg(&format!("mean delta, {role} ({stem})"), bars))?;
        written.push(path);
    }
    Ok(written)
}
