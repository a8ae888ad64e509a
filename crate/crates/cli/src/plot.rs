use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use actseg::io::read_labels;
use actseg::segcore::{ClassCatalog, Segmentation};

use crate::common::{load_catalog, usage, write_file, CmdResult, Manifest};

const LABEL_WIDTH: f64 = 160.0;
const ROW_HEIGHT: f64 = 24.0;
const ROW_GAP: f64 = 8.0;
const LEGEND_ROW: f64 = 20.0;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Label files (frame or segment layout), one bar each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Width of the bar area in pixels.
    #[arg(long, default_value_t = 1000.0)]
    width: f64,
}

/// Fixed color per class id, spaced around the hue circle by the golden angle.
pub fn class_color(id: usize) -> String {
    let hue = (id as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},62%,52%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render(rows: &[(String, Segmentation)], catalog: &ClassCatalog, width: f64) -> String {
    let used: BTreeSet<usize> = rows
        .iter()
        .flat_map(|(_, s)| s.segments().iter().map(|seg| seg.action))
        .collect();
    let bars_height = rows.len() as f64 * (ROW_HEIGHT + ROW_GAP);
    let total_height = bars_height + ROW_GAP + used.len() as f64 * LEGEND_ROW;
    let total_width = LABEL_WIDTH + width + ROW_GAP;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_width}" height="{total_height}" viewBox="0 0 {total_width} {total_height}" font-family="sans-serif" font-size="12">"#
    );
    for (i, (label, seg)) in rows.iter().enumerate() {
        let y = i as f64 * (ROW_HEIGHT + ROW_GAP);
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{:.3}" dominant-baseline="middle">{}</text>"#,
            y + ROW_HEIGHT / 2.0,
            escape(label)
        );
        let total = seg.total_frames() as f64;
        let mut start = 0usize;
        for s in seg.segments() {
            let x = LABEL_WIDTH + width * start as f64 / total;
            let w = width * s.duration as f64 / total;
            let name = catalog.name(s.action).unwrap_or("?");
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{ROW_HEIGHT}" fill="{}"><title>{} [{}, {})</title></rect>"#,
                class_color(s.action),
                escape(name),
                start,
                start + s.duration
            );
            start += s.duration;
        }
    }
    for (k, &id) in used.iter().enumerate() {
        let y = bars_height + ROW_GAP + k as f64 * LEGEND_ROW;
        let name = catalog.name(id).unwrap_or("?");
        let _ = writeln!(
            svg,
            r#"<rect x="4" y="{y:.3}" width="14" height="14" fill="{}"/><text x="24" y="{:.3}" dominant-baseline="middle">{}</text>"#,
            class_color(id),
            y + 7.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn run(a: Args) -> CmdResult {
    if a.width.is_nan() || a.width <= 0.0 {
        return usage("--width must be positive");
    }
    let catalog = load_catalog(&a.catalog)?;
    let mut manifest = Manifest::new("plot", serde_json::json!({ "width": a.width }), None);
    let mut rows = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let label = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("?")
            .to_string();
        rows.push((label, read_labels(p, &catalog)?));
        manifest.input(p);
    }
    write_file(&a.out, render(&rows, &catalog, a.width))?;
    manifest.output(&a.out);
    let mut mpath = a.out.clone().into_os_string();
    mpath.push(".manifest.json");
    manifest.write(&PathBuf::from(mpath))
}
