use std::path::Path;

use super::tsne::Projection2D;
use crate::binio::write_atomic;
use crate::error::{Error, Result};

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 160.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG scatter plot, one colour per category, with a legend. `description`
/// is stored in the file's `<desc>` element.
pub fn scatter_svg(projection: &Projection2D, title: &str, description: &str) -> Result<String> {
    if projection.points.is_empty() {
        return Err(Error::invalid("cannot plot an empty projection"));
    }
    let mut categories: Vec<&str> = Vec::new();
    for l in &projection.labels {
        if !categories.contains(&l.as_str()) {
            categories.push(l);
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &projection.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
    let inner = SIZE - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - lo[0]) / span(0) * inner;
    let sy = |v: f64| SIZE - MARGIN - (v - lo[1]) / span(1) * inner;

    let mut out = String::new();
    out.push_str(&format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = SIZE + LEGEND_WIDTH,
        h = SIZE
    ));
    out.push_str(&format!(
        "<title>{}</title>\n<desc>{}</desc>\n",
        escape(title),
        escape(description)
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        SIZE + LEGEND_WIDTH,
        SIZE
    ));
    out.push_str("<g id=\"points\">\n");
    for (p, l) in projection.points.iter().zip(&projection.labels) {
        let ci = categories.iter().position(|c| c == l).unwrap_or(0);
        out.push_str(&format!(
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>\n",
            sx(p[0]),
            sy(p[1]),
            PALETTE[ci % PALETTE.len()]
        ));
    }
    out.push_str("</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"13\">\n");
    for (i, c) in categories.iter().enumerate() {
        let y = MARGIN + 22.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            SIZE + 10.0,
            y,
            PALETTE[i % PALETTE.len()],
            SIZE + 28.0,
            y + 11.0,
            escape(c)
        ));
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

pub fn export_scatter_svg(
    projection: &Projection2D,
    path: &Path,
    title: &str,
    description: &str,
) -> Result<()> {
    write_atomic(
        path,
        scatter_svg(projection, title, description)?.as_bytes(),
    )
}

/// Shortest decimal text that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// CSV text with a header row.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let bad = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(header).map_err(bad)?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::shape("csv row", &[i, r.len()], &[header.len()]));
        }
        w.write_record(r).map_err(bad)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn export_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, csv_string(header, rows)?.as_bytes())
}

/// Header and records of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|x| x.iter().map(str::to_string).collect())
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// `label,x,y` rows of a projection.
pub fn projection_rows(projection: &Projection2D) -> Vec<Vec<String>> {
    projection
        .points
        .iter()
        .zip(&projection.labels)
        .map(|(p, l)| vec![l.clone(), fmt_f64(p[0]), fmt_f64(p[1])])
        .collect()
}
