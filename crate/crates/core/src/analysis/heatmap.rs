//! CSV and SVG renderings of a normalized confusion matrix.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{AnalysisError, ConfusionMatrix, Result};

/// Fill used for cells whose value is 1.
pub const MAX_INTENSITY_FILL: &str = "rgb(8,48,107)";

const CELL: usize = 28;
const MARGIN: usize = 90;

/// Optional symbol subsets to keep. Values are not renormalized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymbolFilter {
    pub graphemes: Option<Vec<String>>,
    pub phonemes: Option<Vec<String>>,
}

struct View {
    graphemes: Vec<String>,
    phonemes: Vec<String>,
    values: Array2<f64>,
}

fn view(cm: &ConfusionMatrix, filter: Option<&SymbolFilter>) -> View {
    let keep = |names: &[String], wanted: Option<&Vec<String>>| -> Vec<usize> {
        (0..names.len())
            .filter(|&i| wanted.is_none_or(|w| w.contains(&names[i])))
            .collect()
    };
    let cols = keep(&cm.graphemes, filter.and_then(|f| f.graphemes.as_ref()));
    let rows = keep(&cm.phonemes, filter.and_then(|f| f.phonemes.as_ref()));
    let norm = cm.normalized();
    View {
        graphemes: cols.iter().map(|&g| cm.graphemes[g].clone()).collect(),
        phonemes: rows.iter().map(|&p| cm.phonemes[p].clone()).collect(),
        values: Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| norm[[rows[i], cols[j]]]),
    }
}

/// Shortest decimal form of `v` rounded to 12 significant digits.
fn sig12(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().expect("float formatting parses");
    format!("{rounded}")
}

/// Header row of graphemes, then one row per phoneme. Symbols are quoted.
pub fn write_csv<W: Write>(cm: &ConfusionMatrix, w: W, filter: Option<&SymbolFilter>) -> Result<()> {
    let v = view(cm, filter);
    let mut out = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_writer(w);
    let csv_err = |e: csv::Error| AnalysisError::Csv(e.to_string());
    let mut header = vec!["phoneme\\grapheme".to_string()];
    header.extend(v.graphemes.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (i, p) in v.phonemes.iter().enumerate() {
        let mut row = vec![p.clone()];
        row.extend(v.values.row(i).iter().map(|&x| sig12(x)));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`] into (graphemes, phonemes, values).
pub fn read_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let csv_err = |e: csv::Error| AnalysisError::Csv(e.to_string());
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| AnalysisError::Csv("missing header".into()))?
        .map_err(csv_err)?;
    let graphemes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut phonemes = Vec::new();
    let mut flat = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != graphemes.len() + 1 {
            return Err(AnalysisError::Csv(format!("row {:?} has {} fields", rec.get(0), rec.len())));
        }
        phonemes.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            flat.push(
                field
                    .parse::<f64>()
                    .map_err(|_| AnalysisError::Csv(format!("bad value {field:?}")))?,
            );
        }
    }
    let values = Array2::from_shape_vec((phonemes.len(), graphemes.len()), flat)
        .map_err(|e| AnalysisError::Csv(e.to_string()))?;
    Ok((graphemes, phonemes, values))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fill(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |hi: f64| (255.0 + (hi - 255.0) * v).round() as u8;
    format!("rgb({},{},{})", lerp(8.0), lerp(48.0), lerp(107.0))
}

/// Standalone SVG heatmap: graphemes across, phonemes down.
pub fn write_svg<W: Write>(cm: &ConfusionMatrix, mut w: W, filter: Option<&SymbolFilter>) -> Result<()> {
    let v = view(cm, filter);
    let width = MARGIN + CELL * v.graphemes.len() + 10;
    let height = MARGIN + CELL * v.phonemes.len() + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (j, g) in v.graphemes.iter().enumerate() {
        let x = MARGIN + CELL * j + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle" class="grapheme">{}</text>"#,
            MARGIN - 8,
            escape(g)
        );
    }
    for (i, p) in v.phonemes.iter().enumerate() {
        let y = MARGIN + CELL * i + CELL / 2 + 4;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end" class="phoneme">{}</text>"#,
            MARGIN - 8,
            escape(p)
        );
    }
    for ((i, j), &val) in v.values.indexed_iter() {
        let _ = writeln!(
            s,
            r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}" stroke="rgb(221,221,221)" data-value="{}"/>"#,
            MARGIN + CELL * j,
            MARGIN + CELL * i,
            fill(val),
            sig12(val)
        );
    }
    s.push_str("</svg>\n");
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.svg`, returning both paths.
pub fn emit_heatmap(cm: &ConfusionMatrix, stem: &Path, filter: Option<&SymbolFilter>) -> Result<(PathBuf, PathBuf)> {
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    let mut buf = Vec::new();
    write_csv(cm, &mut buf, filter)?;
    fs::write(&csv_path, buf)?;
    let mut buf = Vec::new();
    write_svg(cm, &mut buf, filter)?;
    fs::write(&svg_path, buf)?;
    Ok((csv_path, svg_path))
}
