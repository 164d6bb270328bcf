//! Score-matrix reporting: a CSV table with one row per cell and one
//! annotated heatmap SVG per (provider, mode), context length on the
//! vertical axis and hop count on the horizontal axis.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::niah::ScoreMatrix;
use crate::util::csv_field;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("score matrix is empty")]
    EmptyMatrix,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// CSV with one row per matrix cell; skipped or sample-less cells carry
/// `n/a` in the mean column.
pub fn cells_csv(matrix: &ScoreMatrix) -> String {
    let mut out = String::from("provider,mode,context_length,hops,n,mean\n");
    for (key, cell) in &matrix.cells {
        let mean = match cell.mean {
            Some(m) => format!("{m:.4}"),
            None => "n/a".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&key.provider),
            csv_field(&key.mode),
            key.context_length,
            key.hops,
            cell.n,
            mean
        ));
    }
    out
}

fn heat_color(mean: f64) -> String {
    // 0 -> red, 5 -> yellow, 10 -> green.
    let t = (mean / 10.0).clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        lerp3((214, 39, 40), (255, 221, 113), u)
    } else {
        let u = (t - 0.5) / 0.5;
        lerp3((255, 221, 113), (44, 160, 44), u)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn lerp3(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> (u8, u8, u8) {
    let l = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    (l(a.0, b.0), l(a.1, b.1), l(a.2, b.2))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one annotated heatmap: rows are context lengths (ascending, top
/// to bottom), columns are hop counts, and each cell shows its mean or
/// `n/a`.
pub fn heatmap_svg(
    title: &str,
    context_lengths: &[usize],
    hops: &[u8],
    values: &[Vec<Option<f64>>],
) -> String {
    const CELL_W: usize = 86;
    const CELL_H: usize = 46;
    const LEFT: usize = 96;
    const TOP: usize = 58;
    let width = LEFT + hops.len() * CELL_W + 24;
    let height = TOP + context_lengths.len() * CELL_H + 40;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" font-weight=\"bold\" text-anchor=\"middle\">{}</text>\n",
        width / 2,
        xml_escape(title)
    ));
    // Axis labels.
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">hops</text>\n",
        LEFT + hops.len() * CELL_W / 2,
        TOP - 22
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">context length</text>\n",
        TOP + context_lengths.len() * CELL_H / 2,
        TOP + context_lengths.len() * CELL_H / 2
    ));
    for (col, h) in hops.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            LEFT + col * CELL_W + CELL_W / 2,
            TOP - 6,
            h
        ));
    }
    for (row, len) in context_lengths.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8,
            TOP + row * CELL_H + CELL_H / 2 + 4,
            len
        ));
        for (col, _) in hops.iter().enumerate() {
            let x = LEFT + col * CELL_W;
            let y = TOP + row * CELL_H;
            match values[row][col] {
                Some(mean) => {
                    svg.push_str(&format!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"{}\" stroke=\"#444444\"/>\n",
                        heat_color(mean)
                    ));
                    svg.push_str(&format!(
                        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{mean:.1}</text>\n",
                        x + CELL_W / 2,
                        y + CELL_H / 2 + 5
                    ));
                }
                None => {
                    svg.push_str(&format!(
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" fill=\"#eeeeee\" stroke=\"#444444\"/>\n"
                    ));
                    svg.push_str(&format!(
                        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#888888\" text-anchor=\"middle\">n/a</text>\n",
                        x + CELL_W / 2,
                        y + CELL_H / 2 + 5
                    ));
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Builds the per-(provider, mode) heatmaps of a matrix as
/// `(file_name, svg)` pairs.
pub fn heatmaps(matrix: &ScoreMatrix) -> Vec<(String, String)> {
    let mut groups: BTreeSet<(String, String)> = BTreeSet::new();
    let mut lengths: BTreeSet<usize> = BTreeSet::new();
    let mut hops: BTreeSet<u8> = BTreeSet::new();
    for key in matrix.cells.keys() {
        groups.insert((key.provider.clone(), key.mode.clone()));
        lengths.insert(key.context_length);
        hops.insert(key.hops);
    }
    let lengths: Vec<usize> = lengths.into_iter().collect();
    let hops: Vec<u8> = hops.into_iter().collect();
    let mut out = Vec::new();
    for (provider, mode) in groups {
        let values: Vec<Vec<Option<f64>>> = lengths
            .iter()
            .map(|len| {
                hops.iter()
                    .map(|h| {
                        matrix
                            .cells
                            .get(&crate::niah::MatrixKey {
                                provider: provider.clone(),
                                mode: mode.clone(),
                                context_length: *len,
                                hops: *h,
                            })
                            .and_then(|c| c.mean)
                    })
                    .collect()
            })
            .collect();
        let title = format!("{provider} — {mode}");
        let svg = heatmap_svg(&title, &lengths, &hops, &values);
        out.push((format!("heatmap-{}-{}.svg", sanitize(&provider), sanitize(&mode)), svg));
    }
    out
}

/// Writes the CSV table and every heatmap into `out_dir`, returning the
/// written file names in a stable order.
pub fn report(matrix: &ScoreMatrix, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ReportError> {
    if matrix.is_empty() {
        return Err(ReportError::EmptyMatrix);
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("cells.csv");
    std::fs::write(&csv_path, cells_csv(matrix)).map_err(|source| ReportError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    written.push(csv_path);
    for (name, svg) in heatmaps(matrix) {
        let path = out_dir.join(&name);
        std::fs::write(&path, svg).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::niah::{MatrixCell, MatrixKey};

    fn matrix_1x1(mean: f64) -> ScoreMatrix {
        let mut m = ScoreMatrix::default();
        m.cells.insert(
            MatrixKey {
                provider: "p".into(),
                mode: "multi".into(),
                context_length: 1000,
                hops: 1,
            },
            MatrixCell {
                n: 1,
                raw: vec![mean as u8],
                mean: Some(mean),
            },
        );
        m
    }

    #[test]
    fn one_cell_report_contains_value() {
        let m = matrix_1x1(7.0);
        let csv = cells_csv(&m);
        assert!(csv.contains("7.0"));
        let maps = heatmaps(&m);
        assert_eq!(maps.len(), 1);
        assert!(maps[0].1.contains(">7.0<"));
    }

    #[test]
    fn skipped_cell_renders_na() {
        let mut m = matrix_1x1(7.0);
        m.cells.insert(
            MatrixKey {
                provider: "p".into(),
                mode: "multi".into(),
                context_length: 2000,
                hops: 1,
            },
            MatrixCell { n: 0, raw: vec![], mean: None },
        );
        assert!(cells_csv(&m).contains("n/a"));
        let maps = heatmaps(&m);
        assert!(maps[0].1.contains("n/a"));
    }

    #[test]
    fn grid_shape_has_all_annotations() {
        let mut m = ScoreMatrix::default();
        for (i, len) in [1000usize, 2000, 4000].iter().enumerate() {
            for (j, hops) in [1u8, 2, 3].iter().enumerate() {
                let v = (i * 3 + j) as f64;
                m.cells.insert(
                    MatrixKey {
                        provider: "p".into(),
                        mode: "multi".into(),
                        context_length: *len,
                        hops: *hops,
                    },
                    MatrixCell { n: 1, raw: vec![v as u8], mean: Some(v) },
                );
            }
        }
        let maps = heatmaps(&m);
        assert_eq!(maps.len(), 1);
        let annotations = maps[0].1.matches("font-size=\"13\"").count();
        assert_eq!(annotations, 9);
    }

    #[test]
    fn report_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = report(&matrix_1x1(7.0), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            assert!(f.exists());
        }
    }
}
