//! Plain-text tables, report CSVs, and the heatmap SVG.

use std::fmt::Write as _;

use tilenet::metrics::{EvaluationReport, MetricSummary};
use tilenet::page::Grid;

/// Metric rows in report order. The precision label carries its cutoff so
/// reports stay self-describing for grids smaller than ten tiles.
pub fn metric_rows(report: &EvaluationReport) -> Vec<(String, MetricSummary)> {
    vec![
        ("ndcg".to_string(), report.ndcg),
        (format!("pre@{}", report.precision_cutoff), report.precision),
        ("clicks".to_string(), report.clicks),
        ("reward".to_string(), report.reward),
    ]
}

/// Full-precision CSV; `Display` of f64 round-trips, which keeps repeated
/// runs byte-comparable.
pub fn evaluation_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("metric,mean,variance\n");
    for (name, m) in metric_rows(report) {
        writeln!(out, "{name},{},{}", m.mean, m.variance).unwrap();
    }
    out
}

pub fn evaluation_table(report: &EvaluationReport) -> String {
    let header = vec!["metric".into(), "mean".into(), "variance".into()];
    let rows: Vec<Vec<String>> = metric_rows(report)
        .into_iter()
        .map(|(name, m)| vec![name, format!("{:.4}", m.mean), format!("{:.4}", m.variance)])
        .collect();
    aligned_table(&header, &rows)
}

/// First column left-aligned, the rest right-aligned, two-space gutters.
/// Rows must match the header's column count.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    push_row(&mut out, header, &widths);
    for row in rows {
        push_row(&mut out, row, &widths);
    }
    out
}

fn push_row(out: &mut String, cells: &[String], widths: &[usize]) {
    for (i, cell) in cells.iter().enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        if i == 0 {
            write!(out, "{cell:<width$}", width = widths[i]).unwrap();
        } else {
            write!(out, "{cell:>width$}", width = widths[i]).unwrap();
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out.push('\n');
}

/// One line per tile in row-major order; priority 0 marks tiles the policy
/// fills first.
pub fn heatmap_csv(grid: Grid, heat: &[f64]) -> String {
    let mut out = String::from("row,col,priority\n");
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            writeln!(out, "{row},{col},{}", heat[grid.tile_index(row, col)]).unwrap();
        }
    }
    out
}

/// Grayscale grid: earliest-filled tiles render black, latest white. Each
/// cell carries its numeric priority in a tooltip.
pub fn heatmap_svg(grid: Grid, heat: &[f64]) -> String {
    const CELL: usize = 48;
    const PAD: usize = 8;
    let width = grid.cols * CELL + 2 * PAD;
    let height = grid.rows * CELL + 2 * PAD;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    );
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let p = heat[grid.tile_index(row, col)];
            let shade = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
            let x = PAD + col * CELL;
            let y = PAD + row * CELL;
            writeln!(
                out,
                "  <rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"#{shade:02x}{shade:02x}{shade:02x}\" stroke=\"#888888\" \
                 stroke-width=\"1\"><title>tile ({row},{col}) priority {p:.3}</title></rect>"
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_table_pads_and_trims() {
        let header = vec!["model".to_string(), "ndcg".to_string()];
        let rows = vec![
            vec!["tile".to_string(), "0.91".to_string()],
            vec!["pointer-row".to_string(), "0.9".to_string()],
        ];
        let text = aligned_table(&header, &rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model        ndcg");
        assert_eq!(lines[1], "tile         0.91");
        assert_eq!(lines[2], "pointer-row   0.9");
        assert!(text.lines().all(|l| !l.ends_with(' ')));
    }

    #[test]
    fn heatmap_svg_draws_every_tile_with_shade() {
        let grid = Grid::new(2, 3).unwrap();
        let heat = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let svg = heatmap_svg(grid, &heat);
        assert_eq!(svg.matches("<title>").count(), 6);
        // Tile (0,0) has priority 0 and renders black, (1,2) white.
        assert!(svg.contains("fill=\"#000000\""));
        assert!(svg.contains("fill=\"#ffffff\""));
        assert!(svg.contains("priority 0.000"));
        assert!(svg.contains("priority 1.000"));
    }

    #[test]
    fn heatmap_csv_is_row_major() {
        let grid = Grid::new(2, 2).unwrap();
        let csv = heatmap_csv(grid, &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(csv, "row,col,priority\n0,0,0\n0,1,0.25\n1,0,0.5\n1,1,1\n");
    }
}
