//! Aligned text tables and the starred coefficient display.

use mrtdr_core::WaldRow;

/// Render rows as a space-aligned table with a header line.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (j, cell) in row.iter().enumerate().take(ncol) {
            widths[j] = widths[j].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| format!("{c:<width$}", width = widths[j]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    out.push_str(&fmt_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>()));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// A confidence interval excluding zero gets a star.
pub fn ci_star(lower: f64, upper: f64) -> &'static str {
    if lower > 0.0 || upper < 0.0 {
        "*"
    } else {
        ""
    }
}

pub fn coefficient_table(rows: &[WaldRow], level: f64) -> String {
    let pct = format!("{:.0}%", level * 100.0);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.4}", r.estimate),
                format!("{:.4}", r.std_err),
                format!("({:.4}, {:.4}){}", r.lower, r.upper, ci_star(r.lower, r.upper)),
                format!("{:.3}", r.z_value),
                format!("{:.4}", r.p_value),
            ]
        })
        .collect();
    table(
        &["term", "estimate", "std_err", &format!("{pct} CI"), "z", "p"],
        &body,
    )
}
