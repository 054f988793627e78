//! Plain-text rendering of the run CSVs: columns padded to equal width so
//! metric streams are readable in a terminal.

use std::path::Path;

use crate::CliError;

/// Reads a CSV (or a run directory containing `metrics.csv`) and renders an
/// aligned text table. Metric files get a one-line summary footer.
pub fn render(path: &Path) -> Result<String, CliError> {
    let file = if path.is_dir() {
        path.join("metrics.csv")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", file.display())))?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split(',').map(|c| c.to_string()).collect())
        .collect();
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} is empty", file.display())));
    }

    let columns = rows.iter().map(|r| r.len()).max().unwrap();
    let mut widths = vec![0usize; columns];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(display_width(cell));
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:>width$}", shorten(cell), width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    if let Some(summary) = metrics_summary(&rows) {
        out.push('\n');
        out.push_str(&summary);
        out.push('\n');
    }
    Ok(out)
}

fn display_width(cell: &str) -> usize {
    shorten(cell).chars().count()
}

/// Long decimal expansions get truncated for display only.
fn shorten(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') && cell.len() > 10 => format!("{v:.6}"),
        _ => cell.to_string(),
    }
}

fn metrics_summary(rows: &[Vec<String>]) -> Option<String> {
    let header = rows.first()?;
    if header.first().map(String::as_str) != Some("step") || rows.len() < 2 {
        return None;
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let last = rows.last()?;
    let objective = find("objective").and_then(|i| last.get(i).cloned())?;
    let rkl = find("exact_rkl").and_then(|i| last.get(i).cloned())?;
    let entropy = find("entropy").and_then(|i| last.get(i).cloned())?;
    Some(format!(
        "{} rows; final step {}: objective {}, exact_rkl {}, entropy {}",
        rows.len() - 1,
        last.first()?,
        objective,
        shorten(&rkl),
        shorten(&entropy)
    ))
}
