//! Minimal CSV writing and reading.
//!
//! Every file this lab emits is either a header + rows table or a
//! headerless numeric grid (kernel heatmap data). The reader here parses
//! both, and the emit paths are tested against it for self-consistency.
//! No quoting: emitted fields never contain commas.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::CliError;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(CliError::Data(format!(
                "row {} has {} fields, header has {}",
                i + 1,
                row.len(),
                header.len()
            )));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(CliError::from)
}

/// Parse a header + rows table. Ragged rows error with their line number.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header_line)) = lines.next() else {
        return Err(CliError::Data(format!("{}: empty file", path.display())));
    };
    let header: Vec<String> = header_line.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(CliError::Data(format!(
                "{}: line {} has {} fields, expected {}",
                path.display(),
                i + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Headerless numeric grid, one matrix row per line.
pub fn write_matrix(path: &Path, data: &[f64], rows: usize, cols: usize) -> Result<(), CliError> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut file = fs::File::create(path)?;
    for r in 0..rows {
        let line: Vec<String> =
            data[r * cols..(r + 1) * cols].iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let row =
            row.map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Shortest round-trippable representation of a float, empty for None.
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let dir = std::env::temp_dir().join(format!("peftlab-csv-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let rows =
            vec![vec!["0".into(), "0.5".into()], vec!["1".into(), "0.25".into()]];
        write_csv(&path, &["epoch", "loss"], &rows).unwrap();
        let (header, got) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["epoch", "loss"]);
        assert_eq!(got, rows);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn matrix_round_trip_preserves_values() {
        let dir = std::env::temp_dir().join(format!("peftlab-mat-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("k.csv");
        let data = vec![0.1, -2.5, 3.0_f64.sqrt(), 4e-17];
        write_matrix(&path, &data, 2, 2).unwrap();
        let got = read_matrix(&path).unwrap();
        assert_eq!(got, vec![vec![data[0], data[1]], vec![data[2], data[3]]]);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ragged_rows_name_their_line() {
        let dir = std::env::temp_dir().join(format!("peftlab-rag-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        let err = read_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"));
        fs::remove_dir_all(&dir).ok();
    }
}
