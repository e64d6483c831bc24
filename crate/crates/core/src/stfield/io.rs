//! Field files: a headerless CSV matrix (rows = sites, columns = time) and a
//! JSON sidecar carrying the geometry.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{Field, FieldGeometry};
use crate::{Error, Result};

/// Reads a headerless numeric CSV matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: c + 1,
                    message: format!("{cell:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: row.len().min(first.len()) + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (row, column) = e
        .position()
        .map_or((0, 0), |p| (p.line() as usize, 0));
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            row,
            column,
            message: format!("{other:?}"),
        },
    }
}

/// Writes a matrix as headerless CSV using shortest round-trip formatting.
pub fn write_matrix_csv<T: std::fmt::Display>(
    path: &Path,
    nrows: usize,
    ncols: usize,
    value: impl Fn(usize, usize) -> T,
) -> Result<()> {
    let mut out = String::with_capacity(nrows * ncols * 8);
    for r in 0..nrows {
        for c in 0..ncols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&value(r, c).to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a field and validates its shape against the sidecar geometry.
pub fn read_field(csv_path: &Path, meta_path: &Path) -> Result<Field> {
    let meta = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let geometry: FieldGeometry = serde_json::from_str(&meta)?;
    let values = read_matrix_csv(csv_path)?;
    if values.nrows() == 0 {
        return Err(Error::domain(format!("{} holds no data", csv_path.display())));
    }
    if values.nrows() != geometry.spatial_size || values.ncols() != geometry.time_steps {
        return Err(Error::Format(format!(
            "{} is {}x{}, metadata says {}x{}",
            csv_path.display(),
            values.nrows(),
            values.ncols(),
            geometry.spatial_size,
            geometry.time_steps
        )));
    }
    Field::new(geometry, values)
}

pub fn write_field(field: &Field, csv_path: &Path, meta_path: &Path) -> Result<()> {
    let v = field.values();
    write_matrix_csv(csv_path, v.nrows(), v.ncols(), |r, c| v[(r, c)])?;
    let meta = serde_json::to_string_pretty(field.geometry())?;
    fs::write(meta_path, meta + "\n").map_err(|e| Error::io(meta_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = FieldGeometry::new(4, 3).with_cone(1, 0, 1);
        let values = DMatrix::from_fn(4, 3, |r, t| (r as f64 + 0.1) / (t as f64 + 3.0) - 0.7);
        let field = Field::new(g, values).unwrap();
        let (csv, json) = (dir.path().join("f.csv"), dir.path().join("f.json"));
        write_field(&field, &csv, &json).unwrap();
        assert_eq!(read_field(&csv, &json).unwrap(), field);
    }

    #[test]
    fn metadata_keys() {
        let g = FieldGeometry::new(4, 3);
        let v: serde_json::Value = serde_json::to_value(g).unwrap();
        for key in [
            "spatial_size",
            "time_steps",
            "boundary",
            "speed",
            "past_horizon",
            "future_horizon",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["boundary"], "periodic");
    }

    #[test]
    fn malformed_cell_names_position() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = (dir.path().join("f.csv"), dir.path().join("f.json"));
        fs::write(&csv, "1,2,3\n4,x,6\n").unwrap();
        fs::write(&json, serde_json::to_string(&FieldGeometry::new(2, 3)).unwrap()).unwrap();
        match read_field(&csv, &json) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = (dir.path().join("f.csv"), dir.path().join("f.json"));
        fs::write(&csv, "1,2,3\n4,5,6\n").unwrap();
        fs::write(&json, serde_json::to_string(&FieldGeometry::new(3, 3)).unwrap()).unwrap();
        assert!(matches!(read_field(&csv, &json), Err(Error::Format(_))));
    }
}
