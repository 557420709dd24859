use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(super::create(path)?);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One CSV line per row of a `[rows, cols]` tensor, no header.
pub fn write_matrix_csv<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let [_, cols] = *t.dims() else {
        return Err(Error::shape("write_matrix_csv", "rank", 2, t.rank()));
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(super::create(path)?);
    for row in t.data().chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headerless numeric CSV into a `[rows, cols]` tensor.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor<f32>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(super::open(path)?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Format(format!("{}: row {} has {} fields, expected {}", path.display(), rows + 1, rec.len(), cols.unwrap())));
        }
        for field in &rec {
            let v: f32 = field.parse().map_err(|_| Error::Format(format!("{}: row {}: `{field}` is not a number", path.display(), rows + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    match cols {
        Some(c) if c > 0 => Tensor::from_vec(&[rows, c], data),
        _ => Err(Error::Format(format!("{}: empty table", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/t.csv");
        write_csv(&p, &["step", "loss"], &[vec!["1", "0.5"], vec!["2", "0.25"]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,loss\n1,0.5\n2,0.25\n");
        let m = dir.path().join("m.csv");
        write_matrix_csv(&m, &Tensor::from_vec(&[2, 2], vec![1.0f32, 2.5, -3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&m).unwrap(), "1,2.5\n-3,4\n");
        let back = read_matrix_csv(&m).unwrap();
        assert_eq!((back.dims(), back.data()), (&[2, 2][..], &[1.0, 2.5, -3.0, 4.0][..]));
        std::fs::write(&m, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&m).is_err());
        std::fs::write(&m, "1,x\n").unwrap();
        assert!(read_matrix_csv(&m).is_err());
    }
}
