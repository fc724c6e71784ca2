//! Reading and writing point clouds and matrices.
//!
//! CSV files hold one point per line, comma separated, no header. Binary
//! matrices are two little-endian `u64` dimensions (rows, columns) followed
//! by the entries as little-endian `f64` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{KmsError, Result};
use crate::kernels::PointCloud;

/// Parse a point cloud from CSV text.
pub fn parse_csv<R: Read>(reader: R) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| KmsError::Parse(format!("line {}: {e}", line + 1)))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match d {
            None => d = Some(record.len()),
            Some(d) if d != record.len() => {
                return Err(KmsError::Parse(format!(
                    "line {}: expected {d} fields, found {}",
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| {
                KmsError::Parse(format!("line {}: not a number: {field:?}", line + 1))
            })?;
            if !v.is_finite() {
                return Err(KmsError::Parse(format!(
                    "line {}: non-finite value",
                    line + 1
                )));
            }
            data.push(v);
        }
        n += 1;
    }
    let Some(d) = d else {
        return Err(KmsError::Parse("no points found".into()));
    };
    PointCloud::new(data, n, d)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_csv(BufReader::new(File::open(path)?))
}

/// Shortest round-trip decimal form; identical input gives identical text.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv_to<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    for row in cloud.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(cloud, BufWriter::new(File::create(path)?))
}

pub fn write_matrix_to<W: Write>(m: &DMatrix<f64>, mut w: W) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_from<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut word = [0u8; 8];
    let mut dim = || -> Result<usize> {
        r.read_exact(&mut word)
            .map_err(|_| KmsError::Parse("truncated matrix header".into()))?;
        usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| KmsError::Parse("matrix too large".into()))
    };
    let rows = dim()?;
    let cols = dim()?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| KmsError::Parse("matrix too large".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(KmsError::Parse(format!(
            "expected {} bytes of entries, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_matrix_to(m, BufWriter::new(File::create(path)?))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix_from(BufReader::new(File::open(path)?))
}

/// A point cloud from a binary matrix file (rows are points).
pub fn read_binary_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let m = read_matrix(path)?;
    let (n, d) = m.shape();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        data.extend(m.row(i).iter());
    }
    PointCloud::new(data, n, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let cloud = PointCloud::from_rows(&[vec![0.1, -2.0], vec![3.5e-7, 4.0]]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&cloud, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "0.1,-2.0\n3.5e-7,4.0\n"
        );
        assert_eq!(parse_csv(&buf[..]).unwrap(), cloud);
    }

    #[test]
    fn malformed_csv() {
        assert!(matches!(
            parse_csv(&b"1,2\n3\n"[..]),
            Err(KmsError::Parse(_))
        ));
        assert!(matches!(parse_csv(&b"1,x\n"[..]), Err(KmsError::Parse(_))));
        assert!(matches!(parse_csv(&b""[..]), Err(KmsError::Parse(_))));
    }

    #[test]
    fn binary_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let mut buf = Vec::new();
        write_matrix_to(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(read_matrix_from(&buf[..]).unwrap(), m);
        assert!(read_matrix_from(&buf[..20]).is_err());
    }
}
