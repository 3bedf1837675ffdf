//! Posterior draw matrices and their optional columnar binary persistence.
//!
//! File layout (little-endian): 8-byte magic `CFDRAWS1`, u32 version (1),
//! u64 rows, u64 cols, then rows*cols f64 values in row-major order. One row
//! per retained MCMC draw, one column per post-period month.

use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CFDRAWS1";
const VERSION: u32 = 1;

/// Dense row-major matrix of posterior draws: rows index MCMC draws,
/// columns index post-period months.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> DrawMatrix {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged draw rows");
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            data.extend_from_slice(&r);
        }
        DrawMatrix { rows: n, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> DrawMatrix {
        DrawMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn write_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(self.rows as u64).to_le_bytes())?;
        f.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()
    }

    pub fn read_binary(path: &Path) -> std::io::Result<DrawMatrix> {
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a draw matrix file (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(bad("unsupported draw matrix version"));
        }
        let mut b8 = [0u8; 8];
        f.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        f.read_exact(&mut b8)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            f.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(DrawMatrix { rows, cols, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let m = DrawMatrix::from_rows(vec![vec![1.5, -2.0, 0.0], vec![f64::MIN_POSITIVE, 3.7, 9.9]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.bin");
        m.write_binary(&path).unwrap();
        assert_eq!(DrawMatrix::read_binary(&path).unwrap(), m);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        std::fs::write(&path, b"definitely not a draw file").unwrap();
        assert!(DrawMatrix::read_binary(&path).is_err());
    }
}
