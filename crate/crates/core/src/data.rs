//! Samples `(X_i, Y_i, Z_i)` and their on-disk formats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in column {column} at row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if data.len() != rows * cols {
            return Err(DataError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix with `rows` rows and no columns.
    pub fn empty(rows: usize) -> Self {
        Self::zeros(rows, 0)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, DataError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DataError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix, DataError> {
        if self.rows != other.rows {
            return Err(DataError::DimensionMismatch(format!(
                "cannot stack {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }
}

/// How distance ties in nearest-neighbor search are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreakPolicy {
    /// Uniform choice among tied candidates, driven by the caller's stream.
    #[default]
    RandomUniform,
    /// Smallest index among tied candidates.
    LowestIndex,
}

/// A validated sample of `n` observations of `(X, Y, Z)`, `X ∈ R^p`, `Z ∈ R^q`.
///
/// `p = 0` is allowed and selects the unconditional coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
    z: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, z: Matrix) -> Result<Self, DataError> {
        let n = y.len();
        if n == 0 {
            return Err(DataError::DimensionMismatch("empty sample".into()));
        }
        if x.rows() != n || z.rows() != n {
            return Err(DataError::DimensionMismatch(format!(
                "x has {} rows, y has {n} entries, z has {} rows",
                x.rows(),
                z.rows()
            )));
        }
        check_finite("x", x.as_slice(), x.cols())?;
        check_finite("y", &y, 1)?;
        check_finite("z", z.as_slice(), z.cols())?;
        Ok(Self { x, y, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn q(&self) -> usize {
        self.z.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    /// Rows of `(X, Z)` as a single point cloud.
    pub fn xz(&self) -> Matrix {
        self.x.hstack(&self.z).expect("row counts validated at construction")
    }

    /// Same `X`, `Z` with a different response column.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self, DataError> {
        Self::new(self.x.clone(), y, self.z.clone())
    }

    /// Header `x1..xp,y,z1..zq`, one row per observation.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.p()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        header.extend((1..=self.q()).map(|j| format!("z{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(f64::to_string).collect();
            rec.push(self.y[i].to_string());
            rec.extend(self.z.row(i).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let y_col = headers
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| DataError::Malformed("missing `y` column".into()))?;
        let (mut xs, mut zs) = (Vec::new(), Vec::new());
        for (j, h) in headers.iter().enumerate() {
            if j == y_col {
                continue;
            }
            let (prefix, target) = if let Some(rest) = h.strip_prefix('x') {
                (rest, &mut xs)
            } else if let Some(rest) = h.strip_prefix('z') {
                (rest, &mut zs)
            } else {
                return Err(DataError::Malformed(format!("unexpected column `{h}`")));
            };
            let idx: usize = prefix
                .parse()
                .map_err(|_| DataError::Malformed(format!("bad column name `{h}`")))?;
            target.push((idx, j));
        }
        xs.sort_unstable();
        zs.sort_unstable();
        for (cols, name) in [(&xs, 'x'), (&zs, 'z')] {
            if cols.iter().enumerate().any(|(k, (idx, _))| *idx != k + 1) {
                return Err(DataError::Malformed(format!(
                    "{name} columns must be numbered 1..{}",
                    cols.len()
                )));
            }
        }

        let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64, DataError> {
                rec.get(j)
                    .ok_or_else(|| DataError::Malformed(format!("short row {row}")))?
                    .parse::<f64>()
                    .map_err(|e| DataError::Malformed(format!("row {row}, column {j}: {e}")))
            };
            for &(_, j) in &xs {
                x.push(parse(j)?);
            }
            y.push(parse(y_col)?);
            for &(_, j) in &zs {
                z.push(parse(j)?);
            }
        }
        let n = y.len();
        Dataset::new(Matrix::new(n, xs.len(), x)?, y, Matrix::new(n, zs.len(), z)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self, DataError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Validated construction from column data.
pub fn dataset_from_columns(x: Matrix, y: Vec<f64>, z: Matrix) -> Result<Dataset, DataError> {
    Dataset::new(x, y, z)
}

fn check_finite(column: &str, values: &[f64], cols: usize) -> Result<(), DataError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(DataError::NonFiniteValue {
            column: column.to_string(),
            row: k / cols.max(1),
        }),
        None => Ok(()),
    }
}

/// JSON mirror of the CSV columns.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRepr {
    n: usize,
    p: usize,
    q: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    z: Vec<Vec<f64>>,
}

impl From<Dataset> for DatasetRepr {
    fn from(d: Dataset) -> Self {
        let rows = |m: &Matrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        DatasetRepr {
            n: d.n(),
            p: d.p(),
            q: d.q(),
            x: rows(&d.x),
            z: rows(&d.z),
            y: d.y,
        }
    }
}

impl TryFrom<DatasetRepr> for Dataset {
    type Error = DataError;

    fn try_from(r: DatasetRepr) -> Result<Self, DataError> {
        let to_matrix = |rows: &[Vec<f64>], cols: usize| -> Result<Matrix, DataError> {
            if rows.len() != r.n || rows.iter().any(|row| row.len() != cols) {
                return Err(DataError::DimensionMismatch("JSON matrix shape".into()));
            }
            Matrix::new(r.n, cols, rows.concat())
        };
        if r.y.len() != r.n {
            return Err(DataError::DimensionMismatch(format!(
                "n = {} but y has {} entries",
                r.n,
                r.y.len()
            )));
        }
        Dataset::new(to_matrix(&r.x, r.p)?, r.y, to_matrix(&r.z, r.q)?)
    }
}

impl std::fmt::Display for TieBreakPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TieBreakPolicy::RandomUniform => f.write_str("random_uniform"),
            TieBreakPolicy::LowestIndex => f.write_str("lowest_index"),
        }
    }
}

/// Bundles a tie-break policy with the stream that drives it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieBreak {
    pub policy: TieBreakPolicy,
    pub stream: RngStream,
}

impl TieBreak {
    pub fn new(policy: TieBreakPolicy, stream: RngStream) -> Self {
        Self { policy, stream }
    }

    pub fn lowest_index() -> Self {
        Self::new(TieBreakPolicy::LowestIndex, RngStream::root(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column(v)
    }

    #[test]
    fn builds_small_dataset() {
        let d = dataset_from_columns(col(&[0.0, 1.0, 3.0]), vec![0.1, 0.2, 0.3], col(&[0.0, 1.0, 3.0]))
            .unwrap();
        assert_eq!((d.n(), d.p(), d.q()), (3, 1, 1));
    }

    #[test]
    fn rejects_row_mismatch() {
        let err = dataset_from_columns(col(&[0.0, 1.0, 3.0]), vec![0.1, 0.2, 0.3, 0.4], col(&[0.0; 4]))
            .unwrap_err();
        assert!(matches!(err, DataError::DimensionMismatch(_)));
    }

    #[test]
    fn rejects_nan() {
        let err = dataset_from_columns(col(&[0.0, 1.0]), vec![0.1, f64::NAN], col(&[0.0, 1.0]))
            .unwrap_err();
        assert!(matches!(err, DataError::NonFiniteValue { row: 1, .. }));
        let err = dataset_from_columns(col(&[0.0, f64::INFINITY]), vec![0.1, 0.2], col(&[0.0, 1.0]))
            .unwrap_err();
        assert!(matches!(err, DataError::NonFiniteValue { .. }));
    }

    #[test]
    fn zero_column_x_is_legal() {
        let d = dataset_from_columns(Matrix::empty(3), vec![1.0, 2.0, 3.0], col(&[1.0, 2.0, 4.0])).unwrap();
        assert_eq!(d.p(), 0);
        assert_eq!(d.xz(), col(&[1.0, 2.0, 4.0]));
    }

    #[test]
    fn csv_header_layout() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let d = Dataset::new(x, vec![0.5, 0.25], col(&[9.0, 8.0])).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "x1,x2,y,z1");
        assert_eq!(Dataset::read_csv(text.as_bytes()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_unknown_columns() {
        let err = Dataset::read_csv("x1,y,w\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Malformed(_)));
    }

    #[test]
    fn json_rejects_bad_shape() {
        let s = r#"{"n":2,"p":1,"q":1,"x":[[1.0]],"y":[1.0,2.0],"z":[[1.0],[2.0]]}"#;
        assert!(Dataset::from_json(s).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn roundtrips_are_bit_exact(
            rows in prop::collection::vec((finite(), finite(), finite(), finite()), 1..20)
        ) {
            let x = Matrix::from_rows(&rows.iter().map(|r| [r.0, r.1]).collect::<Vec<_>>()).unwrap();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let z = Matrix::column(&rows.iter().map(|r| r.3).collect::<Vec<_>>());
            let d = Dataset::new(x, y, z).unwrap();

            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = Dataset::read_csv(buf.as_slice()).unwrap();
            let bits = |d: &Dataset| -> Vec<u64> {
                d.x().as_slice().iter().chain(d.y()).chain(d.z().as_slice()).map(|v| v.to_bits()).collect()
            };
            prop_assert_eq!(bits(&back), bits(&d));

            let back = Dataset::from_json(&d.to_json().unwrap()).unwrap();
            prop_assert_eq!(bits(&back), bits(&d));
        }
    }
}
