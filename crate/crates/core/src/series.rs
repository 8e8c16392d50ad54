//! Finite samples of a d-dimensional time series and their CSV form.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// `n` observations of a real `d`-vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl Series {
    pub fn new(data: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("series dimension must be positive".into()));
        }
        if data.is_empty() || data.len() % d != 0 {
            return Err(Error::Dimension(format!(
                "{} values cannot be split into rows of length {d}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "observation {} component {}",
                i / d + 1,
                i % d + 1
            )));
        }
        let n = data.len() / d;
        Ok(Self { data, n, d })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(values, 1)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.concat(), d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Observation `i` (0-based).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.d);
        for row in self.rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m / self.n as f64
    }

    /// Copy with `center` subtracted from every observation.
    pub fn centered(&self, center: &[f64]) -> Result<Series> {
        if center.len() != self.d {
            return Err(Error::Dimension(format!(
                "center has length {}, series has dimension {}",
                center.len(),
                self.d
            )));
        }
        let data = self
            .rows()
            .flat_map(|r| r.iter().zip(center).map(|(x, c)| x - c))
            .collect();
        Ok(Series { data, n: self.n, d: self.d })
    }

    pub fn scaled(&self, c: f64) -> Series {
        Series {
            data: self.data.iter().map(|x| c * x).collect(),
            n: self.n,
            d: self.d,
        }
    }

    /// Reads one observation per record. A first record that does not parse
    /// as numbers is treated as a header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Series> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if idx == 0 => continue,
                Err(e) => {
                    return Err(Error::Config(format!("record {}: {e}", idx + 1)));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("csv contains no observations".into()));
        }
        Series::from_rows(&rows)
    }

    /// Writes a `x1,...,xd` header followed by one row per observation.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record((1..=self.d).map(|j| format!("x{j}")))?;
        for row in self.rows() {
            wtr.write_record(row.iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_input() {
        assert!(Series::new(vec![], 1).is_err());
        assert!(Series::new(vec![1.0, 2.0, 3.0], 2).is_err());
        assert!(matches!(Series::univariate(vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn csv_with_and_without_header() {
        let s = Series::read_csv("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 2));
        assert_eq!(s.row(1), &[3.0, 4.0]);
        let s = Series::read_csv("1.5\n-2\n".as_bytes()).unwrap();
        assert_eq!(s.as_slice(), &[1.5, -2.0]);
        assert!(Series::read_csv("1\nx\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
            let d = if vals.len() % 2 == 0 { 2 } else { 1 };
            let s = Series::new(vals, d).unwrap();
            let mut buf = Vec::new();
            s.write_csv(&mut buf).unwrap();
            let back = Series::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
