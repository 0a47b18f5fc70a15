//! Matrix CSV convention shared by every exported schedule.
//!
//! One record per `(step, matrix)`: `n,name,rows,cols,v…` where the values are
//! the matrix entries in row-major order. Floats are written with Rust's
//! shortest round-trip formatting, so a write/read cycle is exact.

use std::borrow::Cow;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRecord<'a> {
    pub n: usize,
    pub name: String,
    pub matrix: Cow<'a, DMatrix<f64>>,
}

impl<'a> MatrixRecord<'a> {
    pub fn borrowed(n: usize, name: &str, matrix: &'a DMatrix<f64>) -> Self {
        Self {
            n,
            name: name.to_string(),
            matrix: Cow::Borrowed(matrix),
        }
    }
}

pub fn write_matrix_csv<W: Write>(out: W, records: &[MatrixRecord<'_>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["n", "name", "rows", "cols", "values"])?;
    let mut row = Vec::new();
    for rec in records {
        let m = rec.matrix.as_ref();
        row.clear();
        row.push(rec.n.to_string());
        row.push(rec.name.clone());
        row.push(m.nrows().to_string());
        row.push(m.ncols().to_string());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                row.push(m[(i, j)].to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<Vec<MatrixRecord<'static>>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Parse(format!("record {}: missing field {i}", line + 1)))
        };
        let parse_usize = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("record {}: bad integer '{s}'", line + 1)))
        };
        let n = parse_usize(field(0)?)?;
        let name = field(1)?.to_string();
        let rows = parse_usize(field(2)?)?;
        let cols = parse_usize(field(3)?)?;
        if rec.len() != 4 + rows * cols {
            return Err(Error::Parse(format!(
                "record {}: {name} declares {rows}x{cols} but has {} values",
                line + 1,
                rec.len().saturating_sub(4)
            )));
        }
        let values = (0..rows * cols)
            .map(|k| {
                let s = &rec[4 + k];
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("record {}: bad number '{s}'", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(MatrixRecord {
            n,
            name,
            matrix: Cow::Owned(DMatrix::from_row_slice(rows, cols, &values)),
        });
    }
    Ok(out)
}

/// Groups records named `name` into a step-ordered sequence.
pub fn sequence_named(records: &[MatrixRecord<'_>], name: &str) -> Result<Vec<DMatrix<f64>>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    for rec in records.iter().filter(|r| r.name == name) {
        if rec.n != out.len() {
            return Err(Error::Parse(format!(
                "{name} entries out of order at step {}",
                rec.n
            )));
        }
        out.push(rec.matrix.as_ref().clone());
    }
    Ok(out)
}
