//! Matrix Market text I/O for real matrices, `array` and `coordinate`
//! formats with the `general` or `symmetric` qualifier.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::operator::SparseMatrix;
use super::spd::symmetry_defect;
use crate::error::{Error, Result};

const HEADER: &str = "%%MatrixMarket matrix";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Array,
    Coordinate,
}

/// A matrix as read from disk, in the layout it was stored with.
#[derive(Clone, Debug)]
pub enum MmMatrix {
    Dense(DMatrix<f64>),
    Sparse(SparseMatrix),
}

impl MmMatrix {
    pub fn into_dense(self) -> DMatrix<f64> {
        match self {
            MmMatrix::Dense(m) => m,
            MmMatrix::Sparse(s) => {
                use super::operator::LinearOperator;
                s.to_dense()
            }
        }
    }

    pub fn into_sparse(self) -> Result<SparseMatrix> {
        match self {
            MmMatrix::Sparse(s) => Ok(s),
            MmMatrix::Dense(m) => {
                let trip: Vec<_> = (0..m.ncols())
                    .flat_map(|j| (0..m.nrows()).map(move |i| (i, j)))
                    .filter(|&(i, j)| m[(i, j)] != 0.0)
                    .map(|(i, j)| (i, j, m[(i, j)]))
                    .collect();
                SparseMatrix::from_triplets(m.nrows(), m.ncols(), &trip)
            }
        }
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: Option<&str>, line: u64) -> Result<f64> {
    let tok = tok.ok_or_else(|| parse_err(line, "missing value"))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid number {tok:?}")))
}

fn parse_usize(tok: Option<&str>, line: u64) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_err(line, "missing integer"))?;
    tok.parse::<usize>()
        .map_err(|_| parse_err(line, format!("invalid integer {tok:?}")))
}

pub fn read<R: Read>(reader: R) -> Result<MmMatrix> {
    let mut lines = BufReader::new(reader).lines();
    let mut lineno = 0u64;
    let mut next_line =
        |lines: &mut std::io::Lines<BufReader<R>>| -> Result<Option<(u64, String)>> {
            loop {
                match lines.next() {
                    None => return Ok(None),
                    Some(l) => {
                        lineno += 1;
                        let l = l?;
                        let t = l.trim();
                        if t.is_empty() || (t.starts_with('%') && lineno > 1) {
                            continue;
                        }
                        return Ok(Some((lineno, l)));
                    }
                }
            }
        };

    let (_, header) = next_line(&mut lines)?.ok_or_else(|| parse_err(1, "empty file"))?;
    let lower = header.to_ascii_lowercase();
    if !lower.starts_with(&HEADER.to_ascii_lowercase()) {
        return Err(parse_err(
            1,
            format!("expected header starting with {HEADER:?}"),
        ));
    }
    let fields: Vec<&str> = lower.split_whitespace().skip(2).collect();
    let layout = match fields.first() {
        Some(&"array") => Layout::Array,
        Some(&"coordinate") => Layout::Coordinate,
        other => return Err(parse_err(1, format!("unsupported format {other:?}"))),
    };
    match fields.get(1) {
        Some(&"real") | Some(&"double") | Some(&"integer") => {}
        other => return Err(parse_err(1, format!("unsupported field {other:?}"))),
    }
    let symmetric = match fields.get(2) {
        Some(&"general") | None => false,
        Some(&"symmetric") => true,
        other => return Err(parse_err(1, format!("unsupported symmetry {other:?}"))),
    };

    let (sl, size) = next_line(&mut lines)?.ok_or_else(|| parse_err(2, "missing size line"))?;
    let mut tok = size.split_whitespace();
    let nrows = parse_usize(tok.next(), sl)?;
    let ncols = parse_usize(tok.next(), sl)?;
    if symmetric && nrows != ncols {
        return Err(parse_err(sl, "symmetric matrix must be square"));
    }

    match layout {
        Layout::Array => {
            let mut m = DMatrix::zeros(nrows, ncols);
            // column-major; symmetric files store the lower triangle only
            let positions: Vec<(usize, usize)> = (0..ncols)
                .flat_map(|j| {
                    let start = if symmetric { j } else { 0 };
                    (start..nrows).map(move |i| (i, j))
                })
                .collect();
            for &(i, j) in &positions {
                let (l, text) = next_line(&mut lines)?
                    .ok_or_else(|| parse_err(sl, "unexpected end of file in array data"))?;
                let v = parse_f64(text.split_whitespace().next(), l)?;
                m[(i, j)] = v;
                if symmetric {
                    m[(j, i)] = v;
                }
            }
            if let Some((l, _)) = next_line(&mut lines)? {
                return Err(parse_err(l, "trailing data after array entries"));
            }
            Ok(MmMatrix::Dense(m))
        }
        Layout::Coordinate => {
            let nnz = parse_usize(tok.next(), sl)?;
            let mut trip = Vec::with_capacity(if symmetric { 2 * nnz } else { nnz });
            for _ in 0..nnz {
                let (l, text) = next_line(&mut lines)?
                    .ok_or_else(|| parse_err(sl, "unexpected end of file in coordinate data"))?;
                let mut t = text.split_whitespace();
                let i = parse_usize(t.next(), l)?;
                let j = parse_usize(t.next(), l)?;
                let v = parse_f64(t.next(), l)?;
                if i == 0 || j == 0 || i > nrows || j > ncols {
                    return Err(parse_err(
                        l,
                        format!("index ({i}, {j}) outside {nrows}x{ncols}"),
                    ));
                }
                if symmetric && j > i {
                    return Err(parse_err(l, "symmetric file has an upper-triangle entry"));
                }
                trip.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    trip.push((j - 1, i - 1, v));
                }
            }
            if let Some((l, _)) = next_line(&mut lines)? {
                return Err(parse_err(l, "more entries than declared"));
            }
            Ok(MmMatrix::Sparse(SparseMatrix::from_triplets(
                nrows, ncols, &trip,
            )?))
        }
    }
}

pub fn read_file(path: &Path) -> Result<MmMatrix> {
    read(fs::File::open(path)?)
}

/// Writes a dense matrix in `array` format. With `symmetric`, only the
/// lower triangle is stored; the matrix must be exactly symmetric.
pub fn write_dense<W: Write>(mut w: W, m: &DMatrix<f64>, symmetric: bool) -> Result<()> {
    if symmetric && (m.nrows() != m.ncols() || symmetry_defect(m) != 0.0) {
        return Err(Error::shape(
            "symmetric qualifier requires an exactly symmetric matrix",
        ));
    }
    let kind = if symmetric { "symmetric" } else { "general" };
    writeln!(w, "{HEADER} array real {kind}")?;
    writeln!(w, "{} {}", m.nrows(), m.ncols())?;
    for j in 0..m.ncols() {
        let start = if symmetric { j } else { 0 };
        for i in start..m.nrows() {
            writeln!(w, "{:e}", m[(i, j)])?;
        }
    }
    Ok(())
}

pub fn write_sparse<W: Write>(mut w: W, s: &SparseMatrix) -> Result<()> {
    use super::operator::LinearOperator;
    writeln!(w, "{HEADER} coordinate real general")?;
    writeln!(w, "{} {} {}", s.nrows(), s.ncols(), s.nnz())?;
    for (i, j, v) in s.triplets() {
        writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn write_dense_file(path: &Path, m: &DMatrix<f64>, symmetric: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_dense(&mut f, m, symmetric)?;
    f.flush()?;
    Ok(())
}

pub fn write_sparse_file(path: &Path, s: &SparseMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_sparse(&mut f, s)?;
    f.flush()?;
    Ok(())
}
