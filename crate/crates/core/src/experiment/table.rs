use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanapprox::csv_err;

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// One `(method, r, realization)` row. Covariance methods fill the
/// distance columns; mean approximators fill the risk and error columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub family: String,
    pub method: String,
    pub r: usize,
    pub realization: usize,
    pub forstner: Option<f64>,
    pub kl: Option<f64>,
    pub hellinger: Option<f64>,
    pub frobenius: Option<f64>,
    pub risk_theory: Option<f64>,
    pub risk_mc: Option<f64>,
    pub rel_cpu_time: Option<f64>,
    pub seed: u64,
    /// `δ²_{r+1}`, empty past the end of the spectrum.
    pub delta_sq_next: Option<f64>,
    /// `‖μ(y) − μpos(y)‖²_{Γpos⁻¹}` for the realization's data.
    pub mean_err_sq: Option<f64>,
    /// `‖μ(y) − μpos(y)‖_{Γpos⁻¹} / ‖μpos(y)‖_{Γpos⁻¹}`.
    pub mean_err_rel: Option<f64>,
}

impl ResultRow {
    pub fn new(family: &str, method: &str, r: usize, realization: usize, seed: u64) -> Self {
        ResultRow {
            family: family.into(),
            method: method.into(),
            r,
            realization,
            forstner: None,
            kl: None,
            hellinger: None,
            frobenius: None,
            risk_theory: None,
            risk_mc: None,
            rel_cpu_time: None,
            seed,
            delta_sq_next: None,
            mean_err_sq: None,
            mean_err_rel: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// `(realization, i, δ²ᵢ, λᵢ(Γpr), λᵢ(H))`, all non-increasing in `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub realization: usize,
    pub i: usize,
    pub delta_sq: f64,
    pub prior_eig: f64,
    pub hessian_eig: f64,
}

impl ResultTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, &self.rows)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        Ok(ResultTable {
            rows: read_rows(r)?,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        Self::read_csv(f)
    }
}

pub fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_with_empty_fields() {
        let mut a = ResultRow::new("synthetic", "optimal", 3, 1, 7);
        a.forstner = Some(0.125);
        a.delta_sq_next = Some(1e-7);
        let mut b = ResultRow::new("synthetic", "low_rank", 3, 1, 7);
        b.risk_theory = Some(12.5);
        let t = ResultTable { rows: vec![a, b] };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "family,method,r,realization,forstner,kl,hellinger,frobenius,risk_theory,risk_mc,rel_cpu_time,seed,delta_sq_next,mean_err_sq,mean_err_rel\n"
        ));
        assert_eq!(ResultTable::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn malformed_csv_names_the_line() {
        let text = "family,method,r,realization,forstner,kl,hellinger,frobenius,risk_theory,risk_mc,rel_cpu_time,seed,delta_sq_next,mean_err_sq,mean_err_rel\n\
                    synthetic,optimal,0,0,1.5,,,,,,,1,,,\n\
                    synthetic,optimal,one,0,1.5,,,,,,,1,,,\n";
        match ResultTable::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
