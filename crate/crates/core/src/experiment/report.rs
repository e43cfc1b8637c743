use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::svg::{Plot, Series};
use super::table::{EigenRow, ResultRow, ResultTable};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.txt";

const COVARIANCE_METHODS: [&str; 5] = ["optimal", "hessian", "prior", "frobenius", "bfgs"];
const MEAN_METHODS: [&str; 3] = ["low_rank", "low_rank_update", "cgls"];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Median over realizations for every `(method, r)`. Realization and
    /// seed are those of the first row in each group.
    pub medians: Vec<ResultRow>,
    /// `(realization, r)`: first order at which every remaining `δ²` is
    /// below one.
    pub crossovers: Vec<(usize, usize)>,
    /// `(method, r, median relative CPU time)`.
    pub cpu_times: Vec<(String, usize, f64)>,
    pub text: String,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    })
}

fn column_median(rows: &[&ResultRow], f: impl Fn(&ResultRow) -> Option<f64>) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    median(&mut v)
}

fn group<'a>(table: &'a ResultTable) -> Vec<((String, usize), Vec<&'a ResultRow>)> {
    let mut groups: BTreeMap<(usize, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for row in &table.rows {
        let order = COVARIANCE_METHODS
            .iter()
            .chain(&MEAN_METHODS)
            .position(|m| *m == row.method)
            .unwrap_or(usize::MAX);
        groups
            .entry((order, row.method.clone(), row.r))
            .or_default()
            .push(row);
    }
    groups
        .into_iter()
        .map(|((_, m, r), rows)| ((m, r), rows))
        .collect()
}

pub fn medians(table: &ResultTable) -> Vec<ResultRow> {
    group(table)
        .into_iter()
        .map(|(_, rows)| {
            let first = rows[0];
            let mut out = ResultRow::new(
                &first.family,
                &first.method,
                first.r,
                first.realization,
                first.seed,
            );
            out.forstner = column_median(&rows, |r| r.forstner);
            out.kl = column_median(&rows, |r| r.kl);
            out.hellinger = column_median(&rows, |r| r.hellinger);
            out.frobenius = column_median(&rows, |r| r.frobenius);
            out.risk_theory = column_median(&rows, |r| r.risk_theory);
            out.risk_mc = column_median(&rows, |r| r.risk_mc);
            out.rel_cpu_time = column_median(&rows, |r| r.rel_cpu_time);
            out.delta_sq_next = column_median(&rows, |r| r.delta_sq_next);
            out.mean_err_sq = column_median(&rows, |r| r.mean_err_sq);
            out.mean_err_rel = column_median(&rows, |r| r.mean_err_rel);
            out
        })
        .collect()
}

/// Per realization, the first `r` in the table from which every recorded
/// `δ²_{r+1}` is below one. A missing `δ²_{r+1}` (past the end of the
/// spectrum) counts as below one.
pub fn crossover_ranks(table: &ResultTable) -> Vec<(usize, usize)> {
    let mut next: BTreeMap<usize, BTreeMap<usize, Option<f64>>> = BTreeMap::new();
    for row in &table.rows {
        next.entry(row.realization)
            .or_default()
            .entry(row.r)
            .or_insert(row.delta_sq_next);
    }
    next.into_iter()
        .filter_map(|(k, by_r)| {
            let rs: Vec<(usize, bool)> = by_r
                .into_iter()
                .map(|(r, d)| (r, d.map_or(true, |d| d < 1.0)))
                .collect();
            (0..rs.len())
                .find(|&i| rs[i..].iter().all(|(_, below)| *below))
                .map(|i| (k, rs[i].0))
        })
        .collect()
}

pub fn report(table: &ResultTable) -> Result<Report> {
    if table.is_empty() {
        return Err(Error::EmptyResult);
    }
    let medians = medians(table);
    let crossovers = crossover_ranks(table);
    let cpu_times: Vec<(String, usize, f64)> = medians
        .iter()
        .filter_map(|m| m.rel_cpu_time.map(|t| (m.method.clone(), m.r, t)))
        .collect();

    let realizations: std::collections::BTreeSet<usize> =
        table.rows.iter().map(|r| r.realization).collect();
    let families: std::collections::BTreeSet<&str> =
        table.rows.iter().map(|r| r.family.as_str()).collect();
    let mut t = String::new();
    writeln!(
        t,
        "family: {}",
        families.into_iter().collect::<Vec<_>>().join(", ")
    )
    .unwrap();
    writeln!(
        t,
        "rows: {}, realizations: {}",
        table.rows.len(),
        realizations.len()
    )
    .unwrap();

    let cov: Vec<&ResultRow> = medians.iter().filter(|m| m.forstner.is_some()).collect();
    if !cov.is_empty() {
        writeln!(t, "\nmedian distances to the exact posterior").unwrap();
        writeln!(
            t,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "method", "r", "forstner", "kl", "hellinger", "frobenius"
        )
        .unwrap();
        for m in cov {
            writeln!(
                t,
                "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
                m.method,
                m.r,
                fmt(m.forstner),
                fmt(m.kl),
                fmt(m.hellinger),
                fmt(m.frobenius)
            )
            .unwrap();
        }
    }

    let mean: Vec<&ResultRow> = medians
        .iter()
        .filter(|m| MEAN_METHODS.contains(&m.method.as_str()))
        .collect();
    if !mean.is_empty() {
        writeln!(t, "\nmedian mean-approximation errors").unwrap();
        writeln!(
            t,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "method", "r", "risk_theory", "risk_mc", "err_sq", "err_rel"
        )
        .unwrap();
        for m in mean {
            writeln!(
                t,
                "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12}",
                m.method,
                m.r,
                fmt(m.risk_theory),
                fmt(m.risk_mc),
                fmt(m.mean_err_sq),
                fmt(m.mean_err_rel)
            )
            .unwrap();
        }
    }

    writeln!(
        t,
        "\ncrossover rank (first r with every remaining delta^2 < 1)"
    )
    .unwrap();
    if crossovers.is_empty() {
        writeln!(t, "  none recorded").unwrap();
    }
    for (k, r) in &crossovers {
        writeln!(t, "  realization {k}: r = {r}").unwrap();
    }

    if !cpu_times.is_empty() {
        writeln!(
            t,
            "\nrelative CPU time (median, one posterior-precision application = 1)"
        )
        .unwrap();
        writeln!(t, "{:<16} {:>6} {:>12}", "method", "r", "rel_cpu").unwrap();
        for (m, r, c) in &cpu_times {
            writeln!(t, "{m:<16} {r:>6} {c:>12.4}").unwrap();
        }
    }
    Ok(Report {
        medians,
        crossovers,
        cpu_times,
        text: t,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.5e}"))
}

fn curves(
    medians: &[ResultRow],
    methods: &[&str],
    f: impl Fn(&ResultRow) -> Option<f64>,
) -> Vec<Series> {
    methods
        .iter()
        .filter_map(|&name| {
            let points: Vec<(f64, f64)> = medians
                .iter()
                .filter(|m| m.method == name)
                .filter_map(|m| f(m).map(|v| (m.r as f64, v)))
                .collect();
            (!points.is_empty()).then(|| Series {
                name: name.into(),
                points,
            })
        })
        .collect()
}

/// Distance, distance-gap, mean-error and eigenvalue plots built from the
/// table medians. Plots without data are skipped.
pub fn plots(table: &ResultTable, eigenvalues: &[EigenRow]) -> Vec<(&'static str, Plot)> {
    let med = medians(table);
    let mut out = Vec::new();
    let dist = curves(&med, &COVARIANCE_METHODS, |m| m.forstner);
    if !dist.is_empty() {
        out.push((
            "distance_vs_rank.svg",
            Plot {
                title: "Forstner distance to the exact posterior covariance".into(),
                x_label: "rank r".into(),
                y_label: "median distance".into(),
                log_y: true,
                series: dist,
            },
        ));
    }
    let optimal: BTreeMap<usize, f64> = med
        .iter()
        .filter(|m| m.method == "optimal")
        .filter_map(|m| m.forstner.map(|d| (m.r, d)))
        .collect();
    if !optimal.is_empty() {
        let gap = curves(&med, &COVARIANCE_METHODS[1..], |m| {
            Some(m.forstner? - optimal.get(&m.r)?)
        });
        if !gap.is_empty() {
            out.push((
                "distance_gap.svg",
                Plot {
                    title: "Distance gap to the optimal update".into(),
                    x_label: "rank r".into(),
                    y_label: "median distance minus optimal".into(),
                    log_y: false,
                    series: gap,
                },
            ));
        }
    }
    let err = curves(&med, &MEAN_METHODS, |m| m.mean_err_rel);
    if !err.is_empty() {
        out.push((
            "mean_error.svg",
            Plot {
                title: "Relative error of the approximate posterior mean".into(),
                x_label: "order r".into(),
                y_label: "median relative error".into(),
                log_y: true,
                series: err,
            },
        ));
    }
    if let Some(first) = eigenvalues.first().map(|e| e.realization) {
        let rows: Vec<&EigenRow> = eigenvalues
            .iter()
            .filter(|e| e.realization == first)
            .collect();
        let series = |name: &str, f: fn(&EigenRow) -> f64| Series {
            name: name.into(),
            points: rows.iter().map(|e| (e.i as f64, f(e))).collect(),
        };
        out.push((
            "eigenvalues.svg",
            Plot {
                title: format!("Eigenvalue decay, realization {first}"),
                x_label: "index i".into(),
                y_label: "eigenvalue".into(),
                log_y: true,
                series: vec![
                    series("delta_sq", |e| e.delta_sq),
                    series("prior", |e| e.prior_eig),
                    series("hessian", |e| e.hessian_eig),
                ],
            },
        ));
    }
    out
}

pub fn write_plots(
    table: &ResultTable,
    eigenvalues: &[EigenRow],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    plots(table, eigenvalues)
        .into_iter()
        .map(|(name, plot)| {
            let path = dir.join(name);
            std::fs::write(&path, plot.render())
                .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

/// Writes `report.txt` and the plots into `dir`.
pub fn write_report(
    report: &Report,
    table: &ResultTable,
    eigenvalues: &[EigenRow],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, &report.text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    let mut written = vec![path];
    written.extend(write_plots(table, eigenvalues, dir)?);
    Ok(written)
}
