use std::sync::Arc;

use nalgebra::DMatrix;

use lowrank_bayes::covapprox::{PencilDecomposition, Provenance};
use lowrank_bayes::experiment::{
    read_rows, report, run, write_outputs, EigenRow, ExperimentSpec, ResultRow, ResultTable,
    EIGENVALUES_FILE, MANIFEST_FILE, RESULTS_FILE,
};
use lowrank_bayes::linalg::{DenseOperator, EigOptions, SpdMatrix};
use lowrank_bayes::meanapprox::crossover_order;
use lowrank_bayes::model::GaussianLinearModel;

const FIG_SPEC: &str = r#"
realizations = 2
seed = 11
methods = ["optimal", "hessian", "prior", "frobenius", "bfgs"]
mean_kinds = ["low_rank", "low_rank_update", "cgls"]
mc_samples = 500

[problem]
family = "synthetic"
dim = 12
hessian = { lambda0 = 500.0, alpha = 0.69, tau = 1e-6 }
prior = { lambda0 = 1.0, alpha = 1.103, tau = 1e-6 }
"#;

fn rows<'a>(t: &'a ResultTable, method: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
    t.rows.iter().filter(move |r| r.method == method)
}

#[test]
fn optimal_curve_decreases_to_zero() {
    let spec = ExperimentSpec::from_toml_str(
        "methods = [\"optimal\"]\n[problem]\nfamily = \"synthetic\"\ndim = 10\n\
         hessian = { lambda0 = 50.0, alpha = 1.0, tau = 1e-6 }\nprior = { lambda0 = 1.0, alpha = 2.0, tau = 1e-6 }\n",
    )
    .unwrap();
    let out = run(&spec).unwrap();
    let d: Vec<f64> = rows(&out.table, "optimal")
        .map(|r| r.forstner.unwrap())
        .collect();
    assert_eq!(d.len(), 11);
    for w in d.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert!(d[10] < 1e-10);
}

#[test]
fn every_method_is_at_least_as_far_as_optimal() {
    let spec = ExperimentSpec::from_toml_str(FIG_SPEC).unwrap();
    let out = run(&spec).unwrap();
    let n = 12;
    assert_eq!(out.table.rows.len(), 2 * (n + 1) * 5 + 2 * (n + 1) * 3);
    for row in out.table.rows.iter().filter(|r| r.forstner.is_some()) {
        let opt = rows(&out.table, "optimal")
            .find(|o| o.r == row.r && o.realization == row.realization)
            .unwrap();
        assert!(
            row.forstner.unwrap() >= opt.forstner.unwrap() - 1e-10,
            "{} r={}",
            row.method,
            row.r
        );
    }
    for row in out
        .table
        .rows
        .iter()
        .filter(|r| r.method == "low_rank" || r.method == "low_rank_update")
    {
        assert!(row.risk_theory.is_some() && row.risk_mc.is_some() && row.mean_err_rel.is_some());
    }
    assert!(rows(&out.table, "cgls").all(|r| r.risk_theory.is_none() && r.risk_mc.is_some()));
    assert_eq!(out.eigenvalues.len(), 2 * n);
}

#[test]
fn rerun_writes_identical_files() {
    let spec = ExperimentSpec::from_toml_str(FIG_SPEC).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_outputs(&run(&spec).unwrap(), a.path()).unwrap();
    write_outputs(&run(&spec).unwrap(), b.path()).unwrap();
    for name in [
        RESULTS_FILE,
        EIGENVALUES_FILE,
        MANIFEST_FILE,
        "distance_vs_rank.svg",
        "mean_error.svg",
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let back = ResultTable::read_file(&a.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(back.rows.len(), run(&spec).unwrap().table.rows.len());
    let eig: Vec<EigenRow> =
        read_rows(std::fs::File::open(a.path().join(EIGENVALUES_FILE)).unwrap()).unwrap();
    assert_eq!(eig.len(), 24);
}

#[test]
fn plotted_numbers_come_from_the_table() {
    let spec = ExperimentSpec::from_toml_str(
        "methods = [\"optimal\", \"prior\"]\nranks = [0, 2, 5]\n[problem]\nfamily = \"synthetic\"\ndim = 5\n\
         hessian = { lambda0 = 50.0, alpha = 1.0, tau = 1e-6 }\nprior = { lambda0 = 1.0, alpha = 2.0, tau = 1e-6 }\n",
    )
    .unwrap();
    let out = run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("distance_vs_rank.svg")).unwrap();
    let data = &svg[svg.find("series,x,y\n").unwrap() + 11..svg.find("-->").unwrap()];
    for line in data.lines() {
        let f: Vec<&str> = line.split(',').collect();
        let r: usize = f[1].parse().unwrap();
        let y: f64 = f[2].parse().unwrap();
        assert!(
            out.table
                .rows
                .iter()
                .any(|row| row.method == f[0] && row.r == r && row.forstner == Some(y)),
            "{line}"
        );
    }
}

#[test]
fn manifest_records_hash_and_version() {
    let spec = ExperimentSpec::from_toml_str(FIG_SPEC).unwrap();
    let out = run(&spec).unwrap();
    assert_eq!(out.manifest.config_hash, spec.config_hash());
    assert_eq!(out.manifest.library_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(out.manifest.seeds, vec![11, 12]);
    assert_eq!(out.manifest.spec.ranks.as_ref().unwrap().len(), 13);
}

#[test]
fn crossover_of_the_four_one_quarter_model() {
    let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 0.5]));
    let model = GaussianLinearModel::new(
        Arc::new(DenseOperator::new(g)),
        SpdMatrix::identity(3),
        SpdMatrix::identity(3),
    )
    .unwrap();
    let pencil = PencilDecomposition::compute(&model, 3, &EigOptions::default()).unwrap();
    let d2: Vec<f64> = pencil.delta_sq.iter().copied().collect();
    assert!(
        (d2[0] - 4.0).abs() < 1e-12 && (d2[1] - 1.0).abs() < 1e-12 && (d2[2] - 0.25).abs() < 1e-12
    );
    let rows = (0..=3)
        .map(|r| {
            let mut row = ResultRow::new("synthetic", "low_rank", r, 0, 0);
            row.delta_sq_next = d2.get(r).copied();
            row
        })
        .collect();
    let rep = report(&ResultTable { rows }).unwrap();
    assert_eq!(rep.crossovers, vec![(0, 2)]);
    assert_eq!(crossover_order(&d2), 2);
}

#[test]
fn spec_methods_map_to_rows() {
    let mut spec = ExperimentSpec::from_toml_str(FIG_SPEC).unwrap();
    spec.methods = vec![Provenance::Bfgs];
    spec.mean_kinds.clear();
    spec.ranks = Some(vec![0, 3, 12]);
    let out = run(&spec).unwrap();
    assert!(out.table.rows.iter().all(|r| r.method == "bfgs"));
    assert_eq!(out.table.rows.len(), 6);
}
