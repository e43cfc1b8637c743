//! Matrix primitives: SPD matrices and their square roots, linear
//! operators, symmetric and generalized eigensolvers, the whitened SVD and
//! Matrix Market I/O.

mod eig;
mod gsvd;
pub mod mmio;
mod operator;
mod spd;

pub use eig::{
    generalized_eig, generalized_eig_factored, sym_eig, sym_eigenvalues, EigMethod, EigOptions,
    EigenPairs, GeneralizedEigen, Orthonormality, DEFAULT_DENSE_FALLBACK_DIM, DEFAULT_EIG_TOL,
};
pub use gsvd::{gsvd_triplets, GsvdTriplets};
pub use operator::{
    adjoint_defect, Composed, DenseOperator, LinearOperator, SharedOperator, SparseMatrix,
};
pub use spd::{cholesky_lower, spd_sqrt, FactorKind, SpdMatrix, SquareRootFactor, SYMMETRY_TOL};

pub(crate) use spd::symmetrize;
