//! Dense linear algebra, eigen-solvers, assignment and clustering.

pub mod assign;
pub mod cholesky;
pub mod eigen;
pub mod kmeans;
pub mod matrix;
pub mod perm;

pub use assign::{capacitated_assignment, hungarian};
pub use cholesky::Cholesky;
pub use eigen::{rank_k_truncate, spectral_norm, sym_eig, top_abs_eig, SymEigen, SymOperator};
pub use kmeans::{balanced_kmeans, kmeans, KMeans, KMeansOptions};
pub use matrix::{dot, norm, Matrix, SymmetricMatrix};
