//! Sparse domination of bilinear forms of Calderón–Zygmund operators on
//! discrete dyadic windows, with experiments that probe the T1 reduction.

pub mod engine;
pub mod error;
pub mod experiments;
pub mod function;
pub mod grid;
pub mod kernel;
pub mod operator;
pub mod quadrature;
pub mod sparse;
pub mod stats;

pub use error::{Error, Result};
pub use grid::{
    classify_good, relation, skeleton_distance, Cube, DyadicGrid, GeometricCube, Goodness, GoodnessParams,
    GridDescription, GridGeometry, GridId, Relation, ShiftSequence,
};
pub use function::{
    average, conditional_expectation, cz_decompose, haar_difference, martingale_transform, maximal_function, project,
    CzAtom, CzDecomposition, GridFunction, HaarDifference, Pyramid,
};
pub use kernel::{Certification, KernelKind, KernelSpec};
pub use operator::{
    hardy_check, off_diagonal_bound, off_diagonal_check, poisson_like, DiscreteOperator, HardyCheck, OffDiagonal,
};
pub use sparse::{
    buv_eval, maximal_components, random_sparse_collection, shifted_grid_family, sparse_dominate_buv, square_function,
    universal_sparse, BoxSums, BuvDomination, CellBox, ComplexityFormParams, SparseCollection, SparseEntry,
    SparsityCertificate, UniversalSparse,
};
pub use engine::{
    build_stopping_tree, decompose_form, epsilon_coefficients, sparse_bound_verify, Buckets, DecompositionReport,
    SparseBoundConfig, SparseBoundReport, StoppingNode, StoppingTree,
};
