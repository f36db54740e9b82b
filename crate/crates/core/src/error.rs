use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("index out of range on line {line}: vertex {index} but only {n_vertices} vertices")]
    IndexOutOfRangeAt {
        line: usize,
        index: usize,
        n_vertices: usize,
    },
    #[error("index out of range in element {element}: vertex {index} but only {n_vertices} vertices")]
    IndexOutOfRange {
        element: usize,
        index: usize,
        n_vertices: usize,
    },
    #[error("mesh has no {0}")]
    Empty(&'static str),
    #[error("element {0} is degenerate")]
    Degenerate(usize),
    #[error("mesh is not a closed 2-manifold")]
    NonManifold,
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel evaluated at its singularity (distance {rho:e}, time gap {delta:e})")]
    Singular { rho: f64, delta: f64 },
    #[error("invalid kernel parameters: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("unsupported triangle rule order {0} (supported: 1..=10)")]
    UnsupportedOrder(usize),
    #[error("{0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("unsupported test/trial pairing: {0}")]
    UnsupportedSpaces(String),
    #[error("mesh must be a closed 2-manifold for assembly")]
    NonManifold,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("block file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("diagonal block is singular (pivot {0})")]
    SingularBlock(usize),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle tolerance {tolerance:e} not reached at max depth (estimate {estimate:e})")]
    NotConverged { tolerance: f64, estimate: f64 },
    #[error("oracle requires {0}")]
    Precondition(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("exact function has zero norm")]
    ZeroNorm,
    #[error("error list must contain only positive values")]
    NonPositive,
    #[error("coefficient vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}
