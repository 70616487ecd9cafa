use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stacked (a; b) matrix is singular or ill-conditioned at node {point} (condition number {condition:.3e})")]
    SingularBasis { point: usize, condition: f64 },

    #[error("thermodynamic lower bound violated: minimum value {min:.6e}")]
    DegenerateThermodynamics { min: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate form: {0}")]
    DegenerateForm(String),

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("1/epsilon = {inverse} is not a positive integer")]
    NonIntegerScale { inverse: f64 },

    #[error("{points_per_cell} grid points per coefficient period; at least 8 are required")]
    ResolutionInsufficient { points_per_cell: usize },

    #[error("dense oracle limited to 4096 unknowns, got {dofs}")]
    TooLarge { dofs: usize },

    #[error("tensor is singular or not positive definite: {0}")]
    SingularTensor(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
