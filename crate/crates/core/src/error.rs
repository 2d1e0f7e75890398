use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid depth {depth} at pixel ({row}, {col})")]
    InvalidDepth { row: usize, col: usize, depth: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("rotation is not orthonormal (error {0:.3e})")]
    NotOrthonormal(f64),
    #[error("singular homography")]
    SingularHomography,
    #[error("unknown token at ({row}, {col})")]
    UnknownToken { row: usize, col: usize },
    #[error("camera outside room at ({x:.3}, {y:.3}, {z:.3})")]
    CameraOutsideRoom { x: f64, y: f64, z: f64 },
    #[error("pair sampling exhausted {0} attempts")]
    RejectionExhausted(usize),
    #[error("insufficient support coverage: {hole_fraction:.4} of pixels missing, nearest support direction {direction}")]
    InsufficientCoverage { hole_fraction: f64, direction: String },
    #[error("insufficient overlap: {0:.4}")]
    InsufficientOverlap(f64),
    #[error("{0} not loaded")]
    MissingComponent(&'static str),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
