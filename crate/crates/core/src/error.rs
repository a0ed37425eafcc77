use orbvo_autodiff::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("pyramid too deep: level {level} would be {width}x{height}, below the 31 px patch")]
    PyramidTooDeep { level: usize, width: usize, height: usize },
    #[error("window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("degenerate warp: only {valid} of {total} pixels valid")]
    DegenerateWarp { valid: usize, total: usize },
    #[error("degenerate supervision: {0}")]
    DegenerateSupervision(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("trajectory pairing: {0}")]
    Pairing(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("motion too large: frame {frame} overlaps frame 0 on {overlap:.1}% of pixels")]
    MotionTooLarge { frame: usize, overlap: f64 },
    #[error("numeric fault at iteration {iteration}: {msg}")]
    Diverged { iteration: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::PyramidTooDeep { .. } => "pyramid_too_deep",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::DegenerateWarp { .. } => "degenerate_warp",
            Error::DegenerateSupervision(_) => "degenerate_supervision",
            Error::Alignment(_) => "alignment",
            Error::Pairing(_) => "pairing",
            Error::Parse { .. } => "parse",
            Error::MotionTooLarge { .. } => "motion_too_large",
            Error::Diverged { .. } => "numeric_fault",
            Error::Tensor(TensorError::NumericFault(_)) => "numeric_fault",
            Error::Tensor(TensorError::Io(_)) => "io",
            Error::Tensor(_) => "tensor",
            Error::Image(image::ImageError::IoError(_)) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }

    pub fn is_io(&self) -> bool {
        self.kind() == "io"
    }

    pub fn is_numeric(&self) -> bool {
        self.kind() == "numeric_fault"
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
