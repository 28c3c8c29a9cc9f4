use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("character {0:?} is not in the font alphabet")]
    UnknownGlyph(char),
    #[error("label {label:?} needs {len} cells but only {max} are available")]
    LabelTooLong { label: String, len: usize, max: usize },
    #[error("brightness factor must be positive, got {0}")]
    InvalidFactor(f64),
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("loss mask selects no patches")]
    EmptyMask,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("strip of {height}x{width} does not fit {cell_height}x{cell_width} cells")]
    BadStripShape { height: usize, width: usize, cell_height: usize, cell_width: usize },
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("bad font asset: {0}")]
    BadFont(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownGlyph(_) => "E_UNKNOWN_GLYPH",
            Error::LabelTooLong { .. } => "E_LABEL_TOO_LONG",
            Error::InvalidFactor(_) => "E_INVALID_FACTOR",
            Error::BadImage(_) => "E_BAD_IMAGE",
            Error::DimensionMismatch(_) => "E_DIMENSION_MISMATCH",
            Error::InvalidLayout(_) => "E_INVALID_LAYOUT",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::NonScalarBackward(_) => "E_NON_SCALAR_BACKWARD",
            Error::EmptyMask => "E_EMPTY_MASK",
            Error::ConfigMismatch(_) => "E_CONFIG_MISMATCH",
            Error::InvalidConfig(_) => "E_INVALID_CONFIG",
            Error::StepOutOfRange { .. } => "E_STEP_OUT_OF_RANGE",
            Error::MissingGrad(_) => "E_MISSING_GRAD",
            Error::BadStripShape { .. } => "E_BAD_STRIP_SHAPE",
            Error::EmptyLabel => "E_EMPTY_LABEL",
            Error::BadMagic { .. } => "E_BAD_MAGIC",
            Error::TruncatedFile(_) => "E_TRUNCATED_FILE",
            Error::CountMismatch { .. } => "E_COUNT_MISMATCH",
            Error::BadFont(_) => "E_BAD_FONT",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Dataset(_) => "E_DATASET",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Toml(_) => "E_TOML",
            Error::Csv(_) => "E_CSV",
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigMismatch(_) | Error::InvalidConfig(_) | Error::InvalidLayout(_) | Error::Toml(_) | Error::Json(_) => 3,
            Error::BadMagic { .. }
            | Error::TruncatedFile(_)
            | Error::CountMismatch { .. }
            | Error::Dataset(_)
            | Error::BadImage(_)
            | Error::Csv(_) => 4,
            Error::Io(_) => 5,
            Error::Checkpoint(_) | Error::BadFont(_) => 6,
            Error::UnknownGlyph(_) | Error::LabelTooLong { .. } | Error::EmptyLabel => 7,
            _ => 8,
        }
    }
}
