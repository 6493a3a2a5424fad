use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fft size {0} is not a power of two")]
    FftSize(usize),

    #[error("empty mel band {band}: no fft bin falls inside the filter")]
    EmptyMelBand { band: usize },

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer}: missing forward cache")]
    MissingCache { layer: usize },

    #[error("non-positive variance estimate in batch norm channel {channel}")]
    NonPositiveVariance { channel: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("quantized model has no calibration for {0}")]
    MissingCalibration(String),

    #[error("unknown layer kind: {0}")]
    UnknownLayerKind(String),

    #[error("{path}: {detail}")]
    Wav { path: PathBuf, detail: String },

    #[error("manifest row {row}: {detail}")]
    Manifest { row: usize, detail: String },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: usize, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            detail: detail.into(),
        }
    }
}

impl Error {
    /// Attaches a layer index to errors raised inside a layer kernel.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            Error::Shape { detail, .. } => Error::Shape {
                layer: index,
                detail,
            },
            Error::MissingCache { .. } => Error::MissingCache { layer: index },
            other => other,
        }
    }
}
