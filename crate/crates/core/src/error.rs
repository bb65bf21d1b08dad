use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("empty sampling range [{lo}, {hi})")]
    EmptyRange { lo: f64, hi: f64 },

    #[error("input bit width must be at least 2, got {0}")]
    InvalidBitWidth(u32),

    #[error("A value must be at least 1, got {0}")]
    InvalidScale(i32),

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("element {index} is {value}, expected exactly +1 or -1")]
    NotBipolar { index: usize, value: f64 },

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate batchnorm neuron {index} in `{layer}`: |gamma * inv_std| = {value:e}")]
    DegenerateNeuron {
        layer: String,
        index: usize,
        value: f64,
    },

    #[error("non-finite loss at iteration {iteration}: d_loss={d_loss}, g_loss={g_loss}")]
    NonFiniteLoss {
        iteration: u64,
        d_loss: f64,
        g_loss: f64,
    },

    #[error("unknown scenario {name:?}; valid presets are {valid}")]
    UnknownScenario { name: String, valid: String },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad magic in {what}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        what: String,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported model file version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated {0}")]
    Truncated(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("I/O error on {path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait PathContext<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Path {
            path: path.into(),
            source,
        })
    }
}
