//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("invalid tensor shape {shape}: {reason}")]
    InvalidShape { shape: String, reason: String },
    #[error("backward requires a scalar root, got shape {shape}")]
    NonScalarRoot { shape: String },
    #[error("batch normalization in train mode requires batch >= 2, got {batch}")]
    BatchTooSmall { batch: usize },
    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
}

/// Errors raised by bounding-box arithmetic.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid box: min ({x_min}, {y_min}) exceeds max ({x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("cannot merge an empty list of boxes")]
    EmptyBoxList,
    #[error("thresholds must satisfy 0 <= negative < eval <= positive <= 1, got negative={negative}, eval={eval}, positive={positive}")]
    InvalidThresholds {
        negative: f64,
        eval: f64,
        positive: f64,
    },
}

/// Errors raised by loss construction.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("triplet id {id} out of range for {len} rows ({which})")]
    TripletIdOutOfRange {
        which: &'static str,
        id: usize,
        len: usize,
    },
    #[error("triplet positive and negative ids are equal ({id})")]
    DegenerateTriplet { id: usize },
    #[error("label at row {row} must be +1 or -1, got {value}")]
    InvalidLabel { row: usize, value: f64 },
    #[error("invalid loss weights: {reason}")]
    InvalidWeights { reason: String },
    #[error("within-modality triplets present but their weight is zero ({which})")]
    UnweightedNeighborhoodTriplets { which: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by dataset validation and batch construction.
#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("dataset is empty for task {task}")]
    EmptyDataset { task: String },
    #[error("dangling {kind} id {id}")]
    DanglingId { kind: &'static str, id: u32 },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },
    #[error("feature dimension mismatch for {kind} {id}: expected {expected}, got {got}")]
    FeatureDim {
        kind: &'static str,
        id: u32,
        expected: usize,
        got: usize,
    },
    #[error("phrase {phrase_id}: no proposal matches its ground-truth box exactly; training requires the ground-truth region among proposals")]
    MissingGtProposal { phrase_id: u32 },
    #[error("shard size must be >= 1")]
    BadShardSize,
    #[error("image-sentence sampling requires at least 2 images, got {images}")]
    TooFewImages { images: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by training configuration and the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter/gradient shape mismatch at index {index}: {params} vs {grads}")]
    GradShape {
        index: usize,
        params: String,
        grads: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("metrics write failed: {0}")]
    Metrics(#[from] std::io::Error),
}

/// Errors raised by evaluation protocols.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("sentence {sentence_id} refers to unknown image {image_id}")]
    DanglingSentence { sentence_id: u32, image_id: u32 },
    #[error("alpha must be in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by manifest, feature-file, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {path}: {source}")]
    MissingFile {
        path: String,
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error in {path}: {reason}")]
    ManifestParse { path: String, reason: String },
    #[error("checksum mismatch for {path}: expected {expected}, got {got}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        got: String,
    },
    #[error("dangling {kind} id {id} in {path}")]
    DanglingId {
        kind: &'static str,
        id: u32,
        path: String,
    },
    #[error("dimension mismatch in {path} for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        path: String,
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("bad file format in {path}: {reason}")]
    BadFormat { path: String, reason: String },
    #[error("unsupported {what} version {got} in {path} (supported: {supported})")]
    Version {
        what: &'static str,
        got: u32,
        path: String,
        supported: u32,
    },
    #[error("invalid synthetic spec: {0}")]
    BadSyntheticSpec(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Errors raised by config parsing and validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config read failed for {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Top-level error for CLI and cross-module workflows.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
