use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite hidden state at layer {layer}, timestep {timestep}, row {row}")]
    NonFiniteHidden {
        layer: usize,
        timestep: usize,
        row: usize,
    },

    #[error("layer norm input has degenerate variance {variance:e} (layer {layer}, timestep {timestep})")]
    DegenerateLayerNorm {
        variance: f64,
        layer: usize,
        timestep: usize,
    },

    #[error("sequence of {tokens} tokens exceeds {positions} position embeddings")]
    SequenceTooLong { tokens: usize, positions: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Compile(#[from] CompileError),

    #[error("config error: {0}")]
    Config(String),

    #[error("probe training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Raised while lowering RAW operations to transformer weights.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("op {op}: range {range} [{start}, {end}) exceeds the {limit} program rows")]
    RangeOverflow {
        op: usize,
        range: &'static str,
        start: usize,
        end: usize,
        limit: usize,
    },

    #[error("layout needs {needed} hidden rows but only {available} are configured")]
    ScratchOverflow { needed: usize, available: usize },

    #[error("op {op}: matrix {matrix} has shape {got}, expected {expected}")]
    Shape {
        op: usize,
        matrix: &'static str,
        expected: String,
        got: String,
    },

    #[error("op {op}: timestep map {map} can be empty but the imaginary timestep is disabled")]
    EmptyAttention { op: usize, map: String },

    #[error("fused ops use different timestep maps: {0}")]
    MixedTimestepMaps(String),

    #[error("fused ops conflict: {}", .conflicts.iter().map(|(a, b)| format!("({a}, {b})")).collect::<Vec<_>>().join(", "))]
    Overlap { conflicts: Vec<(usize, usize)> },

    #[error("a division layer cannot share a layer with multiplication ops")]
    DivisionWithMul,

    #[error("layer {layer}: {reason}")]
    InvalidProgram { layer: usize, reason: String },

    #[error("lambda {lambda} is below the division floor {floor}")]
    BelowDivisionFloor { lambda: f64, floor: f64 },

    #[error("unsupported format version {0}")]
    Format(u32),
}
