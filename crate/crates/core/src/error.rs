use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("mel band exceeds Nyquist: f_max {f_max} Hz > {nyquist} Hz")]
    MelBandExceedsNyquist { f_max: f64, nyquist: f64 },
    #[error("cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz")]
    CutoffOutOfRange { cutoff: f64, nyquist: f64 },
    #[error("expected {expected} Hz audio, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("conditioning shape mismatch: {0}")]
    ConditioningShapeMismatch(String),
    #[error("conditioning bins ≠ 80: got {0}")]
    ConditioningBins(usize),
    #[error("mel too short for MMD: {frames} frames < 8")]
    MelTooShortForMmd { frames: usize },
    #[error("waveform too short: {len} samples, need at least {min}")]
    WaveformTooShort { len: usize, min: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("SNR undefined for silent signal")]
    SilentSignal,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unmatched pair files: {0:?}")]
    OrphanIds(Vec<String>),
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("value {value} outside [{low}, {high}] for {what}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("task score requires all four metrics (missing: {0:?})")]
    MissingMetric(Vec<&'static str>),
    #[error("discriminator output structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("missing discriminator outputs for {0}")]
    MissingDiscriminator(&'static str),
    #[error("missing WVN checkpoint while WVN conditioning is enabled")]
    MissingWvn,
    #[error("parameter {0} not found")]
    UnknownParam(String),
}
