use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch at {edge}: expected {expected:?}, got {got:?}")]
    Shape {
        edge: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {0} has no convolution cost")]
    NotConv(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
}
