use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which second-order Melnikov family a divisor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MelnikovSign {
    Plus,
    Minus,
}

/// A violated small-divisor condition, with enough data to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelnikovWitness {
    pub ell: Vec<i32>,
    pub j: i64,
    pub k: i64,
    pub sign: Option<MelnikovSign>,
    pub divisor: f64,
    pub threshold: f64,
    pub level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KamError {
    #[error("diophantine condition fails at ell = {ell:?} (|omega.ell| = {value:e})")]
    DiophantineViolation { ell: Vec<i32>, value: f64 },
    #[error("zero-mean precondition fails: |mean| = {mean:e} > {tol:e}")]
    NonzeroMean { mean: f64, tol: f64 },
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("square root domain: xi + y = {value:e} at site {site}")]
    SqrtDomain { site: i64, value: f64 },
    #[error("alias overflow: dropped-mode energy ratio {ratio:e}")]
    AliasOverflow { ratio: f64 },
    #[error("chart singular: condition number {cond:e}")]
    ChartSingular { cond: f64 },
    #[error("structure violation in {what}: residual {residual:e}")]
    StructureViolation { what: String, residual: f64 },
    #[error("exponential series did not converge at order {order} (tail {tail:e})")]
    ExpDivergence { order: usize, tail: f64 },
    #[error("second Melnikov condition violated: {0:?}")]
    MelnikovViolation(Box<MelnikovWitness>),
    #[error("first Melnikov condition violated: {0:?}")]
    FirstMelnikovViolation(Box<MelnikovWitness>),
    #[error("KAM contraction failure at step {step}: measured {measured:e}, bound {bound:e}")]
    ContractionFailure { step: usize, measured: f64, bound: f64 },
    #[error("KAM ladder hit max_steps = {steps} with remainder {remainder:e}")]
    MaxSteps { steps: usize, remainder: f64 },
    #[error("averaged matrix singular or ill conditioned (cond {cond:e})")]
    MbarSingular { cond: f64 },
    #[error("smallness gate: value {value:e} >= threshold {threshold:e}")]
    SmallnessGate { value: f64, threshold: f64 },
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl KamError {
    /// True for failures meaning the frequency lies outside the admissible set.
    pub fn is_exclusion(&self) -> bool {
        matches!(
            self,
            KamError::DiophantineViolation { .. }
                | KamError::MelnikovViolation(_)
                | KamError::FirstMelnikovViolation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, KamError>;
