//! Reference numerics for the serial, parallel and composite adapter forwards.
//! Dense row-vector times matrix products, no biases.

use super::Topology;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForwardError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("topology {0:?} has no projection branches")]
    NoBranches(Topology),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ForwardError> {
        if data.len() != rows * cols {
            return Err(ForwardError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, ForwardError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ForwardError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `x · self` for a row vector `x`.
    fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (xk, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xk * w;
            }
        }
        out
    }
}

/// One down-projection (D x d) followed by one up-projection (d x D).
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub down: Matrix,
    pub up: Matrix,
}

impl Branch {
    pub fn new(down: Matrix, up: Matrix) -> Result<Self, ForwardError> {
        if down.cols != up.rows || down.rows != up.cols {
            return Err(ForwardError::ShapeMismatch(format!(
                "down {}x{} incompatible with up {}x{}",
                down.rows, down.cols, up.rows, up.cols
            )));
        }
        Ok(Self { down, up })
    }

    pub fn width(&self) -> usize {
        self.down.rows
    }

    /// `ReLU(input · down) · up`
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>, ForwardError> {
        if input.len() != self.width() {
            return Err(ForwardError::ShapeMismatch(format!(
                "input length {} for branch width {}",
                input.len(),
                self.width()
            )));
        }
        let hidden: Vec<f64> = self.down.left_mul(input).into_iter().map(|v| v.max(0.0)).collect();
        Ok(self.up.left_mul(&hidden))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterWeights {
    /// One projection pair; a SAPA forward reuses it on both branches.
    Shared(Branch),
    Split { serial: Branch, parallel: Branch },
}

impl AdapterWeights {
    fn serial(&self) -> &Branch {
        match self {
            AdapterWeights::Shared(b) => b,
            AdapterWeights::Split { serial, .. } => serial,
        }
    }

    fn parallel(&self) -> &Branch {
        match self {
            AdapterWeights::Shared(b) => b,
            AdapterWeights::Split { parallel, .. } => parallel,
        }
    }
}

/// Adapter output for layer input `x` and wrapped-layer output `fx`.
pub fn adapter_forward(
    topology: Topology,
    x: &[f64],
    fx: &[f64],
    weights: &AdapterWeights,
) -> Result<Vec<f64>, ForwardError> {
    if x.len() != fx.len() {
        return Err(ForwardError::ShapeMismatch(format!(
            "x has length {}, F(x) has length {}",
            x.len(),
            fx.len()
        )));
    }
    match topology {
        Topology::SA => weights.serial().apply(fx),
        Topology::PA => weights.parallel().apply(x),
        Topology::SAPA => {
            let s = weights.serial().apply(fx)?;
            let p = weights.parallel().apply(x)?;
            Ok(s.into_iter().zip(p).map(|(a, b)| a + b).collect())
        }
        Topology::None => Err(ForwardError::NoBranches(topology)),
    }
}

/// Affine-LN: elementwise `scale * x + shift`.
pub fn affine_forward(x: &[f64], scale: &[f64], shift: &[f64]) -> Result<Vec<f64>, ForwardError> {
    if scale.len() != x.len() || shift.len() != x.len() {
        return Err(ForwardError::ShapeMismatch("affine vectors differ in length".into()));
    }
    Ok(x.iter().zip(scale).zip(shift).map(|((v, a), b)| a * v + b).collect())
}
