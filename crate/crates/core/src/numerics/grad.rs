use std::fmt;
use std::str::FromStr;

use super::{ops, Tensor};
use crate::error::{Error, Result};

/// The fixed set of differentiable operations used by the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffOp {
    Matmul,
    MatmulNt,
    SoftmaxRows,
    Add,
    Mul,
    AddRow,
    Silu,
    Mse,
    AvgPool { grid: (usize, usize), factor: usize },
    UpsampleNearest { grid: (usize, usize), factor: usize },
}

impl DiffOp {
    pub fn arity(self) -> usize {
        match self {
            DiffOp::SoftmaxRows | DiffOp::Silu | DiffOp::AvgPool { .. } | DiffOp::UpsampleNearest { .. } => 1,
            _ => 2,
        }
    }

    pub fn forward(self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs)?;
        match self {
            DiffOp::Matmul => ops::matmul(inputs[0], inputs[1]),
            DiffOp::MatmulNt => ops::matmul_nt(inputs[0], inputs[1]),
            DiffOp::SoftmaxRows => ops::softmax_rows(inputs[0]),
            DiffOp::Add => ops::add(inputs[0], inputs[1]),
            DiffOp::Mul => ops::mul(inputs[0], inputs[1]),
            DiffOp::AddRow => ops::add_row(inputs[0], inputs[1]),
            DiffOp::Silu => Ok(ops::silu(inputs[0])),
            DiffOp::Mse => ops::mse(inputs[0], inputs[1]),
            DiffOp::AvgPool { grid, factor } => ops::avg_pool(inputs[0], grid, factor),
            DiffOp::UpsampleNearest { grid, factor } => ops::upsample_nearest(inputs[0], grid, factor),
        }
    }

    fn check_arity(self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(Error::config(format!(
                "{self} takes {} inputs, got {}",
                self.arity(),
                inputs.len()
            )));
        }
        Ok(())
    }
}

/// Gradient of `⟨upstream, op(inputs)⟩` with respect to each input.
pub fn grad(op: DiffOp, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    op.check_arity(inputs)?;
    let pair = |(a, b): (Tensor, Tensor)| vec![a, b];
    Ok(match op {
        DiffOp::Matmul => pair(ops::matmul_backward(inputs[0], inputs[1], upstream)?),
        DiffOp::MatmulNt => pair(ops::matmul_nt_backward(inputs[0], inputs[1], upstream)?),
        DiffOp::SoftmaxRows => {
            let probs = ops::softmax_rows(inputs[0])?;
            vec![ops::softmax_rows_backward(&probs, upstream)?]
        }
        DiffOp::Add => {
            inputs[0].ensure_same_shape(upstream, "add_backward")?;
            vec![upstream.clone(), upstream.clone()]
        }
        DiffOp::Mul => pair(ops::mul_backward(inputs[0], inputs[1], upstream)?),
        DiffOp::AddRow => {
            inputs[0].ensure_same_shape(upstream, "add_row_backward")?;
            let db = ops::add_row_backward(upstream)?.reshape(inputs[1].shape())?;
            vec![upstream.clone(), db]
        }
        DiffOp::Silu => vec![ops::silu_backward(inputs[0], upstream)?],
        DiffOp::Mse => {
            if upstream.len() != 1 {
                return Err(Error::shape("mse_backward", upstream.shape(), &[1]));
            }
            pair(ops::mse_backward(inputs[0], inputs[1], upstream.data()[0])?)
        }
        DiffOp::AvgPool { grid, factor } => vec![ops::avg_pool_backward(upstream, grid, factor)?],
        DiffOp::UpsampleNearest { grid, factor } => {
            vec![ops::upsample_nearest_backward(upstream, grid, factor)?]
        }
    })
}

impl fmt::Display for DiffOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DiffOp::Matmul => "matmul",
            DiffOp::MatmulNt => "matmul_nt",
            DiffOp::SoftmaxRows => "softmax_rows",
            DiffOp::Add => "add",
            DiffOp::Mul => "mul",
            DiffOp::AddRow => "add_row",
            DiffOp::Silu => "silu",
            DiffOp::Mse => "mse",
            DiffOp::AvgPool { .. } => "avg_pool",
            DiffOp::UpsampleNearest { .. } => "upsample_nearest",
        };
        f.write_str(name)
    }
}

/// Parses an op id. Pooling ops parse with a 2×2 grid and factor 2.
impl FromStr for DiffOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let grid = (2, 2);
        Ok(match s {
            "matmul" => DiffOp::Matmul,
            "matmul_nt" => DiffOp::MatmulNt,
            "softmax_rows" => DiffOp::SoftmaxRows,
            "add" => DiffOp::Add,
            "mul" => DiffOp::Mul,
            "add_row" => DiffOp::AddRow,
            "silu" => DiffOp::Silu,
            "mse" => DiffOp::Mse,
            "avg_pool" => DiffOp::AvgPool { grid, factor: 2 },
            "upsample_nearest" => DiffOp::UpsampleNearest { grid, factor: 2 },
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}
