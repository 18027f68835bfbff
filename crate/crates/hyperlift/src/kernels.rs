//! Normalized convolution kernels over the skeleton.
//!
//! The joint-scale kernel is the degree-normalized adjacency with self-loops.
//! The hypergraph kernels normalize joint-by-hyperedge incidence through
//! vertex and hyperedge degrees, with a per-hyperedge weight vector that
//! models keep learnable. Assembly is expressed in tape operations so
//! gradients flow into the weights; the plain constructors run the same
//! assembly on a scratch tape.

use thiserror::Error;

use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{NumericsError, Tensor};
use crate::skeleton::{Scale, Skeleton, SkeletonError};

/// Degrees are clamped here before inverse square roots so degenerate
/// user-supplied skeletons cannot divide by zero.
pub const DEGREE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency must be symmetric; entry ({a},{b}) differs from ({b},{a})")]
    Asymmetric { a: usize, b: usize },
    #[error("matrix entries must be 0 or 1, found {value} at ({row},{col})")]
    NotBinary { value: f64, row: usize, col: usize },
    #[error("adjacency diagonal must be zero, found {value} at joint {joint}")]
    NonzeroDiagonal { value: f64, joint: usize },
    #[error("hyperedge column {col} is empty")]
    EmptyHyperedge { col: usize },
    #[error("joint {joint} belongs to no hyperedge")]
    UncoveredJoint { joint: String },
    #[error("hyperedge weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("expected {expected} hyperedge weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// Λ = D^{-1/2} (A + I) D^{-1/2}: symmetric, spectral radius at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphKernel {
    pub matrix: Tensor,
}

/// G = D_v^{-1/2} H M D_e^{-1} H^T D_v^{-1/2} with diagonal weights M.
/// Positive semidefinite with eigenvalues in [0, 1] when M is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphKernel {
    pub matrix: Tensor,
}

fn check_binary(m: &Tensor) -> Result<(), KernelError> {
    let cols = m.shape()[1];
    for (i, &v) in m.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(KernelError::NotBinary {
                value: v,
                row: i / cols,
                col: i % cols,
            });
        }
    }
    Ok(())
}

/// Build the joint-scale kernel from a symmetric 0/1 adjacency with zero
/// diagonal. An isolated vertex is legal: its self-loop gives degree 1.
pub fn graph_kernel(adjacency: &Tensor) -> Result<GraphKernel, KernelError> {
    let shape = adjacency.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(KernelError::NotSquare {
            rows: *shape.first().unwrap_or(&0),
            cols: *shape.last().unwrap_or(&0),
        });
    }
    let j = shape[0];
    check_binary(adjacency)?;
    for a in 0..j {
        if adjacency.get(&[a, a]) != 0.0 {
            return Err(KernelError::NonzeroDiagonal {
                value: adjacency.get(&[a, a]),
                joint: a,
            });
        }
        for b in (a + 1)..j {
            if adjacency.get(&[a, b]) != adjacency.get(&[b, a]) {
                return Err(KernelError::Asymmetric { a, b });
            }
        }
    }
    let with_loops = adjacency.add(&Tensor::eye(j))?;
    let degrees = with_loops.sum_axes(&[1])?;
    let s = degrees.rsqrt();
    let s_col = s.reshape(&[j, 1])?;
    let matrix = with_loops.mul(&s_col)?.mul(&s)?;
    Ok(GraphKernel { matrix })
}

/// Entries must be 0/1, every hyperedge nonempty, every joint covered.
pub fn validate_incidence(incidence: &Tensor) -> Result<(), KernelError> {
    let shape = incidence.shape();
    if shape.len() != 2 {
        return Err(KernelError::NotSquare {
            rows: *shape.first().unwrap_or(&0),
            cols: *shape.last().unwrap_or(&0),
        });
    }
    check_binary(incidence)?;
    let col_sums = incidence.sum_axes(&[0])?;
    for (col, &s) in col_sums.data().iter().enumerate() {
        if s < 1.0 {
            return Err(KernelError::EmptyHyperedge { col });
        }
    }
    let row_sums = incidence.sum_axes(&[1])?;
    for (joint, &s) in row_sums.data().iter().enumerate() {
        if s < 1.0 {
            return Err(KernelError::UncoveredJoint {
                joint: format!("#{joint}"),
            });
        }
    }
    Ok(())
}

/// Hyperedge degrees: column sums of the incidence matrix.
pub fn hyperedge_degrees(incidence: &Tensor) -> Result<Tensor, KernelError> {
    validate_incidence(incidence)?;
    Ok(incidence.sum_axes(&[0])?)
}

/// Weighted vertex degrees: row sums of H scaled by the hyperedge weights.
pub fn vertex_degrees(incidence: &Tensor, edge_weights: &Tensor) -> Result<Tensor, KernelError> {
    validate_incidence(incidence)?;
    check_weights(incidence, edge_weights)?;
    Ok(incidence.mul(edge_weights)?.sum_axes(&[1])?)
}

fn check_weights(incidence: &Tensor, edge_weights: &Tensor) -> Result<(), KernelError> {
    let e = incidence.shape()[1];
    if edge_weights.shape() != [e] {
        return Err(KernelError::WeightCount {
            expected: e,
            got: edge_weights.len(),
        });
    }
    for (index, &value) in edge_weights.data().iter().enumerate() {
        if value < 0.0 {
            return Err(KernelError::NegativeWeight { index, value });
        }
    }
    Ok(())
}

/// Differentiable kernel assembly: `edge_weights` is a tape variable (shape
/// `[E]`) and the returned J x J kernel depends on it smoothly.
pub fn hypergraph_kernel_var(
    tape: &mut Tape,
    incidence: &Tensor,
    edge_weights: Var,
) -> Result<Var, KernelError> {
    validate_incidence(incidence)?;
    let e = incidence.shape()[1];
    let j = incidence.shape()[0];
    if tape.value(edge_weights).shape() != [e] {
        return Err(KernelError::WeightCount {
            expected: e,
            got: tape.value(edge_weights).len(),
        });
    }
    let inv_edge_deg = incidence.sum_axes(&[0])?.map(|d| 1.0 / d);
    let h = tape.leaf(incidence.clone());
    let h_t = tape.leaf(incidence.transpose_last2()?);
    let inv_de = tape.leaf(inv_edge_deg);

    let weighted_rows = tape.mul(h, edge_weights)?;
    let dv = tape.sum_axes(weighted_rows, &[1])?;
    let dv = tape.clamp_min(dv, DEGREE_FLOOR);
    let s = tape.rsqrt(dv);

    let we = tape.mul(edge_weights, inv_de)?;
    let scaled_cols = tape.mul(h, we)?;
    let core = tape.matmul(scaled_cols, h_t)?;
    let s_col = tape.reshape(s, &[j, 1])?;
    let half = tape.mul(core, s_col)?;
    Ok(tape.mul(half, s)?)
}

/// Plain kernel from explicit nonnegative hyperedge weights. Runs the same
/// assembly as [`hypergraph_kernel_var`] on a scratch tape.
pub fn hypergraph_kernel(
    incidence: &Tensor,
    edge_weights: &Tensor,
) -> Result<HypergraphKernel, KernelError> {
    check_weights(incidence, edge_weights)?;
    let mut tape = Tape::new();
    let w = tape.leaf(edge_weights.clone());
    let g = hypergraph_kernel_var(&mut tape, incidence, w)?;
    Ok(HypergraphKernel {
        matrix: tape.value(g).clone(),
    })
}

/// Skeleton-aware wrapper that names the offending joint in errors.
pub fn hypergraph_kernel_for(
    skeleton: &Skeleton,
    scale: Scale,
    edge_weights: &Tensor,
) -> Result<HypergraphKernel, KernelError> {
    let incidence = skeleton.incidence(scale)?;
    hypergraph_kernel(&incidence.data, edge_weights).map_err(|err| match err {
        KernelError::UncoveredJoint { joint } => {
            let named = joint
                .strip_prefix('#')
                .and_then(|s| s.parse::<usize>().ok())
                .map(|i| skeleton.joint_name(i).to_string())
                .unwrap_or(joint);
            KernelError::UncoveredJoint { joint: named }
        }
        other => other,
    })
}
