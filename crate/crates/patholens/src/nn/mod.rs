//! Minimal layer-graph engine with manual reverse-mode gradients.
//!
//! Models are static DAGs of [`graph::Op`] nodes over `f64` tensors in NCHW
//! layout. Forward passes can cache every node activation so a backward pass
//! can return the gradient of a logit with respect to any node's output as
//! well as all parameter gradients — the two capabilities the attribution
//! methods and the training loop are built on.

pub mod graph;
pub mod ops;

pub use graph::{Graph, GraphBuilder, NodeId, Op};

use ndarray::{Array2, Array4};

/// Static shape of a node output (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Shape {
    pub fn spatial(self) -> Option<(usize, usize, usize)> {
        match self {
            Shape::Spatial { c, h, w } => Some((c, h, w)),
            Shape::Flat { .. } => None,
        }
    }

    pub fn elements(self) -> usize {
        match self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat { d } => d,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat { d } => write!(f, "{d}"),
        }
    }
}

/// Runtime value of a node: a spatial activation grid or a flat feature
/// vector, batched along the first axis.
#[derive(Debug, Clone)]
pub enum Value {
    Spatial(Array4<f64>),
    Flat(Array2<f64>),
}

impl Value {
    pub fn as_spatial(&self) -> Option<&Array4<f64>> {
        match self {
            Value::Spatial(a) => Some(a),
            Value::Flat(_) => None,
        }
    }

    pub fn as_flat(&self) -> Option<&Array2<f64>> {
        match self {
            Value::Flat(a) => Some(a),
            Value::Spatial(_) => None,
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Spatial(a) => Value::Spatial(Array4::zeros(a.dim())),
            Value::Flat(a) => Value::Flat(Array2::zeros(a.dim())),
        }
    }

    pub fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Spatial(a), Value::Spatial(b)) => *a += b,
            (Value::Flat(a), Value::Flat(b)) => *a += b,
            _ => panic!("value kind mismatch in gradient accumulation"),
        }
    }
}
