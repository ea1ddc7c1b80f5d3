//! Dense arrays, reverse-mode differentiation, and optimization.

mod array;
mod graph;
mod optim;

pub use array::{matmul, Array};
pub(crate) use array::gemm;
pub use graph::{BatchStats, Graph, KeyMask, Var, NORM_EPS};
pub use optim::{lr_schedule, AdamW, AdamWConfig, LrSchedule};

#[cfg(test)]
pub(crate) use graph::sigmoid;
