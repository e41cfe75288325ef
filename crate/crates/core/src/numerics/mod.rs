//! Dense numeric kernels, the Adam optimizer and a finite-difference
//! gradient checker.
//!
//! Every trainable module in the crate implements its backward pass in closed
//! form on top of these kernels, and every loss is validated with
//! [`grad_check`].

mod gradcheck;
pub mod ops;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_TOLERANCE};
pub use ops::{cosine_sim, softmax};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Parameter, Tensor};

use sha2::{Digest, Sha256};

/// SHA-256 over the little-endian bytes of every parameter value, in order.
pub fn hash_params<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        for s in p.value.shape() {
            h.update((*s as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Running sum of multiply-accumulate operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount(pub u64);

impl MacCount {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }
}
