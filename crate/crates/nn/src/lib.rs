//! A small reverse-mode autodiff engine: `f64` tensors, a dynamic tape,
//! convolution/pooling kernels, common layers and the Adam optimiser.
//!
//! ```
//! use sf_nn::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grads = tape.backward(loss);
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

// `Var` ops take tape-bound operands by value; they are not the std operator traits.
#![allow(clippy::should_implement_trait, clippy::too_many_arguments)]

pub mod error;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear};
pub use optim::{Adam, AdamConfig, ReduceLrOnPlateau};
pub use param::{Module, Param};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Deterministic generator used for every seeded operation in the workspace.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
