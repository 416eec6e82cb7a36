//! Minimal dense tensor engine with a reverse-mode gradient tape.
//!
//! Spatial maps are channels-last `[height, width, channels]`, convolution
//! kernels are `[k, k, c_in, c_out]` and every value is `f64`.
//!
//! ```
//! use humansense_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Record, Tape, Var};
pub use tensor::{neumaier_sum, Tensor};
