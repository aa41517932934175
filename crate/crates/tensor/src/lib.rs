//! Minimal dense `f64` tensors with a reverse-mode differentiation tape,
//! named parameter stores with a binary checkpoint format, and Adam.
//!
//! ```
//! use xsrl_tensor::{Params, Tape, Tensor};
//!
//! let params = Params::new();
//! let mut tape = Tape::new(&params);
//! let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
//! let y = tape.sigmoid(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[0.25]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use params::{ParamId, Params, CHECKPOINT_MAGIC};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Axis, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
