//! Dense reverse-mode automatic differentiation for small networks.
//!
//! Values are 2-D `f64` [`Tensor`]s. A forward pass records each operation
//! on a [`Tape`]; [`Tape::backward`] replays the record in reverse and
//! accumulates parameter gradients into a [`Gradients`] buffer aligned with
//! the [`ParamSet`] the parameters were read from.
//!
//! ```
//! use magec_autodiff::{ParamSet, Tape, Tensor};
//!
//! let mut params = ParamSet::new();
//! let w = params.insert("w", Tensor::from_vec(2, 1, vec![0.5, -1.0]).unwrap());
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::row(&[2.0, 3.0]));
//! let wv = tape.param(&params, w);
//! let y = tape.matmul(x, wv).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let mut grads = params.zero_grads();
//! tape.backward(loss, &mut grads).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 3.0]);
//! ```

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("every entry of row {row} is masked out")]
    AllMasked { row: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable was not recorded on this tape")]
    ForeignVar,
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}
