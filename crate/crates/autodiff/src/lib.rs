//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations used in the forward pass, so gradients can themselves be
//! differentiated (`grad(.., create_graph = true)`). This is what makes
//! gradient-penalty objectives computable.
//!
//! ```
//! use stepback_autodiff::{grad, Var};
//! use ndarray::arr1;
//!
//! let x = Var::parameter(arr1(&[2.0]).into_dyn());
//! let y = x.mul(&x).mul(&x).sum_all();
//! let dy = grad(&y, &[x.clone()], true).remove(0);
//! let d2y = grad(&dy.sum_all(), &[x.clone()], false).remove(0);
//! assert_eq!(dy.item_at(0), 12.0);
//! assert_eq!(d2y.item_at(0), 12.0);
//! ```

mod conv;
pub mod gradcheck;
mod graph;
mod ops;

pub use conv::ConvGeometry;
pub use graph::{grad, grad_with_seed, is_grad_enabled, no_grad, NoGradGuard, Var};

pub type Tensor = ndarray::ArrayD<f64>;
