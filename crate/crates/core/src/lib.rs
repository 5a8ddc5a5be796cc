#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod autodiff;
pub mod error;
pub mod kernel;
pub mod layer;
pub mod model;
pub mod sghmc;
pub mod mcem;
pub mod dsvi;
pub mod diagnostics;
