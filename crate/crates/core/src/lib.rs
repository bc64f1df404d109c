#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod linalg;
pub mod grid;
pub mod forward;
pub mod rom;
pub mod internal_wave;
pub mod imaging;
pub mod inversion;
