#![allow(dead_code)]

pub use digitwin_autodiff::gradcheck::{grad_check, random_tensor as random};
