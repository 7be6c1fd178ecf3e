#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod autodiff;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scm;
pub mod tensor;
pub mod trainer;
