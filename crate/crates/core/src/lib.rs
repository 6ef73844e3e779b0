// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod evalmetrics;
pub mod losses;
pub mod models;
pub mod nncore;
pub mod synthcohort;
pub mod trainer;
pub mod volumes;
