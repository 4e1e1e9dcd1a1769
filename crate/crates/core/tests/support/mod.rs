#![allow(dead_code)]

pub mod contracts;
pub mod ct_oracle;
pub mod grad_suite;
pub mod metric_oracles;
pub mod nnclr_oracles;
