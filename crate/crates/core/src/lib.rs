pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod builder;
pub mod cost;
pub mod deploy;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod params;
pub mod replacement;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;
