pub mod attacks;
pub mod autodiff;
pub mod dataio;
pub mod fedsim;
pub mod harness;
pub mod mia;
pub mod nnmodel;
