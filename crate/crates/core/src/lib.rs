pub mod fxp;
pub mod ir;
pub mod cmvm;
pub mod kernels;
pub mod passes;
pub mod frontend;
pub mod perf;
pub mod codegen;
pub mod cli;
pub mod zoo;
