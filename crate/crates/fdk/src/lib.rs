//! IO formats, the pipelined rank-grid executor, and report plumbing for
//! the cone-beam reconstruction engine. The numeric kernels live in
//! `fdk-core`; this crate is everything that needs an operating system.

pub mod io;
pub mod pipeline;
pub mod report;
