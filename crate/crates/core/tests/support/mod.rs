//! Oracles shared by the regular test files and the acceptance run.
#![allow(dead_code)]

pub mod fd;
pub mod oracles;
