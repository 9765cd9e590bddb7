#![allow(dead_code)]
//! Brute-force reference implementations shared by the oracle tests and the acceptance run.

pub mod attention;
pub mod oda;
