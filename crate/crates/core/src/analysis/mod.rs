//! Complexity accounting, gradient checking and kernel inspection.

pub mod complexity;
pub mod dump;
pub mod gradcheck;
