//! Fixtures, reference implementations and scenarios shared by the
//! integration tests and the acceptance suite.

pub mod checks;
pub mod desk;
pub mod oracle;
pub mod tiny;

pub use tiny::{grad_check_path, grad_check_path_at, tiny_batch, LossPath};
