//! Non-transferable teachers, data-free distillation from them, and the
//! adversarial-probing defence that keeps misleading out-of-domain knowledge
//! from reaching the student.

pub mod error;
pub mod csvio;
pub mod domains;
pub mod numerics;
pub mod ntl;
pub mod dfkd;
pub mod atesc;
pub mod evalcli;

pub use error::{Error, Result};
