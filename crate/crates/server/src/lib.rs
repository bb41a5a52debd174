//! HTTP front end for guided annotation sessions.
//!
//! Each endpoint is a thin adapter over one core operation; see [`routes::router`].

pub mod config;
pub mod error;
pub mod routes;
pub mod state;

pub use error::ApiError;
pub use routes::{router, AppState};
pub use state::{Services, SessionIds};
