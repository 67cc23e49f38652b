//! Command-line front end and HTTP service for `chargan-core`.

pub mod service;
