//! Command-line front end for `latent-ct`: configuration, run manifests,
//! the `simulate`/`train`/`reconstruct`/`evaluate`/`sweep` commands and the
//! experiment grids behind them.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod manifest;
