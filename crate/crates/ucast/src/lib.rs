//! Desk-scale probabilistic weather emulation on a synthetic periodic planet.
//!
//! The pipeline: simulate a toy advection-diffusion atmosphere on a lat-lon
//! grid, pre-train a U-Net deterministically on area-weighted MAE, fine-tune
//! it probabilistically on the fair CRPS with Monte Carlo dropout members,
//! optionally deep-ensemble the fine-tuning stage across seeds, roll the
//! resulting checkpoints out autoregressively, and verify the forecasts with
//! area-weighted CRPS/RMSE/spread/SSR and zonal spectra.

pub mod backbone;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod grid;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rollout;
pub mod tape;
pub mod toyatmos;
pub mod verification;

pub use error::{Error, Result};
