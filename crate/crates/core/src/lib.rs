//! Recovering and forecasting BLE connection hopping from passive
//! single-channel captures.

pub mod csa;
pub mod predict;
pub mod reconstruct;
pub mod simulator;
pub mod trace;

pub use csa::{
    AccessAddress, ChannelIdentifier, ChannelMap, ConnInterval, ConnectionParams, EventCounter,
    Hopping, ParamError,
};
pub use predict::{
    EvalReport, Forecast, ForecastEntry, HopModel, KalmanConfig, PredictError, SyncState,
};
pub use reconstruct::{EstimateError, EstimationReport, EstimatorConfig, Reconstruction};
pub use simulator::{ImpairmentModel, ScenarioConfig, SimError, Simulation};
pub use trace::{EventTimeline, Nanos, Observation, SniffTrace, TraceError, TraceFormat};
