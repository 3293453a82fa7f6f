//! Interactive segmentation service.
//!
//! [`SessionManager`] holds the per-image state (cached features, click
//! history, current mask) and is usable without HTTP; [`router`] exposes it
//! over the JSON API.

mod http;
mod latency;
mod session;

pub use http::{router, AppState};
pub use latency::{LatencyHistogram, LATENCY_BUCKETS_MS};
pub use session::{
    ClickOutcome, Export, ServiceConfig, ServiceError, SessionInfo, SessionManager, ServiceMetrics,
};
