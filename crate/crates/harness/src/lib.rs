//! Benchmark runner around `gozone-core`: a chat-completion client, the
//! two-turn protocol runner, offline replay, the blind review service and the
//! `gozone` command line.

pub mod cli;
pub mod config;
pub mod endpoint;
pub mod orchestrator;
pub mod review;
pub mod review_api;
pub mod stub;

/// Current UTC time as an RFC 3339 string with millisecond precision.
pub(crate) fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
