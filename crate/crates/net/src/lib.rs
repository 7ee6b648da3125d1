//! Delivery services and the streaming client.

pub mod cache;
pub mod client;
pub mod http;
pub mod license;
pub mod origin;
pub mod schedule;
