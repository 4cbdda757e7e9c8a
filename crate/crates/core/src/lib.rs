//! Software twin of a LoRaWAN water-quality monitoring network.

pub mod channel;
pub mod control;
pub mod event;
pub mod link;
pub mod lpp;
pub mod node;
pub mod pipeline;
pub mod scenario;
pub mod sim;
pub mod time;
