//! Multiprotocol IoT gateway: three simulated wireless transports in, one
//! standardized JSON reading format out over MQTT.

pub mod clock;
pub mod gateway;
pub mod model;
pub mod mqtt;
pub mod normalize;
pub mod sensors;
pub mod sim;
pub mod transport;
