//! MQTT 3.1.1 subset: QoS 0/1 packet codec, topic matching, an embedded
//! broker and a client.

pub mod broker;
pub mod client;
pub mod packet;
pub mod topic;

pub use broker::{serve, serve_listener, Broker, BrokerConfig, BrokerServer};
pub use client::{ClientError, ClientOptions, DeliveryToken, MqttClient};
pub use packet::{decode_packet, decode_remaining_length, encode_remaining_length, MqttPacket, PacketError, Publish, QoS, SubackCode};
pub use topic::{topic_matches, TopicFilter};
