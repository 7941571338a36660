pub mod config;
pub mod fault;
pub mod id;
pub mod net;
pub mod node;
pub mod relay;
pub mod sim;
pub mod wire;
