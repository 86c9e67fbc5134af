//! Emulated quantum-link layer with a key management, key forwarding and
//! software-defined control plane on top.
pub mod audit;
pub mod controller;
pub mod forwarding;
pub mod harness;
pub mod ids;
pub mod kms;
pub mod linksim;
pub mod network;
pub mod scenario;
pub mod settings;
pub mod time;
pub mod topology;
pub mod wire;
