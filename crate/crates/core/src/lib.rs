//! Acoustic probing and passive imaging of tree-shaped gas pipe networks.

pub mod dsp;
pub mod imaging;
pub mod network;
pub mod protocol;
pub mod reflectometry;
pub mod sim;
pub mod trace;
