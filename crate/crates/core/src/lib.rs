//! Loss-tolerant transport for many-to-one gradient synchronization.
//!
//! Workers push gradients to a parameter server over datagrams. The receiver
//! may close a flow before every segment has arrived, once enough of it is in
//! and a time bound has passed; missing segments become zeros, which the
//! aggregation treats as dropped gradients. Broadcasts back to the workers are
//! fully reliable.
//!
//! Layers, bottom up: [`wire`] (packet codec), [`congestion`] (BDP cap and
//! pacing), [`sender`] / [`receiver`] (per-flow state machines), [`endpoint`]
//! (a node hosting many flows), [`channel`] (simulated and UDP transports),
//! [`cluster`] (drivers that connect endpoints through a channel) and [`sync`]
//! (gather/broadcast rounds and the training loop).

// Whole-buffer ranges such as `[0..len]` are meant as one-element lists.
#![allow(clippy::single_range_in_vec_init)]

pub mod channel;
pub mod cluster;
pub mod congestion;
pub mod endpoint;
pub mod receiver;
pub mod sender;
pub mod sync;
pub mod time;
pub mod wire;

pub use time::Timestamp;
