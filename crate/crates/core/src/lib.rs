//! Secure and reliable oblivious memory: a Ring ORAM controller with an
//! integrity tree over bucket metadata, compact on-chip/off-chip valid bit
//! subtrees, cross-channel replication and ECP-based stuck-at repair,
//! simulated over a fault-injecting DRAM model.

pub mod block;
pub mod codec;
pub mod crypto;
pub mod dram;
pub mod ecp;
pub mod must;
pub mod oram;
pub mod replication;
pub mod rit;
pub mod sim;
pub mod stats;
