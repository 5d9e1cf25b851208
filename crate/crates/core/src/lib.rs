//! Simulation and analytics for a quantum-entropy-backed energy trading stack.
//!
//! The modules mirror the layers of the system:
//!
//! * [`entropy`]: randomness-quality bounds and synthetic QBER traces.
//! * [`qkms`]: the key management service and the Rate-Adapt controller.
//! * [`keypool`]: birth–death analytics of the key pool.
//! * [`netsim`]: deterministic discrete-event network.
//! * [`qsah`]: the symmetric authenticated handshake.
//! * [`porlite`]: VRF-elected probabilistic-finality consensus.
//! * [`market`]: Stackelberg-constrained bilateral clearing.
//! * [`stats`]: confidence intervals and ECDF tooling.

pub mod entropy;
pub mod keypool;
pub mod market;
pub mod netsim;
pub mod porlite;
pub mod qkms;
pub mod qsah;
pub mod rng;
pub mod stats;
