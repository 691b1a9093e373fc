// SPDX-License-Identifier: Apache-2.0
//! Quantum circuits with quantum control of causal order, their extensions to
//! causal boxes on timestamped Fock spaces, and numerical checks for every
//! construction along the way.

pub mod causalbox;
pub mod error;
pub mod extension;
pub mod finegraining;
pub mod fock;
pub mod linalg;
pub mod qcqc;
pub mod sampling;
pub mod scenarios;

pub use error::{QcError, Result};
