// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod activation_io;
pub mod baselines;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod optimizer;
pub mod pipeline;
pub mod probe;
pub mod site;
pub mod synth_task;
pub mod toy_lm;

pub use error::{Error, Result};
pub use numerics::{RngStream, Vector};
pub use site::{Site, SiteKey};
