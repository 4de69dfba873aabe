// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which intra-layer activation a hidden state comes from.
///
/// `Attn` is the attention block output before the residual add, `Mlp` the
/// feed-forward output before the residual add, `IntLayer` the post-residual
/// layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    Attn = 0,
    Mlp = 1,
    IntLayer = 2,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Attn, Site::Mlp, Site::IntLayer];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Site> {
        match code {
            0 => Some(Site::Attn),
            1 => Some(Site::Mlp),
            2 => Some(Site::IntLayer),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Attn => "ATTN",
            Site::Mlp => "MLP",
            Site::IntLayer => "INT_LAYER",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ATTN" => Ok(Site::Attn),
            "MLP" => Ok(Site::Mlp),
            "INT_LAYER" | "INT" => Ok(Site::IntLayer),
            other => Err(Error::InvalidArgument(format!("unknown site {other:?}"))),
        }
    }
}

/// A (layer, site) intervention point.
pub type SiteKey = (usize, Site);
