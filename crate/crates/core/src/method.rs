use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The six joint-embedding methods expressed in the unified pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimClr,
    Byol,
    MocoV2,
    Swav,
    Dino,
    MocoV3,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::SimClr, Method::Byol, Method::MocoV2, Method::Swav, Method::Dino, Method::MocoV3];

    pub fn name(self) -> &'static str {
        match self {
            Method::SimClr => "simclr",
            Method::Byol => "byol",
            Method::MocoV2 => "mocov2",
            Method::Swav => "swav",
            Method::Dino => "dino",
            Method::MocoV3 => "mocov3",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method preset `{s}`")))
    }
}
