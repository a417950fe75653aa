//! Storage needed to represent one target speaker's style.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// kNN-VC stores every target feature frame.
pub const KNN_FRAME_RATE: f64 = 50.0;
pub const KNN_FEATURE_DIM: f64 = 1024.0;
pub const STYLEBOOK_ENTRIES: f64 = 128.0;
pub const STYLEBOOK_DIM: f64 = 64.0;
const F32_BYTES: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Yourtts,
    Freevc,
    Diffvc,
    Proposed,
    Knnvc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Yourtts,
        Method::Freevc,
        Method::Diffvc,
        Method::Proposed,
        Method::Knnvc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Yourtts => "yourtts",
            Method::Freevc => "freevc",
            Method::Diffvc => "diffvc",
            Method::Proposed => "proposed",
            Method::Knnvc => "knnvc",
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

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// KiB of style storage for `target_seconds` of target speech.
pub fn memory_model(method: Method, target_seconds: f64) -> Result<f64> {
    if !(target_seconds > 0.0 && target_seconds.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target length {target_seconds} s must be positive"
        )));
    }
    Ok(match method {
        Method::Yourtts => 2.0,
        Method::Freevc => 1.0,
        Method::Diffvc => 1.5,
        Method::Proposed => STYLEBOOK_ENTRIES * STYLEBOOK_DIM * F32_BYTES / 1024.0,
        Method::Knnvc => target_seconds * KNN_FRAME_RATE * KNN_FEATURE_DIM * F32_BYTES / 1024.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub method: Method,
    pub seconds: f64,
    pub kib: f64,
}

/// Every method at every requested target length.
pub fn memory_table(seconds: &[f64]) -> Result<Vec<MemoryRow>> {
    let mut rows = Vec::with_capacity(seconds.len() * Method::ALL.len());
    for m in Method::ALL {
        for &s in seconds {
            rows.push(MemoryRow {
                method: m,
                seconds: s,
                kib: memory_model(m, s)?,
            });
        }
    }
    Ok(rows)
}
