use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::IGNORE_LABEL;

pub const ROAD: u8 = 0;
pub const TRAFFIC_LANE: u8 = 1;
pub const MANHOLE: u8 = 2;

/// Ordered semantic classes with dense ids `0..len` plus a distinct ignore id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticClassSet {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub ignore: u8,
}

impl Default for SemanticClassSet {
    fn default() -> Self {
        Self {
            names: vec!["road".into(), "traffic_lane".into(), "manhole".into()],
            palette: vec![[128, 64, 128], [255, 255, 255], [255, 140, 0]],
            ignore: IGNORE_LABEL,
        }
    }
}

impl SemanticClassSet {
    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.names.len() > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "class set needs between 1 and 255 classes, got {}",
                self.names.len()
            )));
        }
        if (self.ignore as usize) < self.names.len() {
            return Err(Error::Config(format!(
                "ignore id {} collides with a class id",
                self.ignore
            )));
        }
        if self.palette.len() != self.names.len() {
            return Err(Error::Config("palette must have one color per class".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.names.len()
    }
}
