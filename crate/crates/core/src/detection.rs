use serde::{Deserialize, Serialize};

use crate::geometry::PanoBox;

/// One detector output for a frame: box, confidence and appearance embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: PanoBox,
    pub score: f64,
    pub embedding: Vec<f64>,
}

impl Detection {
    pub fn new(bbox: PanoBox, score: f64, embedding: Vec<f64>) -> Self {
        Self {
            bbox,
            score,
            embedding,
        }
    }
}
