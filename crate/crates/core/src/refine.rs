//! Detection embedding refinement through a DynamicSSM block: embeddings are
//! splatted onto a coarse panoramic grid, passed through the block, and read
//! back at their cells.

use ndarray::Array3;

use crate::detection::Detection;
use crate::dynamicssm::{DynamicSsmBlock, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::PanoBox;

pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 16;

fn cell(b: &PanoBox) -> (usize, usize) {
    let r = ((b.cv() * GRID_ROWS as f64) as usize).min(GRID_ROWS - 1);
    let c = ((b.cu() * GRID_COLS as f64) as usize).min(GRID_COLS - 1);
    (r, c)
}

/// Returns copies of `detections` with refined embeddings.
pub fn refine_embeddings(block: &DynamicSsmBlock, detections: &[Detection]) -> Result<Vec<Detection>> {
    let Some(first) = detections.first() else {
        return Ok(Vec::new());
    };
    let c = first.embedding.len();
    if c != block.channels() {
        return Err(Error::input(format!(
            "embedding width {c} does not match block width {}",
            block.channels()
        )));
    }
    let mut grid = Array3::<f64>::zeros((c, GRID_ROWS, GRID_COLS));
    let mut counts = [[0usize; GRID_COLS]; GRID_ROWS];
    for d in detections {
        let (r, col) = cell(&d.bbox);
        counts[r][col] += 1;
        for (k, v) in d.embedding.iter().enumerate() {
            grid[(k, r, col)] += v;
        }
    }
    for ((_, r, col), v) in grid.indexed_iter_mut() {
        if counts[r][col] > 1 {
            *v /= counts[r][col] as f64;
        }
    }
    let out = block.forward(&FeatureMap(grid))?;
    Ok(detections
        .iter()
        .map(|d| {
            let (r, col) = cell(&d.bbox);
            let embedding = (0..c).map(|k| out.0[(k, r, col)]).collect();
            Detection::new(d.bbox, d.score, embedding)
        })
        .collect())
}
