//! Decision-region lattices for plotting.

use crate::csvio::{self, CsvTable};
use crate::domains::BoundingBox;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, MlpModel};

pub const GRID_HEADER: [&str; 3] = ["x", "y", "pred"];

/// Lattice points in row-major order, y outer and x inner.
pub fn lattice(bbox: &BoundingBox, resolution: usize) -> Result<DenseMatrix> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be ≥ 2".into()));
    }
    if !(bbox.max_x > bbox.min_x && bbox.max_y > bbox.min_y) {
        return Err(Error::InvalidArgument(format!("degenerate bounding box {bbox:?}")));
    }
    let step = |lo: f64, hi: f64, i: usize| {
        if i == resolution - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(resolution * resolution * 2);
    for j in 0..resolution {
        let y = step(bbox.min_y, bbox.max_y, j);
        for i in 0..resolution {
            data.push(step(bbox.min_x, bbox.max_x, i));
            data.push(y);
        }
    }
    DenseMatrix::from_vec(resolution * resolution, 2, data)
}

pub fn export_decision_grid(model: &MlpModel, bbox: &BoundingBox, resolution: usize) -> Result<String> {
    let pts = lattice(bbox, resolution)?;
    let pred = model.predict(&pts)?;
    let mut t = CsvTable::new(&GRID_HEADER);
    for (p, c) in pts.iter_rows().zip(pred) {
        t.push(vec![csvio::coord(p[0]), csvio::coord(p[1]), c.to_string()]);
    }
    Ok(t.render())
}
