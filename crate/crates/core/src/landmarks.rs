use crate::error::{Error, Result};

/// A 2-D point in pixel coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered landmark points; index `k` always denotes the same anatomical
/// point within one dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Self {
        LandmarkSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.points.iter().all(|p| {
            p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
        })
    }

    pub fn check_bounds(&self, h: usize, w: usize, op: &'static str) -> Result<()> {
        match self
            .points
            .iter()
            .position(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64))
        {
            None => Ok(()),
            Some(k) => Err(Error::Contract {
                op,
                msg: format!(
                    "landmark {k} at ({:.3}, {:.3}) outside {h}×{w} image",
                    self.points[k].x, self.points[k].y
                ),
            }),
        }
    }

    /// Scales every coordinate about the origin, e.g. to move landmarks
    /// between resolutions under the align-corners convention.
    pub fn scaled(&self, factor: f64) -> Self {
        LandmarkSet::new(
            self.points
                .iter()
                .map(|p| Point::new(p.x * factor, p.y * factor))
                .collect(),
        )
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` of a subset.
    pub fn bounds_of(&self, indices: &[usize]) -> Option<(f64, f64, f64, f64)> {
        let mut it = indices.iter().filter_map(|&i| self.points.get(i));
        let first = it.next()?;
        let init = (first.x, first.y, first.x, first.y);
        Some(it.fold(init, |(x0, y0, x1, y1), p| {
            (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y))
        }))
    }
}
