use serde::{Deserialize, Serialize};

use super::{Scene, WorldError};
use crate::geometry::{point_segment_distance, Point};

/// occupancy, lane-center, boundary, crossing
pub const CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell edge in meters.
    pub resolution: f64,
    /// Half-width of the square window around the ego.
    pub extent: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            extent: 16.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self, ego_size: [f64; 2]) -> Result<usize, WorldError> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(WorldError::Config(format!("resolution {} must be positive", self.resolution)));
        }
        let half_ego = 0.5 * ego_size[0].hypot(ego_size[1]);
        if self.extent.is_nan() || self.extent < half_ego {
            return Err(WorldError::Config(format!(
                "extent {} does not cover the ego box",
                self.extent
            )));
        }
        let n = 2.0 * self.extent / self.resolution;
        let cells = n.round();
        if (n - cells).abs() > 1e-9 * n.max(1.0) || cells < 1.0 {
            return Err(WorldError::Config(format!(
                "2 * extent / resolution = {n} is not a whole number of cells"
            )));
        }
        Ok(cells as usize)
    }

    /// Center of cell `i` along either axis.
    pub fn center(&self, i: usize) -> f64 {
        -self.extent + (i as f64 + 0.5) * self.resolution
    }
}

/// Multi-channel BEV raster, row-major `[row][col][channel]`.
/// Rows run along x, columns along y.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub size: usize,
    pub cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.cells[(row * self.size + col) * CHANNELS + channel]
    }

    fn set(&mut self, row: usize, col: usize, channel: usize) {
        self.cells[(row * self.size + col) * CHANNELS + channel] = 1.0;
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        [self.spec.center(row), self.spec.center(col)]
    }

    /// Index range of cells whose centers may fall in `[lo, hi]`, padded by
    /// one cell so rounding never drops a boundary cell.
    fn span(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let r = self.spec.resolution;
        let a = ((lo + self.spec.extent) / r - 0.5).ceil() - 1.0;
        let b = ((hi + self.spec.extent) / r - 0.5).floor() + 1.0;
        let (a, b) = (a.max(0.0), b.min(self.size as f64 - 1.0));
        if a > b {
            None
        } else {
            Some((a as usize, b as usize))
        }
    }
}

/// Rasterizes agents at t = 0 and map polylines. A cell is occupied when its
/// center lies inside (or on) an agent box; a map channel is set when the
/// center is within half a cell of the polyline.
pub fn rasterize_bev(scene: &Scene, spec: &GridSpec) -> Result<OccupancyGrid, WorldError> {
    let size = spec.validate(scene.ego.size)?;
    let mut grid = OccupancyGrid {
        spec: *spec,
        size,
        cells: vec![0.0; size * size * CHANNELS],
    };
    for a in &scene.agents {
        let rect = a.rect_at(0);
        let (lo, hi) = rect.bounds();
        let (Some((r0, r1)), Some((c0, c1))) = (grid.span(lo[0], hi[0]), grid.span(lo[1], hi[1])) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                if rect.contains(grid.cell_center(r, c)) {
                    grid.set(r, c, 0);
                }
            }
        }
    }
    let reach = 0.5 * spec.resolution;
    for line in &scene.map {
        let ch = 1 + line.kind.index();
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let spans = (
                grid.span(a[0].min(b[0]) - reach, a[0].max(b[0]) + reach),
                grid.span(a[1].min(b[1]) - reach, a[1].max(b[1]) + reach),
            );
            let (Some((r0, r1)), Some((c0, c1))) = spans else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if point_segment_distance(grid.cell_center(r, c), a, b) <= reach {
                        grid.set(r, c, ch);
                    }
                }
            }
        }
    }
    Ok(grid)
}
