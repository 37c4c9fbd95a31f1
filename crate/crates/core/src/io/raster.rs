//! Die-to-cell coordinate mapping and per-scale grid assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::nodes::{Extent, NodeSet};

/// Base raster resolution in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad resolution `{s}`: {e}"))
        };
        match s.split_once(['x', 'X']) {
            Some((w, h)) => Ok(Self::new(parse(w)?, parse(h)?)),
            None => Ok(Self::square(parse(s)?)),
        }
    }
}

/// Node centers mapped linearly onto `[0, W) × [0, H)` cell units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCoords {
    pub resolution: Resolution,
    pub xy: Vec<[f64; 2]>,
}

impl NormalizedCoords {
    pub fn len(&self) -> usize {
        self.xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy.is_empty()
    }
}

/// Map a coordinate onto `[0, cells)`; the max edge lands in the last cell.
fn to_cells(v: f64, lo: f64, span: f64, cells: usize) -> f64 {
    let c = cells as f64;
    ((v - lo) / span * c).clamp(0.0, c.next_down())
}

pub fn normalize(nodes: &NodeSet, resolution: Resolution) -> Result<NormalizedCoords> {
    let e = &nodes.extent;
    if nodes.is_empty() {
        return Ok(NormalizedCoords {
            resolution,
            xy: Vec::new(),
        });
    }
    if !(e.width() > 0.0 && e.height() > 0.0) {
        return Err(Error::Validation(format!(
            "die extent {}x{} has no area",
            e.width(),
            e.height()
        )));
    }
    if resolution.width == 0 || resolution.height == 0 {
        return Err(Error::Config(format!("resolution {resolution} has no cells")));
    }
    let xy = nodes
        .nodes
        .iter()
        .map(|n| {
            [
                to_cells(n.x, e.x_min, e.width(), resolution.width),
                to_cells(n.y, e.y_min, e.height(), resolution.height),
            ]
        })
        .collect();
    Ok(NormalizedCoords { resolution, xy })
}

/// Inverse of [`normalize`] for unclamped points.
pub fn denormalize(coords: &NormalizedCoords, extent: &Extent) -> Vec<[f64; 2]> {
    let r = coords.resolution;
    coords
        .xy
        .iter()
        .map(|&[x, y]| {
            [
                x / r.width as f64 * extent.width() + extent.x_min,
                y / r.height as f64 * extent.height() + extent.y_min,
            ]
        })
        .collect()
}

/// Grid size per axis, in base cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dx: usize,
    pub dy: usize,
}

impl GridSpec {
    pub fn new(dx: usize, dy: usize) -> Result<Self> {
        if dx == 0 || dy == 0 {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        Ok(Self { dx, dy })
    }

    pub fn uniform(d: usize) -> Result<Self> {
        Self::new(d, d)
    }

    /// Grid counts `(w, h)` covering the base resolution.
    pub fn dims(&self, base: Resolution) -> (usize, usize) {
        (base.width.div_ceil(self.dx), base.height.div_ceil(self.dy))
    }
}

/// Result of bucketing points into grids at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAssignment {
    /// Grid counts `(w, h)` at this scale.
    pub dims: (usize, usize),
    /// Dense id of the occupied grid of each point.
    pub segment_of: Vec<usize>,
    /// Occupied grid coordinates `(gx, gy)` in row-major scan order.
    pub occupied: Vec<(usize, usize)>,
}

impl GridAssignment {
    pub fn num_segments(&self) -> usize {
        self.occupied.len()
    }

    /// Row-major flat index (`gy·w + gx`) of each occupied grid.
    pub fn occupied_flat(&self) -> Vec<usize> {
        self.occupied.iter().map(|&(x, y)| y * self.dims.0 + x).collect()
    }

    /// Row-major flat grid index of each point.
    pub fn point_flat(&self) -> Vec<usize> {
        let flat = self.occupied_flat();
        self.segment_of.iter().map(|&s| flat[s]).collect()
    }
}

/// `G_i = (floor(x̃/dx), floor(ỹ/dy))`, with occupied grids numbered in
/// row-major order.
pub fn assign_grid(coords: &NormalizedCoords, spec: GridSpec) -> GridAssignment {
    let (w, h) = spec.dims(coords.resolution);
    let flat: Vec<usize> = coords
        .xy
        .iter()
        .map(|&[x, y]| {
            let gx = ((x / spec.dx as f64).floor() as usize).min(w - 1);
            let gy = ((y / spec.dy as f64).floor() as usize).min(h - 1);
            gy * w + gx
        })
        .collect();
    let mut id_of = vec![usize::MAX; w * h];
    for &f in &flat {
        id_of[f] = 0;
    }
    let mut occupied = Vec::new();
    for (f, slot) in id_of.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = occupied.len();
            occupied.push((f % w, f / w));
        }
    }
    let segment_of = flat.iter().map(|&f| id_of[f]).collect();
    GridAssignment {
        dims: (w, h),
        segment_of,
        occupied,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::nodes::Node;

    fn set(points: &[(f64, f64)], extent: Extent) -> NodeSet {
        let nodes = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Node {
                id: format!("n{i}"),
                x,
                y,
                w: 1.0,
                h: 1.0,
            })
            .collect();
        NodeSet::new(nodes, Some(extent)).unwrap()
    }

    #[test]
    fn linear_map_and_max_edge_clamp() {
        let s = set(&[(5.0, 5.0), (10.0, 0.0)], Extent::new(0.0, 0.0, 10.0, 10.0));
        let c = normalize(&s, Resolution::square(10)).unwrap();
        assert_eq!(c.xy[0], [5.0, 5.0]);
        assert!(c.xy[1][0] < 10.0 && c.xy[1][0] > 9.999_999);
        assert_eq!(c.xy[1][1], 0.0);
        let g = assign_grid(&c, GridSpec::uniform(1).unwrap());
        assert_eq!(g.occupied[g.segment_of[1]], (9, 0));
    }

    #[test]
    fn zero_area_extent_rejected() {
        let s = set(&[(1.0, 1.0)], Extent::new(1.0, 0.0, 1.0, 4.0));
        assert!(matches!(
            normalize(&s, Resolution::square(4)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn floor_assignment() {
        let c = NormalizedCoords {
            resolution: Resolution::square(8),
            xy: vec![[3.7, 5.2], [0.0, 0.0]],
        };
        let g = assign_grid(&c, GridSpec::uniform(2).unwrap());
        assert_eq!(g.occupied[g.segment_of[0]], (1, 2));
        assert_eq!(g.occupied[g.segment_of[1]], (0, 0));
        // row-major: (0,0) precedes (1,2)
        assert_eq!(g.segment_of, vec![1, 0]);
        assert_eq!(g.dims, (4, 4));
    }

    #[test]
    fn ragged_scale_dims() {
        assert_eq!(GridSpec::uniform(8).unwrap().dims(Resolution::new(20, 9)), (3, 2));
        assert!(GridSpec::new(0, 1).is_err());
    }

    #[test]
    fn resolution_parses() {
        assert_eq!("64x32".parse::<Resolution>().unwrap(), Resolution::new(64, 32));
        assert_eq!("16".parse::<Resolution>().unwrap(), Resolution::square(16));
        assert!("axb".parse::<Resolution>().is_err());
    }
}
