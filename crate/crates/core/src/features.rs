//! Hand-crafted baseline rasters: cell density and RUDY.

use crate::error::{Error, Result};
use crate::io::grid::LabelGrid;
use crate::io::nodes::NodeSet;
use crate::io::raster::Resolution;

/// Axis-aligned rectangle in cell units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CellRect {
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    /// Visit every cell the rectangle overlaps with the overlap area.
    fn for_each_overlap(&self, res: Resolution, mut f: impl FnMut(usize, f64)) {
        let (w, h) = (res.width as f64, res.height as f64);
        let (x0, x1) = (self.x0.max(0.0), self.x1.min(w));
        let (y0, y1) = (self.y0.max(0.0), self.y1.min(h));
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let (cx0, cx1) = (x0.floor() as usize, (x1.ceil() as usize).min(res.width));
        let (cy0, cy1) = (y0.floor() as usize, (y1.ceil() as usize).min(res.height));
        for cy in cy0..cy1 {
            let oy = y1.min(cy as f64 + 1.0) - y0.max(cy as f64);
            if oy <= 0.0 {
                continue;
            }
            for cx in cx0..cx1 {
                let ox = x1.min(cx as f64 + 1.0) - x0.max(cx as f64);
                if ox > 0.0 {
                    f(cy * res.width + cx, ox * oy);
                }
            }
        }
    }
}

/// Node rectangles in cell units (unclamped centers).
pub fn node_rects(nodes: &NodeSet, res: Resolution) -> Vec<CellRect> {
    let e = &nodes.extent;
    let (sx, sy) = (res.width as f64 / e.width(), res.height as f64 / e.height());
    nodes
        .nodes
        .iter()
        .map(|n| CellRect::centered((n.x - e.x_min) * sx, (n.y - e.y_min) * sy, n.w * sx, n.h * sy))
        .collect()
}

/// Summed overlap area (in cell units) of node rectangles per cell.
pub fn cell_density_raw(nodes: &NodeSet, res: Resolution) -> Vec<f64> {
    let mut out = vec![0.0; res.cells()];
    if nodes.is_empty() {
        return out;
    }
    for r in node_rects(nodes, res) {
        r.for_each_overlap(res, |i, a| out[i] += a);
    }
    out
}

/// Divide by the maximum; an all-zero raster stays zero.
pub fn max_normalize(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Cell occupancy map in `[0, 1]`: covered fraction of each cell, scaled
/// down by the peak only where overlapping nodes exceed a full cell.
pub fn cell_density_map(nodes: &NodeSet, res: Resolution) -> LabelGrid {
    let mut raw = cell_density_raw(nodes, res);
    let max = raw.iter().copied().fold(1.0, f64::max);
    raw.iter_mut().for_each(|v| *v /= max);
    LabelGrid::from_f64(res.width, res.height, &raw).expect("resolution-sized raster")
}

/// Per-net RUDY before normalization. Boxes thinner than one cell are padded
/// to one cell around their center.
pub fn rudy_raw(nets: &[Vec<usize>], nodes: &NodeSet, res: Resolution) -> Result<Vec<f64>> {
    let mut out = vec![0.0; res.cells()];
    if nets.is_empty() {
        return Ok(out);
    }
    let e = &nodes.extent;
    let (sx, sy) = (res.width as f64 / e.width(), res.height as f64 / e.height());
    for (k, net) in nets.iter().enumerate() {
        if net.len() < 2 {
            return Err(Error::Validation(format!("net #{k} has fewer than 2 nodes")));
        }
        let mut b = CellRect {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for &i in net {
            let n = nodes
                .nodes
                .get(i)
                .ok_or_else(|| Error::Validation(format!("net #{k} references unknown node {i}")))?;
            let (x, y) = ((n.x - e.x_min) * sx, (n.y - e.y_min) * sy);
            b = CellRect {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            };
        }
        let pad = |lo: f64, hi: f64| {
            if hi - lo < 1.0 {
                let mid = (lo + hi) / 2.0;
                (mid - 0.5, mid + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = pad(b.x0, b.x1);
        let (y0, y1) = pad(b.y0, b.y1);
        let (wb, hb) = (x1 - x0, y1 - y0);
        let density = (wb + hb) / (wb * hb);
        CellRect { x0, y0, x1, y1 }.for_each_overlap(res, |i, a| out[i] += density * a);
    }
    Ok(out)
}

pub fn rudy_map(nets: &[Vec<usize>], nodes: &NodeSet, res: Resolution) -> Result<LabelGrid> {
    let mut raw = rudy_raw(nets, nodes, res)?;
    max_normalize(&mut raw);
    LabelGrid::from_f64(res.width, res.height, &raw)
}
