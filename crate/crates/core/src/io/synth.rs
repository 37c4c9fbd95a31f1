//! Seeded synthetic circuits with a blurred-density congestion proxy label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cell_density_raw, max_normalize};
use crate::io::grid::LabelGrid;
use crate::io::nodes::{Extent, Node, NodeSet};
use crate::io::raster::Resolution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_clusters: usize,
    pub resolution: Resolution,
    /// Cluster spread range as a fraction of the smaller die side.
    pub sigma_frac: (f64, f64),
    /// Node width/height range in cells, sampled log-uniformly.
    pub size_cells: (f64, f64),
    /// Layout units per cell.
    pub pitch: f64,
}

impl SynthConfig {
    pub fn new(n_nodes: usize, n_clusters: usize, resolution: Resolution) -> Self {
        Self {
            n_nodes,
            n_clusters,
            resolution,
            sigma_frac: (0.04, 0.12),
            size_cells: (0.5, 4.0),
            pitch: 1.0,
        }
    }
}

/// Normalized `(2r+1)²` Gaussian blur with zero padding outside the raster.
pub fn gaussian_blur(values: &[f64], res: Resolution, sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum::<f64>().powi(2);
    let (w, h) = (res.width as isize, res.height as isize);
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    acc += taps[(dy + r) as usize] * taps[(dx + r) as usize] * values[(yy * w + xx) as usize];
                }
            }
            out[(y * w + x) as usize] = acc / total;
        }
    }
    out
}

/// Area-weighted cell density, blurred by a 5×5 σ=1 Gaussian, max-normalized.
pub fn density_label(nodes: &NodeSet, res: Resolution) -> LabelGrid {
    let raw = cell_density_raw(nodes, res);
    let mut blurred = gaussian_blur(&raw, res, 1.0, 2);
    max_normalize(&mut blurred);
    LabelGrid::from_f64(res.width, res.height, &blurred).expect("resolution-sized raster")
}

pub fn gen_synthetic(
    seed: u64,
    n_nodes: usize,
    n_clusters: usize,
    resolution: Resolution,
) -> Result<(NodeSet, LabelGrid)> {
    generate(seed, &SynthConfig::new(n_nodes, n_clusters, resolution))
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<(NodeSet, LabelGrid)> {
    if cfg.n_clusters == 0 || cfg.n_nodes < cfg.n_clusters {
        return Err(Error::Config(format!(
            "need n_nodes >= n_clusters >= 1, got {} nodes and {} clusters",
            cfg.n_nodes, cfg.n_clusters
        )));
    }
    let res = cfg.resolution;
    let (dw, dh) = (res.width as f64 * cfg.pitch, res.height as f64 * cfg.pitch);
    let extent = Extent::new(0.0, 0.0, dw, dh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let side = dw.min(dh);
    let clusters: Vec<(f64, f64, f64, f64)> = (0..cfg.n_clusters)
        .map(|_| {
            let cx = rng.random_range(0.15..0.85) * dw;
            let cy = rng.random_range(0.15..0.85) * dh;
            let s = rng.random_range(cfg.sigma_frac.0..=cfg.sigma_frac.1) * side;
            let weight = rng.random_range(0.5..1.5);
            (cx, cy, s, weight)
        })
        .collect();
    let total_weight: f64 = clusters.iter().map(|c| c.3).sum();

    let (lo, hi) = (cfg.size_cells.0.ln(), cfg.size_cells.1.ln());
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut nodes = Vec::with_capacity(cfg.n_nodes);
    for i in 0..cfg.n_nodes {
        // the first node of each cluster is pinned to it so every cluster is populated
        let c = if i < cfg.n_clusters {
            i
        } else {
            let mut pick = rng.random_range(0.0..total_weight);
            let mut k = 0;
            while k + 1 < clusters.len() && pick >= clusters[k].3 {
                pick -= clusters[k].3;
                k += 1;
            }
            k
        };
        let (cx, cy, s, _) = clusters[c];
        let x = (cx + s * std.sample(&mut rng)).clamp(0.0, dw);
        let y = (cy + s * std.sample(&mut rng)).clamp(0.0, dh);
        let w = rng.random_range(lo..=hi).exp() * cfg.pitch;
        let h = rng.random_range(lo..=hi).exp() * cfg.pitch;
        nodes.push(Node {
            id: format!("n{i}"),
            x,
            y,
            w,
            h,
        });
    }
    let set = NodeSet::new(nodes, Some(extent))?;
    let label = density_label(&set, res);
    Ok((set, label))
}
