//! Node files, raster formats, coordinate mapping and synthetic circuits.

pub mod grid;
pub mod nodes;
pub mod raster;
pub mod synth;

pub use grid::{load_label, read_grid, save_grid, save_pgm, GridFormat, LabelGrid};
pub use nodes::{read_nodes, write_nodes, Extent, Node, NodeFormat, NodeSet};
pub use raster::{assign_grid, normalize, GridAssignment, GridSpec, NormalizedCoords, Resolution};
pub use synth::{gen_synthetic, SynthConfig};
