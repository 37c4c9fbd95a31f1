//! Placed-node files: CSV (`id,x,y,w,h`) or JSONL, with an optional
//! `#extent x0 y0 x1 y1` line giving the die area.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One placed component: center, width and height in layout units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Die area in layout units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Bounding box of the node rectangles; all-zero for an empty set.
    pub fn bounding(nodes: &[Node]) -> Self {
        if nodes.is_empty() {
            return Self::new(0.0, 0.0, 0.0, 0.0);
        }
        nodes.iter().fold(
            Self::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |e, n| {
                Self::new(
                    e.x_min.min(n.x - n.w / 2.0),
                    e.y_min.min(n.y - n.h / 2.0),
                    e.x_max.max(n.x + n.w / 2.0),
                    e.y_max.max(n.y + n.h / 2.0),
                )
            },
        )
    }
}

/// The raw circuit point cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub nodes: Vec<Node>,
    pub extent: Extent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeFormat {
    Csv,
    Jsonl,
}

impl NodeFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "jsonl" | "json" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

impl NodeSet {
    /// Validate and build; `extent` defaults to the bounding box.
    pub fn new(nodes: Vec<Node>, extent: Option<Extent>) -> Result<Self> {
        let bad: Vec<&str> = nodes
            .iter()
            .filter(|n| !(n.w > 0.0 && n.h > 0.0))
            .map(|n| n.id.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "non-positive width/height for node(s) {}",
                bad.join(", ")
            )));
        }
        let extent = extent.unwrap_or_else(|| Extent::bounding(&nodes));
        let outside: Vec<&str> = nodes
            .iter()
            .filter(|n| !extent.contains(n.x, n.y))
            .map(|n| n.id.as_str())
            .collect();
        if !outside.is_empty() {
            return Err(Error::Validation(format!(
                "node center(s) outside the die extent: {}",
                outside.join(", ")
            )));
        }
        Ok(Self { nodes, extent })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of every node id.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }
}

fn parse_extent(line: &str) -> Option<std::result::Result<Extent, String>> {
    let rest = line.trim().strip_prefix("#extent")?;
    let vals: std::result::Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
    Some(match vals {
        Ok(v) if v.len() == 4 => Ok(Extent::new(v[0], v[1], v[2], v[3])),
        Ok(v) => Err(format!("#extent needs 4 numbers, got {}", v.len())),
        Err(e) => Err(format!("bad #extent value: {e}")),
    })
}

/// Read a node file; the format is taken from the extension.
pub fn read_nodes(path: &Path) -> Result<NodeSet> {
    let format = NodeFormat::from_path(path)
        .ok_or_else(|| Error::Format(format!("{}: expected a .csv or .jsonl node file", path.display())))?;
    parse_nodes(path, format)
}

pub fn parse_nodes(path: &Path, format: NodeFormat) -> Result<NodeSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nodes_str(&text, format).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        other => other,
    })
}

/// Parse node text. Parse errors carry 1-based line numbers and an empty path.
pub fn parse_nodes_str(text: &str, format: NodeFormat) -> Result<NodeSet> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: Default::default(),
        line,
        msg,
    };
    let mut extent = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(e) = parse_extent(line) {
            extent = Some(e.map_err(|m| parse_err(i + 1, m))?);
        }
    }
    let nodes = match format {
        NodeFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
            for field in ["id", "x", "y", "w", "h"] {
                if !headers.iter().any(|h| h == field) {
                    let line = text
                        .lines()
                        .position(|l| !l.trim_start().starts_with('#'))
                        .map_or(1, |p| p + 1);
                    return Err(parse_err(line, format!("header is missing field `{field}`")));
                }
            }
            let mut nodes = Vec::new();
            for rec in rdr.deserialize::<Node>() {
                nodes.push(rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    parse_err(line, e.to_string())
                })?);
            }
            nodes
        }
        NodeFormat::Jsonl => {
            let mut nodes = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let t = line.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                nodes.push(serde_json::from_str::<Node>(t).map_err(|e| parse_err(i + 1, e.to_string()))?);
            }
            nodes
        }
    };
    NodeSet::new(nodes, extent)
}

/// Serialize with the explicit extent line. Floats use the shortest
/// round-tripping representation, so parsing back is bit-exact.
pub fn format_nodes(set: &NodeSet, format: NodeFormat) -> String {
    let e = &set.extent;
    let mut out = format!("#extent {} {} {} {}\n", e.x_min, e.y_min, e.x_max, e.y_max);
    match format {
        NodeFormat::Csv => {
            out.push_str("id,x,y,w,h\n");
            for n in &set.nodes {
                let _ = writeln!(out, "{},{},{},{},{}", n.id, n.x, n.y, n.w, n.h);
            }
        }
        NodeFormat::Jsonl => {
            for n in &set.nodes {
                out.push_str(&serde_json::to_string(n).expect("node serializes"));
                out.push('\n');
            }
        }
    }
    out
}

pub fn write_nodes(path: &Path, set: &NodeSet, format: NodeFormat) -> Result<()> {
    fs::write(path, format_nodes(set, format)).map_err(|e| Error::io(path, e))
}

/// One line of a nets file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub net: serde_json::Value,
    pub nodes: Vec<String>,
}

/// Read a JSONL nets file: one `{"net": id, "nodes": [ids]}` per line.
pub fn read_nets(path: &Path) -> Result<Vec<Net>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut nets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        nets.push(serde_json::from_str(t).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(nets)
}

/// Resolve net member ids to node indices; every net needs ≥ 2 known nodes.
pub fn resolve_nets(nets: &[Net], set: &NodeSet) -> Result<Vec<Vec<usize>>> {
    let index = set.id_index();
    nets.iter()
        .map(|net| {
            if net.nodes.len() < 2 {
                return Err(Error::Validation(format!("net {} has fewer than 2 nodes", net.net)));
            }
            net.nodes
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Validation(format!("net {} references unknown node `{id}`", net.net)))
                })
                .collect()
        })
        .collect()
}
