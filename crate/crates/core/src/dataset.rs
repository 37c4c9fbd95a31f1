//! Paired node/label samples on disk and synthetic corpora.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::io::grid::{load_label, save_grid, GridFormat, LabelGrid};
use crate::io::nodes::{read_nodes, write_nodes, NodeFormat, NodeSet};
use crate::io::synth::{generate, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub nodes: NodeSet,
    pub label: LabelGrid,
}

/// Node files (`.csv` / `.jsonl`) in `dir`, sorted by stem.
pub fn node_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if NodeFormat::from_path(&path).is_some() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Load every `<stem>.csv|jsonl` that has a `<stem>.cfg1` label next to it.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (name, path) in node_files(dir)? {
        let label_path = dir.join(format!("{name}.cfg1"));
        if !label_path.exists() {
            warn!("{}: no label {}, skipped", path.display(), label_path.display());
            continue;
        }
        samples.push(Sample {
            nodes: read_nodes(&path)?,
            label: load_label(&label_path)?,
            name,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no paired node/label files", dir.display())));
    }
    Ok(samples)
}

pub fn write_dir(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_nodes(&dir.join(format!("{}.csv", s.name)), &s.nodes, NodeFormat::Csv)?;
        save_grid(&dir.join(format!("{}.cfg1", s.name)), &s.label, GridFormat::Binary)?;
    }
    Ok(())
}

/// Seed of the `i`-th circuit of a corpus.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// `count` synthetic circuits named `c0000`, `c0001`, ...
pub fn synthetic(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let (nodes, label) = generate(sample_seed(seed, i), cfg)?;
            Ok(Sample {
                name: format!("c{i:04}"),
                nodes,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::raster::Resolution;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(50, 2, Resolution::square(8));
        let data = synthetic(4, 3, &cfg).unwrap();
        write_dir(dir.path(), &data).unwrap();
        fs::write(dir.path().join("orphan.csv"), "id,x,y,w,h\n").unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn empty_dir_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Data(_))));
    }
}
