//! W×H rasters of values in `[0, 1]`: text, `CFG1` binary and PGM export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"CFG1";

/// Row-major raster; row `y` holds cells `(0..width, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Format(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Index of the first cell holding the maximum value.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f32)>, (i, &v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })?;
        Some((i % self.width, i / self.width))
    }

    fn out_of_range(&self) -> Option<(usize, f32)> {
        self.values
            .iter()
            .copied()
            .enumerate()
            .find(|&(_, v)| !(0.0..=1.0).contains(&v))
    }

    /// Error if any value is outside `[0, 1]` or non-finite.
    pub fn validate(&self) -> Result<()> {
        match self.out_of_range() {
            Some((i, v)) => Err(Error::Validation(format!(
                "grid value {v} at cell ({}, {}) is outside [0, 1]",
                i % self.width.max(1),
                i / self.width.max(1)
            ))),
            None => Ok(()),
        }
    }

    /// Clamp into `[0, 1]` (NaN becomes 0); returns the number of changed cells.
    pub fn clamp_unit(&mut self) -> usize {
        let mut changed = 0;
        for v in &mut self.values {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c.to_bits() != v.to_bits() {
                *v = c;
                changed += 1;
            }
        }
        changed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridFormat {
    Text,
    Binary,
}

pub fn encode_binary(grid: &LabelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * grid.values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<LabelGrid> {
    if bytes.len() < 12 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format("missing CFG1 magic".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * w * h {
        return Err(Error::Format(format!(
            "CFG1 extents {w}x{h} need {} payload bytes, found {}",
            4 * w * h,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    LabelGrid::new(w, h, values)
}

pub fn encode_text(grid: &LabelGrid) -> String {
    let mut out = format!("{} {}\n", grid.width, grid.height);
    for row in grid.values.chunks(grid.width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn decode_text(text: &str) -> Result<LabelGrid> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty grid text".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad grid header `{header}`")))
        })
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::Format(format!("grid header needs `W H`, got `{header}`")));
    };
    let mut values = Vec::with_capacity(w * h);
    let mut rows = 0;
    for line in lines {
        let row: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad grid value `{t}`"))))
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(Error::Format(format!(
                "grid row {} has {} values, expected {w}",
                rows + 1,
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != h {
        return Err(Error::Format(format!("grid has {rows} rows, header says {h}")));
    }
    LabelGrid::new(w, h, values)
}

/// 8-bit binary PGM (`P5`), value 1.0 maps to 255.
pub fn encode_pgm(grid: &LabelGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Read a grid, detecting `CFG1` binary by its magic and falling back to text.
pub fn read_grid(path: &Path) -> Result<LabelGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(GRID_MAGIC) {
        return decode_binary(&bytes);
    }
    if path.extension().is_some_and(|e| e == "cfg1") {
        return Err(Error::Format(format!("{}: missing CFG1 magic", path.display())));
    }
    let text =
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: neither CFG1 nor text", path.display())))?;
    decode_text(&text)
}

/// Read a label raster; out-of-range values are clamped with a warning.
pub fn load_label(path: &Path) -> Result<LabelGrid> {
    let mut grid = read_grid(path)?;
    let changed = grid.clamp_unit();
    if changed > 0 {
        warn!("{}: clamped {changed} label value(s) into [0, 1]", path.display());
    }
    Ok(grid)
}

/// Write a grid; values outside `[0, 1]` are an error.
pub fn save_grid(path: &Path, grid: &LabelGrid, format: GridFormat) -> Result<()> {
    grid.validate()?;
    let bytes = match format {
        GridFormat::Binary => encode_binary(grid),
        GridFormat::Text => encode_text(grid).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_pgm(path: &Path, grid: &LabelGrid) -> Result<()> {
    grid.validate()?;
    fs::write(path, encode_pgm(grid)).map_err(|e| Error::io(path, e))
}
