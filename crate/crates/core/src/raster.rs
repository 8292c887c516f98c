//! Rectangular grids of real values with spatial metadata.
//!
//! A [`Raster`] is stored row-major with row 0 at the *bottom* of the map
//! (so pixel-center coordinates are `origin + (index + 0.5) * pixel_size`
//! on both axes). Missing values are `NaN` in memory and the `nodata`
//! sentinel on disk.
//!
//! Two interchange formats are supported:
//! * grid text: six `key value` header lines (`ncols`, `nrows`,
//!   `xllcorner`, `yllcorner`, `cellsize`, `nodata_value`) followed by
//!   row-major ASCII floats, rows written top-to-bottom;
//! * compact binary: magic bytes `DGR1`, a little-endian header, and
//!   64-bit little-endian floats in the same row order.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;
const BINARY_MAGIC: &[u8; 4] = b"DGR1";

/// Pixel grid geometry: column/row counts, pixel size, lower-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize) -> Self {
        GridSpec {
            nx,
            ny,
            pixel_size: 1.0,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 1 || self.ny < 1 {
            return Err(Error::Config(format!(
                "grid must have at least one pixel per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(Error::Config(format!(
                "pixel_size must be positive and finite, got {}",
                self.pixel_size
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    /// Map coordinates of the center of pixel (ix, iy); iy = 0 is the bottom row.
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + (ix as f64 + 0.5) * self.pixel_size,
            self.origin_y + (iy as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        iy * self.nx + ix
    }

    /// Length of the grid diagonal in map units.
    pub fn diagonal(&self) -> f64 {
        let w = self.nx as f64 * self.pixel_size;
        let h = self.ny as f64 * self.pixel_size;
        (w * w + h * h).sqrt()
    }
}

/// Grid-aligned boolean raster (polygon masks, missing-data flags).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: GridSpec,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(grid: GridSpec, value: bool) -> Self {
        Mask {
            grid,
            data: vec![value; grid.n_pixels()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.n_pixels() {
            return Err(Error::Argument(format!(
                "mask length {} does not match grid with {} pixels",
                data.len(),
                grid.n_pixels()
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.data[self.grid.index(ix, iy)]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Rectangular grid of `f64` values with spatial metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: GridSpec,
    data: Vec<f64>,
}

impl Raster {
    pub fn filled(grid: GridSpec, value: f64) -> Self {
        Raster {
            grid,
            data: vec![value; grid.n_pixels()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_pixels() {
            return Err(Error::Argument(format!(
                "raster length {} does not match grid with {} pixels",
                data.len(),
                grid.n_pixels()
            )));
        }
        Ok(Raster { grid, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[self.grid.index(ix, iy)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let i = self.grid.index(ix, iy);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population standard deviation (denominator N).
    pub fn std_pop(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self.data.iter().map(|v| (v - m) * (v - m)).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    /// (min, max) over finite values; None if every pixel is missing.
    pub fn finite_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for &v in &self.data {
            if v.is_finite() {
                range = Some(match range {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
        }
        range
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    // ---- file formats -------------------------------------------------

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let g = &self.grid;
        let _ = writeln!(out, "ncols {}", g.nx);
        let _ = writeln!(out, "nrows {}", g.ny);
        let _ = writeln!(out, "xllcorner {}", g.origin_x);
        let _ = writeln!(out, "yllcorner {}", g.origin_y);
        let _ = writeln!(out, "cellsize {}", g.pixel_size);
        let _ = writeln!(out, "nodata_value {}", DEFAULT_NODATA);
        for iy in (0..g.ny).rev() {
            let row = &self.data[iy * g.nx..(iy + 1) * g.nx];
            let mut first = true;
            for &v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                if v.is_nan() {
                    let _ = write!(out, "{}", DEFAULT_NODATA);
                } else {
                    let _ = write!(out, "{}", v);
                }
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse_text(text: &str) -> Result<Raster> {
        let mut tokens = text.split_whitespace();
        let mut header = |name: &str| -> Result<f64> {
            let key = tokens
                .next()
                .ok_or_else(|| Error::Data(format!("missing header line '{name}'")))?;
            if !key.eq_ignore_ascii_case(name) {
                return Err(Error::Data(format!(
                    "expected header '{name}', found '{key}'"
                )));
            }
            let value = tokens
                .next()
                .ok_or_else(|| Error::Data(format!("missing value for header '{name}'")))?;
            value
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("bad value '{value}' for header '{name}'")))
        };
        let ncols = header("ncols")? as usize;
        let nrows = header("nrows")? as usize;
        let xll = header("xllcorner")?;
        let yll = header("yllcorner")?;
        let cellsize = header("cellsize")?;
        let nodata = header("nodata_value")?;
        let grid = GridSpec {
            nx: ncols,
            ny: nrows,
            pixel_size: cellsize,
            origin_x: xll,
            origin_y: yll,
        };
        grid.validate()?;

        let mut data = vec![0.0; grid.n_pixels()];
        for iy in (0..nrows).rev() {
            for ix in 0..ncols {
                let tok = tokens.next().ok_or_else(|| {
                    Error::Data(format!(
                        "truncated raster: expected {} values",
                        grid.n_pixels()
                    ))
                })?;
                let v = tok
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad raster value '{tok}'")))?;
                data[iy * ncols + ix] = if v == nodata { f64::NAN } else { v };
            }
        }
        if tokens.next().is_some() {
            return Err(Error::Data("trailing values after raster data".into()));
        }
        Ok(Raster { grid, data })
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let g = &self.grid;
        let mut buf = Vec::with_capacity(4 + 16 + 32 + 8 * self.data.len());
        buf.extend_from_slice(BINARY_MAGIC);
        buf.extend_from_slice(&(g.nx as u64).to_le_bytes());
        buf.extend_from_slice(&(g.ny as u64).to_le_bytes());
        buf.extend_from_slice(&g.origin_x.to_le_bytes());
        buf.extend_from_slice(&g.origin_y.to_le_bytes());
        buf.extend_from_slice(&g.pixel_size.to_le_bytes());
        buf.extend_from_slice(&DEFAULT_NODATA.to_le_bytes());
        for iy in (0..g.ny).rev() {
            for ix in 0..g.nx {
                buf.extend_from_slice(&self.data[iy * g.nx + ix].to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 52 || &bytes[0..4] != BINARY_MAGIC {
            return Err(Error::Data(format!(
                "{}: not a DGR1 binary raster",
                path.display()
            )));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let nx = u64_at(4) as usize;
        let ny = u64_at(12) as usize;
        let grid = GridSpec {
            nx,
            ny,
            origin_x: f64_at(20),
            origin_y: f64_at(28),
            pixel_size: f64_at(36),
        };
        grid.validate()?;
        let nodata = f64_at(44);
        let expected = 52 + 8 * grid.n_pixels();
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                expected,
                bytes.len()
            )));
        }
        let mut data = vec![0.0; grid.n_pixels()];
        let mut off = 52;
        for iy in (0..ny).rev() {
            for ix in 0..nx {
                let v = f64_at(off);
                data[iy * nx + ix] = if v == nodata { f64::NAN } else { v };
                off += 8;
            }
        }
        Ok(Raster { grid, data })
    }

    /// Read either format, detected by the magic bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let mut head = [0u8; 4];
        let n = fs::File::open(path)
            .and_then(|mut f| f.read(&mut head))
            .map_err(|e| Error::io(path, e))?;
        if n == 4 && &head == BINARY_MAGIC {
            Self::read_binary(path)
        } else {
            Self::read_text(path)
        }
    }

    /// Write text or binary depending on extension (`.dgr` selects binary).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("dgr") => self.write_binary(path),
            _ => self.write_text(path),
        }
    }
}
