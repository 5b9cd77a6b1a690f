//! Multi-channel Brownian sheets sampled on a grid, and integrals against them.
//!
//! Channel `c` of the sheet for seed `s` is drawn from its own counter-based stream,
//! so it is the same field whatever the total number of channels.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::plane::{NodeIndex, Point};
use crate::stats::stream_rng;
use crate::Grid;
use crate::Rect;

const MAGIC: &[u8; 8] = b"BSHEET01";

/// Source of per-cell Brownian increments, indexed by channel and lower-left node.
pub trait CellNoise {
    fn channels(&self) -> usize;
    fn grid(&self) -> &Grid;
    /// `ΔB_c` over cell `(i, j)`.
    fn increment(&self, channel: usize, i: usize, j: usize) -> f64;
}

/// Node values of an `m`-channel Brownian sheet.
#[derive(Clone, Debug, PartialEq)]
pub struct SheetPath {
    grid: Grid,
    channels: usize,
    seed: u64,
    /// Layout `[channel][i][j]`, `(nt+1) x (nx+1)` nodes per channel.
    values: Vec<f64>,
}

impl SheetPath {
    /// Independent `N(0, Δt Δx)` cell increments, accumulated into node values.
    pub fn sample(grid: Grid, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("a sheet needs at least one channel"));
        }
        let per = grid.node_count();
        let mut values = vec![0.0; per * channels];
        let scale = grid.cell_area().sqrt();
        for c in 0..channels {
            let mut rng = stream_rng(seed, c as u64);
            let block = &mut values[c * per..(c + 1) * per];
            fill_channel(&grid, block, || scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }
        Ok(Self { grid, channels, seed, values })
    }

    /// Builds a sheet from cell increments laid out `[channel][i][j]` over `nt x nx` cells.
    pub fn from_increments(grid: Grid, channels: usize, seed: u64, increments: &[f64]) -> Result<Self> {
        let cells = grid.nt() * grid.nx();
        if channels == 0 || increments.len() != cells * channels {
            return Err(Error::DimensionMismatch { expected: cells * channels.max(1), got: increments.len() });
        }
        let per = grid.node_count();
        let mut values = vec![0.0; per * channels];
        for c in 0..channels {
            let mut it = increments[c * cells..(c + 1) * cells].iter().copied();
            fill_channel(&grid, &mut values[c * per..(c + 1) * per], || it.next().unwrap_or(0.0));
        }
        Ok(Self { grid, channels, seed, values })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.values[channel * self.grid.node_count() + self.grid.flat((i, j))]
    }

    /// `B_c(z)` at a grid node.
    pub fn value_at(&self, channel: usize, z: Point<f64>) -> Result<f64> {
        self.check_channel(channel)?;
        let (i, j) = self.grid.node_index(z)?;
        Ok(self.value(channel, i, j))
    }

    /// Four-corner alternating sum over a rectangle with on-node corners.
    pub fn rect_increment(&self, channel: usize, rect: Rect) -> Result<f64> {
        self.check_channel(channel)?;
        let (i1, j1) = self.grid.node_index(rect.lo)?;
        let (i2, j2) = self.grid.node_index(rect.hi)?;
        Ok(self.value(channel, i2, j2) - self.value(channel, i1, j2) - self.value(channel, i2, j1) + self.value(channel, i1, j1))
    }

    /// Restriction to the nodes of the grid with `factor`-times fewer cells per axis.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.nt().is_multiple_of(factor) || !self.grid.nx().is_multiple_of(factor) {
            return Err(invalid(format!("coarsening factor {factor} does not divide the grid")));
        }
        let grid = Grid::new(self.grid.horizon(), self.grid.nt() / factor, self.grid.nx() / factor)?;
        let mut values = Vec::with_capacity(grid.node_count() * self.channels);
        for c in 0..self.channels {
            for i in 0..=grid.nt() {
                for j in 0..=grid.nx() {
                    values.push(self.value(c, i * factor, j * factor));
                }
            }
        }
        Ok(Self { grid, channels: self.channels, seed: self.seed, values })
    }

    /// Sheet holding only the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(invalid("select needs at least one channel"));
        }
        let per = self.grid.node_count();
        let mut values = Vec::with_capacity(per * channels.len());
        for &c in channels {
            self.check_channel(c)?;
            values.extend_from_slice(&self.values[c * per..(c + 1) * per]);
        }
        Ok(Self { grid: self.grid, channels: channels.len(), seed: self.seed, values })
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.channels {
            return Err(invalid(format!("channel {channel} out of range (sheet has {})", self.channels)));
        }
        Ok(())
    }

    /// Binary little-endian dump: magic, `nt, nx` (u64), `T, X` (f64), `m, seed` (u64), node values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.grid.nt() as u64).to_le_bytes())?;
        w.write_all(&(self.grid.nx() as u64).to_le_bytes())?;
        w.write_all(&self.grid.horizon().t.to_le_bytes())?;
        w.write_all(&self.grid.horizon().x.to_le_bytes())?;
        w.write_all(&(self.channels as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut word = || -> Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(b)
        };
        let nt = u64::from_le_bytes(word()?) as usize;
        let nx = u64::from_le_bytes(word()?) as usize;
        let t = f64::from_le_bytes(word()?);
        let x = f64::from_le_bytes(word()?);
        let channels = u64::from_le_bytes(word()?) as usize;
        let seed = u64::from_le_bytes(word()?);
        let grid = Grid::new(Point::new(t, x)?, nt, nx).map_err(|e| Error::Format(e.to_string()))?;
        if channels == 0 || channels > 1 << 20 {
            return Err(Error::Format(format!("implausible channel count {channels}")));
        }
        let total = grid.node_count() * channels;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(f64::from_le_bytes(word().map_err(|_| Error::Format("truncated payload".into()))?));
        }
        Ok(Self { grid, channels, seed, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn fill_channel(grid: &Grid, block: &mut [f64], mut draw: impl FnMut() -> f64) {
    let w = grid.nx() + 1;
    for i in 0..grid.nt() {
        let mut row_sum = 0.0;
        for j in 0..grid.nx() {
            row_sum += draw();
            block[(i + 1) * w + j + 1] = block[i * w + j + 1] + row_sum;
        }
    }
}

impl CellNoise for SheetPath {
    fn channels(&self) -> usize {
        self.channels
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn increment(&self, c: usize, i: usize, j: usize) -> f64 {
        self.value(c, i + 1, j + 1) - self.value(c, i, j + 1) - self.value(c, i + 1, j) + self.value(c, i, j)
    }
}

/// A shared one-channel common sheet stacked on top of private channels.
#[derive(Clone, Copy, Debug)]
pub struct StackedNoise<'a> {
    pub common: &'a SheetPath,
    pub private: Option<&'a SheetPath>,
}

impl CellNoise for StackedNoise<'_> {
    fn channels(&self) -> usize {
        1 + self.private.map_or(0, |p| p.channels)
    }

    fn grid(&self) -> &Grid {
        &self.common.grid
    }

    fn increment(&self, c: usize, i: usize, j: usize) -> f64 {
        match (c, self.private) {
            (0, _) => self.common.increment(0, i, j),
            (_, Some(p)) => p.increment(c - 1, i, j),
            _ => 0.0,
        }
    }
}

/// `∫_{R_z} φ dB_c` with `φ` read at lower-left corners.
pub fn ito_integral(phi: impl Fn(usize, usize) -> f64, path: &impl CellNoise, channel: usize, z: Point<f64>) -> Result<f64> {
    if channel >= path.channels() {
        return Err(invalid(format!("channel {channel} out of range")));
    }
    let (iz, jz) = path.grid().node_index(z)?;
    let mut acc = 0.0;
    for i in 0..iz {
        for j in 0..jz {
            acc += phi(i, j) * path.increment(channel, i, j);
        }
    }
    Ok(acc)
}

/// `∬ ψ(ζ, ζ') dB_{c1}(ζ) dB_{c2}(ζ')` summed over ordered pairs of distinct cells of `R_z`.
pub fn double_ito_integral(
    psi: impl Fn(NodeIndex, NodeIndex) -> f64,
    path: &impl CellNoise,
    ch1: usize,
    ch2: usize,
    z: Point<f64>,
) -> Result<f64> {
    if ch1 >= path.channels() || ch2 >= path.channels() {
        return Err(invalid("channel out of range"));
    }
    let (iz, jz) = path.grid().node_index(z)?;
    let cells: Vec<NodeIndex> = (0..iz).flat_map(|i| (0..jz).map(move |j| (i, j))).collect();
    let d1: Vec<f64> = cells.iter().map(|&(i, j)| path.increment(ch1, i, j)).collect();
    let d2: Vec<f64> = cells.iter().map(|&(i, j)| path.increment(ch2, i, j)).collect();
    let mut acc = 0.0;
    for (a, &ca) in cells.iter().enumerate() {
        let mut inner = 0.0;
        for (b, &cb) in cells.iter().enumerate() {
            if a != b {
                inner += psi(ca, cb) * d2[b];
            }
        }
        acc += d1[a] * inner;
    }
    Ok(acc)
}
