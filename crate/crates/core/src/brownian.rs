//! Brownian increments on uniform grids.
//!
//! Increment `(k, j)` of sample `i` is a pure function of
//! `(master_seed, i, k, j)`: ChaCha8 keyed by the master seed, stream `i`,
//! word position `2 (k m + j)`, mapped through the inverse normal CDF. A path
//! therefore never depends on generation order or worker count.
//!
//! Coarsening sums adjacent pairs, one halving at a time. Coarsening by 4 is
//! literally two halvings, so `coarsen(coarsen(p, 2), 2)` and `coarsen(p, 4)`
//! are the same floating-point computation, and [`BrownianPath::terminal_value`]
//! (which keeps halving) is identical at every level.

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Identifies the increment generator in run manifests.
pub const GENERATOR_ID: &str = "chacha8[key=seed,stream=sample,word=2(km+j)]+inverse-normal-cdf/v1";

const KEY_TAG: &[u8; 24] = b"tmilstein-brownian-key-1";
const DUMP_MAGIC: &[u8; 4] = b"TMBP";
const DUMP_VERSION: u32 = 1;

/// Uniform mesh `0 = t_0 < ... < t_N = T` with `t_k = k * step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathGrid {
    t_end: f64,
    steps: usize,
    step: f64,
}

impl PathGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::usage(format!("t_end must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::usage("grid needs at least one step"));
        }
        Ok(PathGrid {
            t_end,
            steps,
            step: t_end / steps as f64,
        })
    }

    /// The grid with step `2^-exponent`; `t_end * 2^exponent` must be an integer.
    pub fn dyadic(t_end: f64, exponent: u32) -> Result<Self> {
        let n = t_end * 2f64.powi(exponent as i32);
        if !(n >= 1.0 && n.fract() == 0.0 && n < 1e15) {
            return Err(Error::usage(format!(
                "t_end {t_end} is not a whole number of steps of size 2^-{exponent}"
            )));
        }
        Self::new(t_end, n as usize)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            k as f64 * self.step
        }
    }

    fn coarsened(&self, factor: usize) -> Self {
        PathGrid {
            t_end: self.t_end,
            steps: self.steps / factor,
            step: self.t_end / (self.steps / factor) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedInfo {
    pub master_seed: u64,
    pub sample_index: u64,
}

/// `N x m` increments, row-major in `(k, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    grid: PathGrid,
    noise_dim: usize,
    increments: Vec<f64>,
    seed: SeedInfo,
}

fn stream_rng(master_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..].copy_from_slice(KEY_TAG);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sample_index);
    rng
}

#[inline]
fn gaussian_from_bits(bits: u64) -> f64 {
    // midpoint of one of 2^53 equal cells, strictly inside (0, 1)
    let u = ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    Normal::standard().inverse_cdf(u)
}

/// Standard normal draw for `(master_seed, sample_index, k, j)` in a path with `noise_dim` columns.
pub fn standard_normal_at(master_seed: u64, sample_index: u64, noise_dim: usize, k: usize, j: usize) -> f64 {
    let mut rng = stream_rng(master_seed, sample_index);
    rng.set_word_pos(2 * (k as u128 * noise_dim as u128 + j as u128));
    gaussian_from_bits(rng.next_u64())
}

/// Draws the increments of sample `sample_index`, each `N(0, step)`.
pub fn sample_path(grid: PathGrid, noise_dim: usize, master_seed: u64, sample_index: u64) -> Result<BrownianPath> {
    if noise_dim == 0 {
        return Err(Error::usage("noise dimension must be positive"));
    }
    let mut rng = stream_rng(master_seed, sample_index);
    let scale = grid.step.sqrt();
    let increments = (0..grid.steps * noise_dim)
        .map(|_| gaussian_from_bits(rng.next_u64()) * scale)
        .collect();
    Ok(BrownianPath {
        grid,
        noise_dim,
        increments,
        seed: SeedInfo {
            master_seed,
            sample_index,
        },
    })
}

impl BrownianPath {
    /// A path from explicit increments, row-major `(k, j)`.
    pub fn from_increments(grid: PathGrid, noise_dim: usize, increments: Vec<f64>, seed: SeedInfo) -> Result<Self> {
        if noise_dim == 0 || increments.len() != grid.steps * noise_dim {
            return Err(Error::usage(format!(
                "expected {} x {} increments, got {}",
                grid.steps,
                noise_dim,
                increments.len()
            )));
        }
        Ok(BrownianPath {
            grid,
            noise_dim,
            increments,
            seed,
        })
    }

    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> SeedInfo {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `Delta B_k`, one entry per noise column.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    fn halve(&self) -> BrownianPath {
        let m = self.noise_dim;
        let n = self.grid.steps / 2;
        let mut out = Vec::with_capacity(n * m);
        for k in 0..n {
            let a = &self.increments[2 * k * m..(2 * k + 1) * m];
            let b = &self.increments[(2 * k + 1) * m..(2 * k + 2) * m];
            out.extend(a.iter().zip(b).map(|(x, y)| x + y));
        }
        BrownianPath {
            grid: self.grid.coarsened(2),
            noise_dim: m,
            increments: out,
            seed: self.seed,
        }
    }

    /// Sums blocks of `factor` consecutive increments (a power of two dividing `N`).
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        if factor == 0 || !factor.is_power_of_two() || !self.grid.steps.is_multiple_of(factor) {
            return Err(Error::usage(format!(
                "coarsening factor {factor} must be a power of two dividing {} steps",
                self.grid.steps
            )));
        }
        let mut path = self.clone();
        for _ in 0..factor.trailing_zeros() {
            path = path.halve();
        }
        Ok(path)
    }

    /// `B(T)`: halve while the step count is even, then sum the rest left to right.
    pub fn terminal_value(&self) -> Vec<f64> {
        let mut path = self.clone();
        while path.grid.steps.is_multiple_of(2) {
            path = path.halve();
        }
        let mut total = vec![0.0; self.noise_dim];
        for k in 0..path.grid.steps {
            for (t, v) in total.iter_mut().zip(path.increment(k)) {
                *t += v;
            }
        }
        total
    }

    /// Binary dump: magic, version, `T`, `N`, `m`, seeds, then little-endian
    /// `f64` increments row-major in `(k, j)`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&self.grid.t_end.to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&(self.noise_dim as u64).to_le_bytes())?;
        w.write_all(&self.seed.master_seed.to_le_bytes())?;
        w.write_all(&self.seed.sample_index.to_le_bytes())?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<BrownianPath> {
        let bad = |msg: &str| Error::usage(format!("malformed path dump: {msg}"));
        let mut buf = vec![0u8; 48];
        r.read_exact(&mut buf).map_err(|_| bad("short header"))?;
        if &buf[..4] != DUMP_MAGIC {
            return Err(bad("magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        if u32_at(4) != DUMP_VERSION {
            return Err(bad("version"));
        }
        let t_end = f64::from_bits(u64_at(8));
        let steps = u64_at(16) as usize;
        let m = u64_at(24) as usize;
        let seed = SeedInfo {
            master_seed: u64_at(32),
            sample_index: u64_at(40),
        };
        let grid = PathGrid::new(t_end, steps)?;
        let mut body = vec![0u8; steps * m * 8];
        r.read_exact(&mut body).map_err(|_| bad("short body"))?;
        let increments = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        BrownianPath::from_increments(grid, m, increments, seed)
    }
}
