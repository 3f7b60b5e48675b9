//! Output formats: fixed-precision CSV and a compact binary path table.
//!
//! # Binary path table
//!
//! All fields little-endian:
//!
//! | offset | type | content |
//! |---|---|---|
//! | 0 | `[u8; 8]` | magic `XMFGPATH` |
//! | 8 | `u32` | format version, currently 1 |
//! | 12 | `u32` | reserved, 0 |
//! | 16 | `u64` | number of particles `P` |
//! | 24 | `u64` | number of times `T` |
//! | 32 | `f64 × T` | time grid |
//! | | `f64 × T` | common-noise levels `W⁰_t` |
//! | | `f64 × P·T` | states, particle-major |

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"XMFGPATH";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a path table (bad magic)")]
    BadMagic,
    #[error("unsupported path table version {0}")]
    Version(u32),
    #[error("inconsistent table: {0}")]
    Inconsistent(String),
}

/// Formats a number with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// A CSV table of preformatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row of numbers.
    pub fn push_nums(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|x| fmt_num(*x)).collect());
    }

    /// Appends a row of preformatted cells.
    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Particle paths together with their grid and common-noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub times: Vec<f64>,
    pub w0: Vec<f64>,
    pub n_particles: usize,
    /// Particle-major states.
    pub states: Vec<f64>,
}

impl PathTable {
    fn check(&self) -> Result<(), IoError> {
        let t = self.times.len();
        if self.w0.len() != t || self.states.len() != self.n_particles * t {
            return Err(IoError::Inconsistent(format!(
                "{} times, {} noise levels, {} states for {} particles",
                t,
                self.w0.len(),
                self.states.len(),
                self.n_particles
            )));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), IoError> {
        self.check()?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.n_particles as u64).to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        for x in self.times.iter().chain(&self.w0).chain(&self.states) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, IoError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IoError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(IoError::Version(version));
        }
        r.read_exact(&mut b4)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n_particles = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let n_times = u64::from_le_bytes(b8) as usize;
        let total = n_particles
            .checked_mul(n_times)
            .and_then(|s| s.checked_add(2 * n_times))
            .ok_or_else(|| IoError::Inconsistent("size overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 8 {
            return Err(IoError::Inconsistent(format!(
                "expected {} payload bytes, found {}",
                total * 8,
                bytes.len()
            )));
        }
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let times: Vec<f64> = vals.by_ref().take(n_times).collect();
        let w0: Vec<f64> = vals.by_ref().take(n_times).collect();
        let states: Vec<f64> = vals.collect();
        Ok(Self {
            times,
            w0,
            n_particles,
            states,
        })
    }

    /// Long-format CSV `(particle, time, state)`.
    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["particle", "time", "state"]);
        let nt = self.times.len();
        for p in 0..self.n_particles {
            for k in 0..nt {
                t.push(vec![p.to_string(), fmt_num(self.times[k]), fmt_num(self.states[p * nt + k])]);
            }
        }
        t.to_csv()
    }
}
