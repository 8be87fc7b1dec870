use std::path::Path;

use crate::error::{io_err, CoreError, Result};

const MAGIC: &[u8; 8] = b"TAGVFEAT";
const HEADER: usize = 16;

/// `n_src × d_v` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    n_src: usize,
    d_v: usize,
    rows: Vec<f32>,
}

impl VisualFeatures {
    pub fn new(n_src: usize, d_v: usize, rows: Vec<f32>) -> Result<Self> {
        if n_src == 0 || d_v == 0 {
            return Err(CoreError::Invalid(format!("feature matrix {n_src}x{d_v} is empty")));
        }
        if rows.len() != n_src * d_v {
            return Err(CoreError::Invalid(format!(
                "feature matrix {n_src}x{d_v} given {} values",
                rows.len()
            )));
        }
        if let Some(index) = rows.iter().position(|x| !x.is_finite()) {
            return Err(CoreError::FeatNonFinite { index });
        }
        Ok(Self { n_src, d_v, rows })
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.rows.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_src as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_v as u32).to_le_bytes());
        for x in &self.rows {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < MAGIC.len() || &b[..MAGIC.len()] != MAGIC {
            return Err(CoreError::FeatMagic);
        }
        if b.len() < HEADER {
            return Err(CoreError::FeatTruncated {
                expected: HEADER,
                found: b.len(),
            });
        }
        let word = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let (n_src, d_v) = (word(8), word(12));
        let expected = HEADER + 4 * n_src * d_v;
        if b.len() < expected {
            return Err(CoreError::FeatTruncated {
                expected,
                found: b.len(),
            });
        }
        if b.len() > expected {
            return Err(CoreError::FeatTrailing(b.len() - expected));
        }
        let rows = b[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n_src, d_v, rows)
    }
}

pub fn save_features(path: impl AsRef<Path>, f: &VisualFeatures) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, f.to_bytes()).map_err(io_err(path))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<VisualFeatures> {
    let path = path.as_ref();
    VisualFeatures::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
}

/// Linear interpolation of `f` along time to `n` rows, sampled at
/// `j·(n_src−1)/(n−1)`; a single row is taken at the midpoint.
pub fn resample_features(f: &VisualFeatures, n: usize) -> Result<VisualFeatures> {
    if n == 0 {
        return Err(CoreError::Config("resample target must be at least 1 row".into()));
    }
    let last = (f.n_src - 1) as f64;
    let mut rows = Vec::with_capacity(n * f.d_v);
    for j in 0..n {
        let p = if n == 1 { last / 2.0 } else { (j * (f.n_src - 1)) as f64 / (n - 1) as f64 };
        let lo = (p.floor() as usize).min(f.n_src - 1);
        let frac = p - lo as f64;
        if frac == 0.0 {
            rows.extend_from_slice(f.row(lo));
        } else {
            let (a, b) = (f.row(lo), f.row(lo + 1));
            rows.extend(
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| ((1.0 - frac) * x as f64 + frac * y as f64) as f32),
            );
        }
    }
    VisualFeatures::new(n, f.d_v, rows)
}
