//! On-disk eigenbasis cache and resumable Lanczos state.
//!
//! Basis file (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "LOCENSB\0"
//! version   u32
//! p         u64
//! m         u64
//! digest    u32 length + UTF-8 bytes   (model digest)
//! policy    u32 length + UTF-8 bytes   (batch policy tag)
//! config    u32 length + UTF-8 bytes   (producing config digest, may be empty)
//! seed      u64
//! iters     u64
//! m x f64   eigenvalues, decreasing |lambda|
//! m x p f64 eigenvectors, one row per vector
//! ```
//!
//! The Lanczos state file uses magic `"LOCENSL\0"` and stores the
//! tridiagonal coefficients, the pending residual and the Lanczos vectors so
//! a later run can extend `m` without recomputing.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::lanczos::{Reorth, TridiagonalFactor};
use super::{Provenance, SpectralBasis};
use crate::error::{Error, Result};
use crate::mlp::{MlpSpec, ParamVector};

pub const BASIS_FORMAT_VERSION: u32 = 1;
pub const STATE_FORMAT_VERSION: u32 = 1;
const BASIS_MAGIC: &[u8; 8] = b"LOCENSB\0";
const STATE_MAGIC: &[u8; 8] = b"LOCENSL\0";

/// SHA-256 over the architecture and the exact parameter bits.
pub fn model_digest(spec: &MlpSpec, params: &ParamVector) -> String {
    let mut h = Sha256::new();
    h.update(format!("{spec}|{:?}|", spec.hidden_widths).as_bytes());
    for v in params.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt("size overflows usize"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("invalid UTF-8 string"))
    }
    fn header(&mut self, magic: &[u8; 8], expected: u32) -> Result<()> {
        if self.take(8)? != magic {
            return Err(self.corrupt("bad magic"));
        }
        let version = self.u32()?;
        if version != expected {
            return Err(Error::Version {
                found: version,
                expected,
            });
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_basis(basis: &SpectralBasis, path: &Path) -> Result<()> {
    let (m, p) = basis.eigenvectors.dim();
    let mut w = Writer(Vec::with_capacity(64 + 8 * m * (p + 1)));
    w.0.extend_from_slice(BASIS_MAGIC);
    w.u32(BASIS_FORMAT_VERSION);
    w.u64(p as u64);
    w.u64(m as u64);
    w.str(&basis.provenance.model_digest);
    w.str(&basis.provenance.batch_policy);
    w.str(&basis.provenance.config_digest);
    w.u64(basis.provenance.seed);
    w.u64(basis.provenance.iterations as u64);
    w.f64s(&basis.eigenvalues);
    for row in basis.eigenvectors.outer_iter() {
        w.f64s(row.as_slice().expect("standard layout"));
    }
    write_atomic(path, &w.0)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedBasis {
    pub basis: SpectralBasis,
    /// `None` when no digest was supplied for comparison.
    pub digest_matches: Option<bool>,
}

/// Reads a basis. A digest mismatch against `expected_digest` is logged as a
/// warning and reported in the result; it is not an error.
pub fn load_basis(path: &Path, expected_digest: Option<&str>) -> Result<LoadedBasis> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    r.header(BASIS_MAGIC, BASIS_FORMAT_VERSION)?;
    let p = r.usize()?;
    let m = r.usize()?;
    let model_digest = r.str()?;
    let batch_policy = r.str()?;
    let config_digest = r.str()?;
    let seed = r.u64()?;
    let iterations = r.usize()?;
    let eigenvalues = r.f64s(m)?;
    let flat = r.f64s(m.checked_mul(p).ok_or_else(|| r.corrupt("length overflow"))?)?;
    r.finish()?;
    let eigenvectors = Array2::from_shape_vec((m, p), flat).map_err(|e| r.corrupt(e.to_string()))?;
    let provenance = Provenance {
        model_digest,
        batch_policy,
        seed,
        iterations,
        config_digest,
    };
    let digest_matches = expected_digest.map(|d| d == provenance.model_digest);
    if digest_matches == Some(false) {
        log::warn!(
            "eigenbasis {} was computed for model {} but is being used with {}",
            path.display(),
            provenance.model_digest,
            expected_digest.unwrap_or_default()
        );
    }
    Ok(LoadedBasis {
        basis: SpectralBasis::new(eigenvalues, eigenvectors, provenance)?,
        digest_matches,
    })
}

/// Stores a factor with the model digest, batch-policy tag and config digest
/// of `tags`; the seed and iteration count come from the factor itself.
pub fn save_lanczos_state(factor: &TridiagonalFactor, tags: &Provenance, path: &Path) -> Result<()> {
    let (m, p) = (factor.m(), factor.dim());
    let mut w = Writer(Vec::with_capacity(64 + 8 * (m + 1) * (p + 2)));
    w.0.extend_from_slice(STATE_MAGIC);
    w.u32(STATE_FORMAT_VERSION);
    w.u64(p as u64);
    w.u64(m as u64);
    w.u64(factor.seed);
    w.u8(match factor.reorth {
        Reorth::None => 0,
        Reorth::TwoStepCgs => 1,
    });
    w.u8(factor.breakdown as u8);
    w.str(&tags.model_digest);
    w.str(&tags.batch_policy);
    w.str(&tags.config_digest);
    w.f64s(&factor.alphas);
    w.f64s(&factor.betas);
    w.f64s(&[factor.residual_norm]);
    w.f64s(&factor.residual);
    for q in &factor.basis {
        w.f64s(q);
    }
    write_atomic(path, &w.0)?;
    Ok(())
}

/// Returns the factor and the provenance it was saved with.
pub fn load_lanczos_state(path: &Path) -> Result<(TridiagonalFactor, Provenance)> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    r.header(STATE_MAGIC, STATE_FORMAT_VERSION)?;
    let p = r.usize()?;
    let m = r.usize()?;
    let seed = r.u64()?;
    let reorth = match r.u8()? {
        0 => Reorth::None,
        1 => Reorth::TwoStepCgs,
        other => return Err(r.corrupt(format!("unknown reorthogonalization tag {other}"))),
    };
    let breakdown = r.u8()? != 0;
    let model_digest = r.str()?;
    let batch_policy = r.str()?;
    let config_digest = r.str()?;
    let alphas = r.f64s(m)?;
    let betas = r.f64s(m.saturating_sub(1))?;
    let residual_norm = r.f64s(1)?[0];
    let residual = r.f64s(p)?;
    let basis = (0..m).map(|_| r.f64s(p)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let factor = TridiagonalFactor::from_parts(alphas, betas, basis, breakdown, reorth, seed, residual, residual_norm);
    let tags = Provenance {
        model_digest,
        batch_policy,
        seed,
        iterations: m,
        config_digest,
    };
    Ok((factor, tags))
}
