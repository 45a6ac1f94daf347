//! On-disk cache of feedback gains.
//!
//! Entries live in one directory (by default `$CHSTAB_CACHE_DIR`), one file per
//! key, named after a SHA-256 digest of the key. The container is little
//! endian:
//!
//! ```text
//! magic    8 bytes   "CHSTABG\0"
//! version  u32
//! key      u32 length + UTF-8 text (grid fingerprint, M, λ₁, λ₂, convention)
//! λ₁, λ₂   f64, f64
//! conv     u8 (0 paper, 1 full)
//! k₁ k₂ n  u64 × 3
//! F̂₁ F̂₂ R₁ R₂   f64 arrays, row major
//! ```
//!
//! A file whose version or key text differs is treated as a miss and
//! overwritten.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use faer::Mat;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{DaConvention, GridOperators};
use crate::projections::FeedbackGains;

pub const CACHE_ENV: &str = "CHSTAB_CACHE_DIR";
const MAGIC: &[u8; 8] = b"CHSTABG\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct GainsCache {
    dir: PathBuf,
}

impl GainsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// The cache named by `CHSTAB_CACHE_DIR`, if set and nonempty.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(GainsCache::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(ops: &GridOperators, level: usize, lambda1: f64, lambda2: f64, conv: DaConvention) -> String {
        format!(
            "{};M={};l1={:016x};l2={:016x};conv={}",
            ops.fingerprint(),
            level,
            lambda1.to_bits(),
            lambda2.to_bits(),
            conv.as_str()
        )
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let digest = Sha256::digest(key.as_bytes());
        let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("gains-{hex}.bin"))
    }

    /// Returns the cached gains for `key`, or `None` on a miss.
    pub fn load(&self, key: &str) -> Result<Option<FeedbackGains>> {
        let path = self.path_for(key);
        let mut bytes = Vec::new();
        match fs::File::open(&path) {
            Ok(mut f) => {
                f.read_to_end(&mut bytes)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        decode(&bytes, key)
    }

    pub fn store(&self, key: &str, gains: &FeedbackGains) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path_for(key);
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&encode(key, gains))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn encode(key: &str, g: &FeedbackGains) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&g.lambda1.to_le_bytes());
    out.extend_from_slice(&g.lambda2.to_le_bytes());
    out.push(match g.convention {
        DaConvention::Paper => 0,
        DaConvention::Full => 1,
    });
    for d in [g.f1.nrows(), g.f2.nrows(), g.f1.ncols()] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for m in [&g.f1, &g.f2, &g.r1, &g.r2] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Cache("truncated gains file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat<f64>> {
        let mut m = Mat::<f64>::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

fn decode(bytes: &[u8], key: &str) -> Result<Option<FeedbackGains>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Cache("not a gains file".into()));
    }
    if r.u32()? != VERSION {
        return Ok(None);
    }
    let klen = r.u32()? as usize;
    if r.take(klen)? != key.as_bytes() {
        return Ok(None);
    }
    let lambda1 = r.f64()?;
    let lambda2 = r.f64()?;
    let convention = match r.take(1)?[0] {
        0 => DaConvention::Paper,
        1 => DaConvention::Full,
        other => return Err(Error::Cache(format!("unknown convention tag {other}"))),
    };
    let k1 = r.u64()? as usize;
    let k2 = r.u64()? as usize;
    let n = r.u64()? as usize;
    let expected = 8 * (k1 * n + k2 * n + k1 * k1 + k2 * k2);
    if bytes.len() - r.pos != expected {
        return Err(Error::Cache("gains file has the wrong size".into()));
    }
    let f1 = r.mat(k1, n)?;
    let f2 = r.mat(k2, n)?;
    let r1 = r.mat(k1, k1)?;
    let r2 = r.mat(k2, k2)?;
    Ok(Some(FeedbackGains {
        lambda1,
        lambda2,
        convention,
        f1,
        f2,
        r1,
        r2,
    }))
}
