//! CSV datasets and the binary sample file.
//!
//! Sample file layout, all integers and floats little-endian:
//!
//! ```text
//! "FBRHT1"            6 bytes
//! p, R, seed          3 × u64
//! config digest       32 bytes (SHA-256)
//! accept_rate         f64
//! feature ids         p × u64
//! intercepts          R × f64
//! draws               p·R × f64, column-major (one column per draw)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::datagen::Dataset;
use crate::error::{FbrhtError, Result};
use crate::sampler::SampleMatrix;

pub const MAGIC: &[u8; 6] = b"FBRHT1";

pub type ConfigDigest = [u8; 32];

/// Read a dataset whose first column is `label` (0/1) and whose remaining
/// columns are numeric features.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let shown = path.display().to_string();
    let err = |line: usize, msg: String| FbrhtError::Csv { path: shown.clone(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("label") {
        return Err(err(1, "first column must be named `label`".into()));
    }
    if header.len() < 2 {
        return Err(err(1, "no feature columns".into()));
    }
    let p = header.len() - 1;
    let mut y = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |pos| pos.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |pos| pos.line() as usize);
        if record.len() != header.len() {
            return Err(err(line, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let label = match &record[0] {
            "0" | "0.0" => 0,
            "1" | "1.0" => 1,
            other => return Err(err(line, format!("row {}: label must be 0 or 1, got `{other}`", y.len() + 1))),
        };
        y.push(label);
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| {
                err(line, format!("column `{}`: cannot parse `{cell}` as a number", header[c]))
            })?;
            if !v.is_finite() {
                return Err(err(line, format!("column `{}`: non-finite value `{cell}`", header[c])));
            }
            values.push(v);
        }
    }
    if y.len() < 2 {
        return Err(err(0, format!("need at least 2 rows, found {}", y.len())));
    }
    let x = DMatrix::from_row_slice(y.len(), p, &values);
    Dataset::new(x, y)?.with_feature_names(header[1..].to_vec())
}

/// Write a dataset; values use the shortest representation that parses back
/// to the same float.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let names: Vec<String> = match &data.feature_names {
        Some(n) => n.clone(),
        None => (1..=data.p()).map(|j| format!("x{j}")).collect(),
    };
    let mut out = String::new();
    out.push_str("label");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&data.y[i].to_string());
        for j in 0..data.p() {
            out.push(',');
            out.push_str(&data.x[(i, j)].to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Write through a temporary sibling and rename, so a failed write never
/// leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn config_digest(canonical: &str) -> ConfigDigest {
    let mut d = [0u8; 32];
    d.copy_from_slice(&Sha256::digest(canonical.as_bytes()));
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleHeader {
    pub seed: u64,
    pub digest: ConfigDigest,
}

pub fn encode_samples(samples: &SampleMatrix, header: &SampleHeader) -> Vec<u8> {
    let (p, r) = samples.draws.shape();
    let mut buf = Vec::with_capacity(6 + 24 + 32 + 8 + 8 * (p + r + p * r));
    buf.extend_from_slice(MAGIC);
    for v in [p as u64, r as u64, header.seed] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&header.digest);
    buf.extend_from_slice(&samples.accept_rate.to_le_bytes());
    for &id in &samples.feature_ids {
        buf.extend_from_slice(&(id as u64).to_le_bytes());
    }
    for v in samples.intercepts.iter().chain(samples.draws.as_slice()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FbrhtError::Format(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_samples(bytes: &[u8]) -> Result<(SampleMatrix, SampleHeader)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(6)? != MAGIC {
        return Err(FbrhtError::Format("bad magic bytes".into()));
    }
    let p = c.u64()? as usize;
    let r = c.u64()? as usize;
    let seed = c.u64()?;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(c.take(32)?);
    let accept_rate = c.f64()?;
    let expected = p
        .checked_mul(r)
        .and_then(|pr| pr.checked_add(p + r))
        .and_then(|k| k.checked_mul(8))
        .ok_or_else(|| FbrhtError::Format("header sizes overflow".into()))?;
    if bytes.len() - c.pos != expected {
        return Err(FbrhtError::Format(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - c.pos
        )));
    }
    let feature_ids = (0..p).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let intercepts = (0..r).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let draws = (0..p * r).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    Ok((
        SampleMatrix { draws: DMatrix::from_vec(p, r, draws), intercepts, feature_ids, accept_rate },
        SampleHeader { seed, digest },
    ))
}

pub fn write_samples(path: &Path, samples: &SampleMatrix, header: &SampleHeader) -> Result<()> {
    write_atomic(path, &encode_samples(samples, header))
}

/// Read a sample file; when `expected` is given, a different stored digest is
/// an error.
pub fn read_samples(path: &Path, expected: Option<&ConfigDigest>) -> Result<(SampleMatrix, SampleHeader)> {
    let (samples, header) = decode_samples(&fs::read(path)?)?;
    if let Some(d) = expected {
        if &header.digest != d {
            return Err(FbrhtError::Config(format!(
                "{} was produced under a different configuration",
                path.display()
            )));
        }
    }
    Ok((samples, header))
}
