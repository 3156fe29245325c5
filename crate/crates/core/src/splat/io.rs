use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Gaussian, GaussianScene, PARAMS};
use crate::error::{Error, Result};

pub const EGSP_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EGSP";
const RECORD: usize = PARAMS * 4;

/// Header (magic, version, count, reserved) then 14 f32 per Gaussian:
/// position, log_scale, rotation wxyz, opacity_logit, rgb.
pub fn write_egsp(scene: &GaussianScene, w: &mut impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + RECORD * scene.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&EGSP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for g in &scene.gaussians {
        for v in g.to_params() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<egsp>", e))
}

pub fn read_egsp(r: &mut impl Read, timestamp: u32) -> Result<GaussianScene> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<egsp>", e))?;
    if bytes.len() < 16 {
        return Err(Error::format(
            "EGSP",
            format!("header needs 16 bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("EGSP", "bad magic at byte 0"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EGSP_VERSION {
        return Err(Error::format(
            "EGSP",
            format!("unsupported version {version}"),
        ));
    }
    let count = u32_at(8) as usize;
    let expected = 16 + count * RECORD;
    if bytes.len() != expected {
        return Err(Error::format(
            "EGSP",
            format!(
                "expected {expected} bytes for {count} records, got {}",
                bytes.len()
            ),
        ));
    }
    let gaussians = bytes[16..]
        .chunks_exact(RECORD)
        .map(|rec| {
            let mut p = [0.0; PARAMS];
            for (i, c) in rec.chunks_exact(4).enumerate() {
                p[i] = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            Gaussian::from_params(&p)
        })
        .collect();
    Ok(GaussianScene::new(gaussians, timestamp))
}

impl GaussianScene {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_egsp(self, &mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, timestamp: u32) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_egsp(&mut BufReader::new(f), timestamp)
    }

    /// Parameters rounded through f32, as stored in EGSP.
    pub fn quantized(&self) -> Self {
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| Gaussian::from_params(&g.to_params().map(|v| v as f32 as f64)))
            .collect();
        Self::new(gaussians, self.timestamp)
    }
}
