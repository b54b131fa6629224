//! Binary STMap files and JSONL domain manifests.
//!
//! File layout (little-endian):
//! magic "PMLE", version u16 = 1, rows u16, frames u32, channels u8,
//! fps u8, label mask u8 (bit0 HR, bit1 BVP, bit2 SpO2, bit3 RR),
//! hr f32, spo2 f32, rr f32, bvp f32[frames] (zeros if absent),
//! values f32[rows·frames·channels] row-major.

use super::generator::GeneratorParams;
use super::{LabelMask, StMap, VitalLabels};
use crate::{Error, Result};
use std::io::Write as _;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"PMLE";
const VERSION: u16 = 1;

pub fn write_stmap(path: &Path, map: &StMap, labels: &VitalLabels) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(32 + 4 * (labels.bvp.len() + map.values.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.rows as u16).to_le_bytes());
    buf.extend_from_slice(&(map.frames as u32).to_le_bytes());
    buf.push(map.channels as u8);
    buf.push(map.fps);
    buf.push(labels.mask.bits());
    buf.extend_from_slice(&labels.hr.to_le_bytes());
    buf.extend_from_slice(&labels.spo2.to_le_bytes());
    buf.extend_from_slice(&labels.rr.to_le_bytes());
    if labels.mask.bvp {
        debug_assert_eq!(labels.bvp.len(), map.frames);
        for v in &labels.bvp {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        buf.extend_from_slice(&vec![0u8; 4 * map.frames]);
    }
    for v in &map.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_stmap(path: &Path) -> Result<(StMap, VitalLabels)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            version,
        });
    }
    let rows = c.u16()? as usize;
    let frames = c.u32()? as usize;
    let channels = c.u8()? as usize;
    let fps = c.u8()?;
    let mask = LabelMask::from_bits(c.u8()?);
    let hr = c.f32()?;
    let spo2 = c.f32()?;
    let rr = c.f32()?;
    let bvp = c.f32_vec(frames)?;
    let values = c.f32_vec(rows * frames * channels)?;
    Ok((
        StMap {
            rows,
            frames,
            channels,
            fps,
            values,
        },
        VitalLabels {
            hr,
            spo2,
            rr,
            bvp,
            mask,
        },
    ))
}

/// One dataset window as listed in a manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain_id: String,
    pub subject_id: u32,
    pub window_start: usize,
}

/// A synthetic domain: its label availability, the generator settings
/// that produced it, and the windows on disk. All entries share the
/// domain's label mask.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainManifest {
    pub domain_id: String,
    pub label_mask: LabelMask,
    pub generator_params: GeneratorParams,
    pub seed: u64,
    pub n_subjects: u32,
    pub windows_per_subject: u32,
    pub window_step: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Write `<dir>/domain.json` (everything but the entries) and
/// `<dir>/manifest.jsonl` (one JSON entry per line).
pub fn write_manifest(dir: &Path, manifest: &DomainManifest) -> Result<()> {
    let meta_path = dir.join("domain.json");
    let mut meta = manifest.clone();
    meta.entries.clear();
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Invalid(format!("manifest meta: {e}")))?;
    std::fs::write(&meta_path, meta_json).map_err(|e| Error::io(&meta_path, e))?;

    let lines_path = dir.join("manifest.jsonl");
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(
            &serde_json::to_string(e).map_err(|e| Error::Invalid(format!("manifest entry: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(&lines_path, out).map_err(|e| Error::io(&lines_path, e))?;
    Ok(())
}

/// Read a domain directory written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<DomainManifest> {
    let meta_path = dir.join("domain.json");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut manifest: DomainManifest = serde_json::from_str(&meta)
        .map_err(|e| Error::Invalid(format!("{}: {e}", meta_path.display())))?;
    let lines_path = dir.join("manifest.jsonl");
    let lines = std::fs::read_to_string(&lines_path).map_err(|e| Error::io(&lines_path, e))?;
    for line in lines.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Invalid(format!("{}: {e}", lines_path.display())))?;
        manifest.entries.push(entry);
    }
    Ok(manifest)
}
