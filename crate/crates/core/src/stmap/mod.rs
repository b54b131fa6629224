//! Spatial-temporal maps: the input container, per-row normalization,
//! row-axis resizing, spatio-temporal augmentation, the binary file
//! format and domain manifests, plus the synthetic multi-domain
//! generator with ground-truth vitals.

mod format;
mod generator;

pub use format::{read_manifest, read_stmap, write_manifest, write_stmap, DomainManifest, ManifestEntry};
pub use generator::{build_domain, generate_window, DomainSpec, GeneratorParams, SubjectTrace};

use crate::rng::Rng;
use crate::{Error, Result};
use rand::seq::SliceRandom;

/// Which vital labels a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct LabelMask {
    pub hr: bool,
    pub bvp: bool,
    pub spo2: bool,
    pub rr: bool,
}

impl LabelMask {
    pub fn all() -> Self {
        LabelMask {
            hr: true,
            bvp: true,
            spo2: true,
            rr: true,
        }
    }

    pub fn bits(&self) -> u8 {
        (self.hr as u8) | (self.bvp as u8) << 1 | (self.spo2 as u8) << 2 | (self.rr as u8) << 3
    }

    pub fn from_bits(b: u8) -> Self {
        LabelMask {
            hr: b & 1 != 0,
            bvp: b & 2 != 0,
            spo2: b & 4 != 0,
            rr: b & 8 != 0,
        }
    }
}

impl std::fmt::Display for LabelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.hr {
            parts.push("HR");
        }
        if self.bvp {
            parts.push("BVP");
        }
        if self.spo2 {
            parts.push("SpO2");
        }
        if self.rr {
            parts.push("RR");
        }
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Ground-truth vitals for one window. Masked-off fields hold
/// placeholder values and are ignored by losses and metrics.
#[derive(Debug, Clone)]
pub struct VitalLabels {
    pub hr: f32,
    pub spo2: f32,
    pub rr: f32,
    pub bvp: Vec<f32>,
    pub mask: LabelMask,
}

/// ROI-by-frame color grid. `values` is row-major `[row][frame][channel]`
/// with channels in R, G, B order. Raw generator output is unnormalized;
/// [`StMap::normalize_rows`] maps each row onto [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct StMap {
    pub rows: usize,
    pub frames: usize,
    pub channels: usize,
    pub fps: u8,
    pub values: Vec<f32>,
}

impl StMap {
    pub fn new(rows: usize, frames: usize, channels: usize, fps: u8) -> Self {
        StMap {
            rows,
            frames,
            channels,
            fps,
            values: vec![0.0; rows * frames * channels],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, frame: usize, chan: usize) -> usize {
        (row * self.frames + frame) * self.channels + chan
    }

    #[inline]
    pub fn get(&self, row: usize, frame: usize, chan: usize) -> f32 {
        self.values[self.idx(row, frame, chan)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, frame: usize, chan: usize, v: f32) {
        let i = self.idx(row, frame, chan);
        self.values[i] = v;
    }

    fn row_slice(&self, row: usize) -> &[f32] {
        let stride = self.frames * self.channels;
        &self.values[row * stride..(row + 1) * stride]
    }

    /// Min-max normalize each row (jointly over frames and channels)
    /// onto [0, 255]; constant rows become 127.5. Idempotent.
    pub fn normalize_rows(&self) -> StMap {
        let mut out = self.clone();
        let stride = self.frames * self.channels;
        for r in 0..self.rows {
            let row = &self.values[r * stride..(r + 1) * stride];
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in row {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let dst = &mut out.values[r * stride..(r + 1) * stride];
            if lo == 0.0 && hi == 255.0 {
                continue;
            }
            if hi > lo {
                let span = hi - lo;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - lo) / span * 255.0;
                }
            } else {
                dst.fill(127.5);
            }
        }
        out
    }

    /// Linear interpolation along the row axis only.
    pub fn resize_rows(&self, target_rows: usize) -> Result<StMap> {
        if target_rows == 0 {
            return Err(Error::Invalid("target_rows must be >= 1".into()));
        }
        if target_rows == self.rows {
            return Ok(self.clone());
        }
        let mut out = StMap::new(target_rows, self.frames, self.channels, self.fps);
        let stride = self.frames * self.channels;
        for i in 0..target_rows {
            let p = if target_rows == 1 {
                0.0
            } else {
                i as f64 * (self.rows - 1) as f64 / (target_rows - 1) as f64
            };
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(self.rows - 1);
            let w = (p - lo as f64) as f32;
            let src_lo = &self.values[lo * stride..(lo + 1) * stride];
            let src_hi = &self.values[hi * stride..(hi + 1) * stride];
            let dst = &mut out.values[i * stride..(i + 1) * stride];
            for ((d, &a), &b) in dst.iter_mut().zip(src_lo).zip(src_hi) {
                *d = a + w * (b - a);
            }
        }
        Ok(out)
    }

    /// Channel mean and standard deviation over all rows and frames.
    pub fn channel_stats(&self, chan: usize) -> (f64, f64) {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        let mut n = 0usize;
        for r in 0..self.rows {
            for t in 0..self.frames {
                let v = self.get(r, t, chan) as f64;
                s += v;
                s2 += v * v;
                n += 1;
            }
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

/// Invert the ratio model on a raw (pre-noise) window: channel AC is the
/// standard deviation, DC the mean; spo2 = wa − wb · (AC_R/DC_R)/(AC_B/DC_B).
pub fn invert_spo2(map: &StMap, wa: f32, wb: f32) -> f64 {
    let (dc_r, ac_r) = map.channel_stats(0);
    let (dc_b, ac_b) = map.channel_stats(2);
    wa as f64 - wb as f64 * (ac_r / dc_r) / (ac_b / dc_b)
}

/// Window-advance plus row-shuffle augmentation: take the window
/// `[shift, shift+window)` from a longer source map and permute whole
/// rows by `perm`.
pub fn augment_with_perm(
    x: &StMap,
    shift: usize,
    window: usize,
    perm: &[usize],
) -> Result<StMap> {
    if x.frames < shift + window {
        return Err(Error::Invalid(format!(
            "insufficient trailing frames: have {}, need {}",
            x.frames,
            shift + window
        )));
    }
    if perm.len() != x.rows {
        return Err(Error::Invalid(format!(
            "permutation length {} != rows {}",
            perm.len(),
            x.rows
        )));
    }
    let mut out = StMap::new(x.rows, window, x.channels, x.fps);
    for (dst_row, &src_row) in perm.iter().enumerate() {
        if src_row >= x.rows {
            return Err(Error::Invalid(format!("row index {src_row} out of range")));
        }
        let src = x.row_slice(src_row);
        let begin = shift * x.channels;
        let end = (shift + window) * x.channels;
        let stride = window * x.channels;
        out.values[dst_row * stride..(dst_row + 1) * stride]
            .copy_from_slice(&src[begin..end]);
    }
    Ok(out)
}

/// Augmentation with a random row permutation drawn from `rng`.
pub fn augment(x: &StMap, shift: usize, window: usize, rng: &mut Rng) -> Result<StMap> {
    let mut perm: Vec<usize> = (0..x.rows).collect();
    perm.shuffle(rng);
    augment_with_perm(x, shift, window, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_map() -> StMap {
        let mut m = StMap::new(25, 64, 3, 30);
        for r in 0..25 {
            for t in 0..64 {
                for c in 0..3 {
                    let v = 100.0
                        + 40.0 * ((r as f32) / 24.0 * std::f32::consts::PI).sin()
                        + 10.0 * ((t as f32) / 10.0).cos()
                        + c as f32 * 5.0;
                    m.set(r, t, c, v);
                }
            }
        }
        m
    }

    #[test]
    fn normalize_rows_hits_bounds_and_is_idempotent() {
        let m = smooth_map();
        let n1 = m.normalize_rows();
        for r in 0..n1.rows {
            let row = n1.row_slice(r);
            let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 255.0);
        }
        let n2 = n1.normalize_rows();
        assert_eq!(n1, n2);
    }

    #[test]
    fn constant_row_normalizes_to_midpoint() {
        let mut m = StMap::new(2, 8, 3, 30);
        for t in 0..8 {
            for c in 0..3 {
                m.set(0, t, c, 42.0);
                m.set(1, t, c, t as f32);
            }
        }
        let n = m.normalize_rows();
        assert!(n.row_slice(0).iter().all(|&v| v == 127.5));
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = smooth_map();
        let same = m.resize_rows(25).unwrap();
        assert_eq!(m, same);

        let mut flat = StMap::new(4, 8, 3, 30);
        flat.values.fill(7.0);
        let up = flat.resize_rows(9).unwrap();
        assert!(up.values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn resize_round_trip_deviation_is_small() {
        let m = smooth_map();
        let up = m.resize_rows(64).unwrap();
        let back = up.resize_rows(25).unwrap();
        let max_dev = m
            .values
            .iter()
            .zip(&back.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 10.0, "max deviation {max_dev}");
    }

    #[test]
    fn augment_identity() {
        let m = smooth_map();
        let perm: Vec<usize> = (0..25).collect();
        let out = augment_with_perm(&m, 0, 64, &perm).unwrap();
        assert_eq!(m, out);
    }

    #[test]
    fn augment_preserves_row_multiset() {
        let m = smooth_map();
        let mut rng = crate::rng::seeded(3);
        let out = augment(&m, 0, 64, &mut rng).unwrap();
        let mut src: Vec<Vec<u32>> = (0..25)
            .map(|r| m.row_slice(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut dst: Vec<Vec<u32>> = (0..25)
            .map(|r| out.row_slice(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        src.sort();
        dst.sort();
        assert_eq!(src, dst);
    }

    #[test]
    fn augment_rejects_short_source() {
        let m = smooth_map();
        let perm: Vec<usize> = (0..25).collect();
        assert!(augment_with_perm(&m, 30, 64, &perm).is_err());
    }
}
