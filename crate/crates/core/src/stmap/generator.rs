//! Synthetic multi-domain STMap generator. Each subject is a continuous
//! trace: a phase-integrated pulse whose instantaneous frequency carries
//! respiratory sinus arrhythmia, a respiratory baseline wander, per-row
//! amplitude factors and additive sensor noise. Channel modulation
//! depths are chosen so the red/blue AC-to-DC ratio matches the SpO2
//! ratio model exactly on every pre-noise window.

use super::format::{write_manifest, write_stmap, DomainManifest, ManifestEntry};
use super::{LabelMask, StMap, VitalLabels};
use crate::rng::Rng;
use crate::{Error, Result};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::path::Path;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    /// Ratio-model intercept.
    pub wa: f32,
    /// Ratio-model slope.
    pub wb: f32,
    /// Heart-rate range, beats/min.
    pub hr_range: (f32, f32),
    /// Respiration-rate range, breaths/min.
    pub rr_range: (f32, f32),
    /// SpO2 range, percent; must stay within [80, 100].
    pub spo2_range: (f32, f32),
    /// Fractional HR modulation by respiration.
    pub rsa_depth: f32,
    /// Additive noise sigma, intensity units.
    pub noise_sigma: f32,
    /// Base channel intensities (R, G, B).
    pub dc: [f32; 3],
    /// Blue-channel AC/DC modulation depth; red scales by the SpO2 ratio.
    pub ac_scale: f32,
    /// Illumination gain.
    pub gain: f32,
    /// Per-channel chroma gains (R, G, B).
    pub chroma: [f32; 3],
    /// Baseline-wander amplitude relative to the pulse AC.
    pub wander_scale: f32,
    pub rows: usize,
    pub frames: usize,
    pub fps: u8,
    /// Trailing frames generated beyond the last window so the
    /// augmentation shift always has a source.
    pub aug_reserve: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            wa: 100.0,
            wb: 5.0,
            hr_range: (50.0, 110.0),
            rr_range: (8.0, 24.0),
            spo2_range: (90.0, 99.0),
            rsa_depth: 0.05,
            noise_sigma: 0.8,
            dc: [150.0, 160.0, 140.0],
            ac_scale: 0.05,
            gain: 1.0,
            chroma: [1.0, 1.0, 1.0],
            wander_scale: 0.3,
            rows: 25,
            frames: 256,
            fps: 30,
            aug_reserve: 60,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("hr_range", self.hr_range),
            ("rr_range", self.rr_range),
            ("spo2_range", self.spo2_range),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name}: invalid range {lo}..{hi}")));
            }
        }
        if self.spo2_range.0 < 80.0 || self.spo2_range.1 > 100.0 {
            return Err(Error::Config(format!(
                "spo2_range {:?} outside the plausible [80, 100] band",
                self.spo2_range
            )));
        }
        if self.rows == 0 || self.frames == 0 || self.fps == 0 {
            return Err(Error::Config("rows, frames and fps must be positive".into()));
        }
        if self.ac_scale <= 0.0 || self.dc.iter().any(|&d| d <= 0.0) {
            return Err(Error::Config("dc and ac_scale must be positive".into()));
        }
        Ok(())
    }

    fn sample_range(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    }
}

/// A subject's continuous physiological trace; windows cut from it share
/// phase, wander and noise.
#[derive(Debug, Clone)]
pub struct SubjectTrace {
    pub params: GeneratorParams,
    pub hr: f32,
    pub rr: f32,
    pub spo2: f32,
    pub total_frames: usize,
    /// Raw pulse waveform over the whole trace.
    pulse: Vec<f32>,
    /// Respiratory wander waveform over the whole trace.
    wander: Vec<f32>,
    /// Per-row AC amplitude factors.
    rho: Vec<f32>,
    /// Additive noise, [row][frame][channel].
    noise: Vec<f32>,
}

impl SubjectTrace {
    pub fn generate(params: &GeneratorParams, seed: u64, total_frames: usize) -> Result<Self> {
        params.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let hr = GeneratorParams::sample_range(&mut rng, params.hr_range);
        let rr = GeneratorParams::sample_range(&mut rng, params.rr_range);
        let spo2 = GeneratorParams::sample_range(&mut rng, params.spo2_range);
        let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let wander_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

        let fps = params.fps as f64;
        let f_h = hr as f64 / 60.0;
        let f_r = rr as f64 / 60.0;
        let mut phase = phase0;
        let mut pulse = Vec::with_capacity(total_frames);
        let mut wander = Vec::with_capacity(total_frames);
        for t in 0..total_frames {
            let ts = t as f64 / fps;
            let f_inst =
                f_h * (1.0 + params.rsa_depth as f64 * (std::f64::consts::TAU * f_r * ts).sin());
            phase += std::f64::consts::TAU * f_inst / fps;
            pulse.push((2.0 * (phase.cos() - 1.0)).exp() as f32);
            wander.push((std::f64::consts::TAU * f_r * ts + wander_phase).sin() as f32);
        }

        let rho: Vec<f32> = (0..params.rows)
            .map(|_| rng.gen_range(0.85..1.15))
            .collect();

        let normal = Normal::new(0.0f32, params.noise_sigma.max(0.0)).unwrap();
        let noise: Vec<f32> = if params.noise_sigma > 0.0 {
            (0..params.rows * total_frames * 3)
                .map(|_| normal.sample(&mut rng))
                .collect()
        } else {
            vec![0.0; params.rows * total_frames * 3]
        };

        Ok(SubjectTrace {
            params: params.clone(),
            hr,
            rr,
            spo2,
            total_frames,
            pulse,
            wander,
            rho,
            noise,
        })
    }

    /// Per-channel modulation depths; red carries the SpO2 ratio.
    fn depths(&self) -> [f32; 3] {
        let ratio = (self.params.wa - self.spo2) / self.params.wb;
        [
            self.params.ac_scale * ratio,
            self.params.ac_scale,
            self.params.ac_scale,
        ]
    }

    fn window_bounds(&self, start: usize, len: usize) -> Result<()> {
        if start + len > self.total_frames {
            return Err(Error::Invalid(format!(
                "window {start}+{len} beyond trace of {} frames",
                self.total_frames
            )));
        }
        Ok(())
    }

    /// Unnormalized window intensities. The shared modulation is
    /// standardized over the window, so each channel's mean is exactly
    /// gain·chroma·dc and its standard deviation scales with the
    /// channel depth; the pre-noise AC/DC ratios invert the SpO2 model
    /// exactly.
    pub fn window_raw(&self, start: usize, len: usize, with_noise: bool) -> Result<StMap> {
        self.window_bounds(start, len)?;
        let p = &self.pulse[start..start + len];
        let w = &self.wander[start..start + len];
        let q = standardize(p);
        let wz = standardize(w);
        let mut z: Vec<f32> = q
            .iter()
            .zip(&wz)
            .map(|(a, b)| a + self.params.wander_scale * b)
            .collect();
        z = standardize(&z);

        let depths = self.depths();
        let mut map = StMap::new(self.params.rows, len, 3, self.params.fps);
        for r in 0..self.params.rows {
            let rho = self.rho[r];
            for (t, &zt) in z.iter().enumerate() {
                for c in 0..3 {
                    let base = self.params.gain * self.params.chroma[c] * self.params.dc[c];
                    let mut v = base * (1.0 + rho * depths[c] * zt);
                    if with_noise {
                        v += self.noise[(r * self.total_frames + (start + t)) * 3 + c];
                    }
                    map.set(r, t, c, v);
                }
            }
        }
        Ok(map)
    }

    /// Ground-truth labels for a window; the bvp is the standardized
    /// clean pulse. The mask is all-true; domain masks are applied by
    /// the caller.
    pub fn window_labels(&self, start: usize, len: usize) -> Result<VitalLabels> {
        self.window_bounds(start, len)?;
        let q = standardize(&self.pulse[start..start + len]);
        Ok(VitalLabels {
            hr: self.hr,
            spo2: self.spo2,
            rr: self.rr,
            bvp: q,
            mask: LabelMask::all(),
        })
    }

    /// Normalized window plus labels, the generator's standard output.
    pub fn window(&self, start: usize) -> Result<(StMap, VitalLabels)> {
        let len = self.params.frames;
        let raw = self.window_raw(start, len, true)?;
        Ok((raw.normalize_rows(), self.window_labels(start, len)?))
    }
}

fn standardize(x: &[f32]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter()
        .map(|&v| ((v as f64 - mean) / sd) as f32)
        .collect()
}

/// One window directly from parameters, mask all-true.
pub fn generate_window(params: &GeneratorParams, seed: u64) -> Result<(StMap, VitalLabels)> {
    let trace = SubjectTrace::generate(params, seed, params.frames)?;
    trace.window(0)
}

/// Everything needed to materialize one synthetic domain.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub domain_id: String,
    pub label_mask: LabelMask,
    pub params: GeneratorParams,
    pub n_subjects: u32,
    pub windows_per_subject: u32,
    pub window_step: usize,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            domain_id: "domain0".into(),
            label_mask: LabelMask::all(),
            params: GeneratorParams::default(),
            n_subjects: 20,
            windows_per_subject: 3,
            window_step: 10,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn trace_frames(&self) -> usize {
        (self.windows_per_subject.max(1) as usize - 1) * self.window_step
            + self.params.frames
            + self.params.aug_reserve
    }

    pub fn subject_seed(&self, subject: u32) -> u64 {
        use rand::RngCore as _;
        crate::rng::for_path(self.seed, &format!("{}/subject{subject}", self.domain_id))
            .next_u64()
    }

    /// Regenerate a subject's trace, identical to the one used when the
    /// domain was built.
    pub fn trace(&self, subject: u32) -> Result<SubjectTrace> {
        SubjectTrace::generate(&self.params, self.subject_seed(subject), self.trace_frames())
    }
}

/// Generate a domain's windows under `out_dir/<domain_id>/`, write the
/// manifest, and return it (entry paths absolute).
pub fn build_domain(spec: &DomainSpec, out_dir: &Path) -> Result<DomainManifest> {
    spec.params.validate()?;
    if spec.n_subjects == 0 || spec.windows_per_subject == 0 {
        return Err(Error::Config(
            "n_subjects and windows_per_subject must be positive".into(),
        ));
    }
    let dir = out_dir.join(&spec.domain_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut entries = Vec::new();
    for subject in 0..spec.n_subjects {
        let trace = spec.trace(subject)?;
        for w in 0..spec.windows_per_subject {
            let start = w as usize * spec.window_step;
            let (map, mut labels) = trace.window(start)?;
            labels.mask = spec.label_mask;
            if !labels.mask.hr {
                labels.hr = 0.0;
            }
            if !labels.mask.spo2 {
                labels.spo2 = 0.0;
            }
            if !labels.mask.rr {
                labels.rr = 0.0;
            }
            let name = format!("win_s{subject:02}_t{start:05}.pmle");
            write_stmap(&dir.join(&name), &map, &labels)?;
            entries.push(ManifestEntry {
                path: name.into(),
                domain_id: spec.domain_id.clone(),
                subject_id: subject,
                window_start: start,
            });
        }
    }

    let manifest = DomainManifest {
        domain_id: spec.domain_id.clone(),
        label_mask: spec.label_mask,
        generator_params: spec.params.clone(),
        seed: spec.seed,
        n_subjects: spec.n_subjects,
        windows_per_subject: spec.windows_per_subject,
        window_step: spec.window_step,
        entries,
    };
    write_manifest(&dir, &manifest)?;

    let mut absolute = manifest;
    for e in absolute.entries.iter_mut() {
        e.path = dir.join(&e.path);
    }
    Ok(absolute)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal;
    use crate::stmap::invert_spo2;

    fn fixed_spo2_params(spo2: f32) -> GeneratorParams {
        GeneratorParams {
            spo2_range: (spo2, spo2),
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn spo2_95_gives_unit_ratio_pre_noise() {
        let params = fixed_spo2_params(95.0);
        let trace = SubjectTrace::generate(&params, 42, 256).unwrap();
        let raw = trace.window_raw(0, 256, false).unwrap();
        let (dc_r, ac_r) = raw.channel_stats(0);
        let (dc_b, ac_b) = raw.channel_stats(2);
        let ratio = (ac_r / dc_r) / (ac_b / dc_b);
        assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn spo2_inversion_recovers_to_1e4_across_band() {
        for (i, spo2) in [80.0f32, 84.5, 90.0, 93.25, 97.0, 100.0].into_iter().enumerate() {
            let params = fixed_spo2_params(spo2);
            let trace = SubjectTrace::generate(&params, 100 + i as u64, 256).unwrap();
            let raw = trace.window_raw(0, 256, false).unwrap();
            let rec = invert_spo2(&raw, params.wa, params.wb);
            assert!(
                (rec - spo2 as f64).abs() < 1e-4,
                "spo2 {spo2} recovered {rec}"
            );
        }
    }

    #[test]
    fn findpeak_hr_matches_label_without_rsa() {
        let params = GeneratorParams {
            hr_range: (72.0, 72.0),
            rsa_depth: 0.0,
            ..GeneratorParams::default()
        };
        let (_, labels) = generate_window(&params, 7).unwrap();
        let peaks = signal::find_peaks(&labels.bvp, params.fps as f32).unwrap();
        let hr = signal::hr_from_peaks(&peaks).unwrap();
        assert!((hr - 72.0).abs() <= 1.0, "hr {hr}");
    }

    #[test]
    fn findpeak_hr_within_2bpm_with_rsa() {
        for seed in 0..8u64 {
            let params = GeneratorParams::default();
            let (_, labels) = generate_window(&params, seed).unwrap();
            let peaks = signal::find_peaks(&labels.bvp, params.fps as f32).unwrap();
            let hr = signal::hr_from_peaks(&peaks).unwrap();
            assert!(
                (hr - labels.hr).abs() <= 2.0,
                "seed {seed}: label {} vs peaks {hr}",
                labels.hr
            );
        }
    }

    #[test]
    fn rr_pipeline_recovers_label_from_clean_bvp() {
        let params = GeneratorParams {
            rr_range: (15.0, 15.0),
            rsa_depth: 0.05,
            ..GeneratorParams::default()
        };
        let (_, labels) = generate_window(&params, 21).unwrap();
        let rr = signal::rr_from_bvp(&labels.bvp, params.fps as f32).unwrap();
        assert!(
            (rr.breaths_per_min - 15.0).abs() <= 1.5,
            "rr {}",
            rr.breaths_per_min
        );
    }

    #[test]
    fn domain_build_counts_and_mask_propagation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec {
            domain_id: "d0".into(),
            label_mask: LabelMask {
                hr: true,
                bvp: true,
                spo2: false,
                rr: false,
            },
            n_subjects: 2,
            windows_per_subject: 3,
            seed: 5,
            ..DomainSpec::default()
        };
        let manifest = build_domain(&spec, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        for e in &manifest.entries {
            let (_, labels) = crate::stmap::read_stmap(&e.path).unwrap();
            assert_eq!(labels.mask, spec.label_mask);
            assert_eq!(labels.spo2, 0.0);
            assert_eq!(labels.rr, 0.0);
            assert!(labels.hr > 0.0);
        }
        // window sampling: consecutive windows of a subject overlap by
        // frames − step
        let starts: Vec<usize> = manifest
            .entries
            .iter()
            .filter(|e| e.subject_id == 0)
            .map(|e| e.window_start)
            .collect();
        assert_eq!(starts, vec![0, 10, 20]);
    }

    #[test]
    fn gain_scales_mean_green_dc() {
        let mk = |gain: f32, seed: u64| {
            let params = GeneratorParams {
                gain,
                ..GeneratorParams::default()
            };
            let trace = SubjectTrace::generate(&params, seed, 256).unwrap();
            let raw = trace.window_raw(0, 256, true).unwrap();
            raw.channel_stats(1).0
        };
        let lo = mk(1.0, 3);
        let hi = mk(1.6, 4);
        let ratio = hi / lo;
        assert!((ratio - 1.6).abs() / 1.6 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn shifted_window_keeps_subject_hr() {
        let spec = DomainSpec::default();
        let trace = spec.trace(0).unwrap();
        let y = trace.window_labels(0, 256).unwrap();
        let y2 = trace.window_labels(30, 256).unwrap();
        assert_eq!(y.hr, y2.hr);
        assert_eq!(y.spo2, y2.spo2);
    }

    #[test]
    fn out_of_band_spo2_range_is_rejected() {
        let params = GeneratorParams {
            spo2_range: (70.0, 100.0),
            ..GeneratorParams::default()
        };
        assert!(params.validate().is_err());
        let params = GeneratorParams {
            hr_range: (100.0, 50.0),
            ..GeneratorParams::default()
        };
        assert!(params.validate().is_err());
    }

    #[test]
    fn trace_regeneration_is_deterministic() {
        let spec = DomainSpec::default();
        let a = spec.trace(3).unwrap();
        let b = spec.trace(3).unwrap();
        assert_eq!(a.hr, b.hr);
        let wa = a.window_raw(10, 256, true).unwrap();
        let wb = b.window_raw(10, 256, true).unwrap();
        assert_eq!(wa.values, wb.values);
    }
}
