//! Classical pulse-signal processing: peak detection, HR from inter-beat
//! statistics, respiration rate from the high-frequency band of the IBI
//! spectrum, HRV band metrics and Pearson correlation.

use crate::{Error, Result};

/// Detected peak positions of a pulse signal.
#[derive(Debug, Clone)]
pub struct PeakList {
    /// Ascending sample indices.
    pub indices: Vec<usize>,
    /// Sampling rate in Hz.
    pub fs: f32,
}

/// One-sided power spectrum on the DFT grid.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub frequencies: Vec<f32>,
    pub power: Vec<f32>,
}

/// Respiration-rate estimate with its spectral support.
#[derive(Debug, Clone, Copy)]
pub struct RrEstimate {
    pub breaths_per_min: f32,
    /// Share of total IBI power inside the respiratory band.
    pub band_fraction: f32,
}

impl RrEstimate {
    pub fn is_low_confidence(&self) -> bool {
        self.band_fraction < 0.1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HrvMetrics {
    pub lfnu: f64,
    pub hfnu: f64,
    pub lf_over_hf: f64,
}

pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.4);

/// Ceiling heart rate implied by the minimum inter-peak distance.
const MAX_HR_BPM: f32 = 220.0;

fn min_peak_distance(fs: f32) -> usize {
    (fs * 60.0 / MAX_HR_BPM).floor() as usize
}

/// Local maxima above the signal mean, greedily thinned so surviving
/// peaks are at least `floor(fs·60/220)` samples apart; on conflicts the
/// higher peak wins. A constant signal yields an empty list.
pub fn find_peaks(signal: &[f32], fs: f32) -> Result<PeakList> {
    if (signal.len() as f32) < 2.0 * fs {
        return Err(Error::Invalid(format!(
            "signal too short: {} samples at {fs} Hz",
            signal.len()
        )));
    }
    let mean = signal.iter().map(|&v| v as f64).sum::<f64>() / signal.len() as f64;
    let mut candidates: Vec<usize> = Vec::new();
    for i in 1..signal.len() - 1 {
        if signal[i] > signal[i - 1] && signal[i] >= signal[i + 1] && f64::from(signal[i]) > mean {
            candidates.push(i);
        }
    }
    let dist = min_peak_distance(fs);
    // height-greedy selection, ties broken by earlier index
    candidates.sort_by(|&a, &b| {
        signal[b]
            .partial_cmp(&signal[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut accepted: Vec<usize> = Vec::new();
    for &c in &candidates {
        if accepted.iter().all(|&p| p.abs_diff(c) >= dist.max(1)) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    Ok(PeakList {
        indices: accepted,
        fs,
    })
}

/// Mean heart rate from peak positions: 60·fs·(count−1)/(last−first).
pub fn hr_from_peaks(peaks: &PeakList) -> Result<f32> {
    let n = peaks.indices.len();
    if n < 2 {
        return Err(Error::InsufficientPeaks { found: n, need: 2 });
    }
    let span = (peaks.indices[n - 1] - peaks.indices[0]) as f32;
    Ok(60.0 * peaks.fs * (n - 1) as f32 / span)
}

/// Inter-beat intervals in seconds, stamped at the later peak's time.
pub fn ibi_series(peaks: &PeakList) -> (Vec<f64>, Vec<f64>) {
    let mut times = Vec::new();
    let mut ibis = Vec::new();
    for w in peaks.indices.windows(2) {
        times.push(w[1] as f64 / peaks.fs as f64);
        ibis.push((w[1] - w[0]) as f64 / peaks.fs as f64);
    }
    (times, ibis)
}

/// Linear interpolation of an irregular series onto a uniform grid.
pub fn resample_uniform(times: &[f64], values: &[f64], rate: f64) -> Vec<f64> {
    if times.len() < 2 {
        return values.to_vec();
    }
    let t0 = times[0];
    let t1 = times[times.len() - 1];
    let n = ((t1 - t0) * rate).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let t = t0 + i as f64 / rate;
        while seg + 2 < times.len() && times[seg + 1] < t {
            seg += 1;
        }
        let (ta, tb) = (times[seg], times[seg + 1]);
        let (va, vb) = (values[seg], values[seg + 1]);
        let w = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
        out.push(va + w.clamp(0.0, 1.0) * (vb - va));
    }
    out
}

/// One-sided periodogram on the DFT grid after mean removal. Power is
/// normalized so the bins sum to the time-domain variance.
pub fn periodogram(x: &[f64], fs: f64) -> Spectrum {
    let n = x.len();
    if n < 2 {
        return Spectrum {
            frequencies: vec![],
            power: vec![],
        };
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half);
    let mut power = Vec::with_capacity(half);
    for k in 1..=half {
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for (i, &v) in centered.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        let two_sided = (re * re + im * im) / (n as f64 * n as f64);
        // conjugate bins fold, except at Nyquist for even n
        let fold = if n % 2 == 0 && k == half { 1.0 } else { 2.0 };
        freqs.push((k as f64 * fs / n as f64) as f32);
        power.push((two_sided * fold) as f32);
    }
    Spectrum {
        frequencies: freqs,
        power,
    }
}

/// Power of `x` at one frequency (dense periodogram sample).
fn dtft_power(x: &[f64], fs: f64, f: f64) -> f64 {
    let mut re = 0.0f64;
    let mut im = 0.0f64;
    for (i, &v) in x.iter().enumerate() {
        let ang = -2.0 * std::f64::consts::PI * f * i as f64 / fs;
        re += v * ang.cos();
        im += v * ang.sin();
    }
    (re * re + im * im) / (x.len() as f64 * x.len() as f64)
}

const IBI_RESAMPLE_HZ: f64 = 4.0;

/// IBI series for spectral analysis: peaks → intervals → uniform 4 Hz
/// grid → mean removed.
fn ibi_for_spectrum(bvp: &[f32], fs: f32) -> Result<Vec<f64>> {
    if (bvp.len() as f32) < 8.0 * fs {
        return Err(Error::Invalid(format!(
            "need at least 8 s of signal, got {:.2} s",
            bvp.len() as f32 / fs
        )));
    }
    let peaks = find_peaks(bvp, fs)?;
    if peaks.indices.len() < 6 {
        return Err(Error::InsufficientPeaks {
            found: peaks.indices.len(),
            need: 6,
        });
    }
    let (times, ibis) = ibi_series(&peaks);
    let mut grid = resample_uniform(&times, &ibis, IBI_RESAMPLE_HZ);
    let mean = grid.iter().sum::<f64>() / grid.len() as f64;
    for v in grid.iter_mut() {
        *v -= mean;
    }
    Ok(grid)
}

/// Respiration rate from the high-frequency peak of the IBI spectrum.
/// The band maximum is located by a dense periodogram scan and converted
/// to breaths/min.
pub fn rr_from_bvp(bvp: &[f32], fs: f32) -> Result<RrEstimate> {
    let grid = ibi_for_spectrum(bvp, fs)?;
    let spec = periodogram(&grid, IBI_RESAMPLE_HZ);
    let total: f64 = spec.power.iter().map(|&p| p as f64).sum();
    let (lo, hi) = HF_BAND;
    // dense scan of the band; step well under the ±1.5 breaths/min gate
    let step = 0.0025;
    let mut best_f = lo;
    let mut best_p = -1.0f64;
    let mut f = lo;
    while f <= hi + 1e-9 {
        let p = dtft_power(&grid, IBI_RESAMPLE_HZ, f);
        if p > best_p {
            best_p = p;
            best_f = f;
        }
        f += step;
    }
    let band: f64 = spec
        .frequencies
        .iter()
        .zip(&spec.power)
        .filter(|(fr, _)| (f64::from(**fr)) >= lo && (f64::from(**fr)) <= hi)
        .map(|(_, p)| *p as f64)
        .sum();
    let band_fraction = if total > 0.0 { band / total } else { 0.0 };
    Ok(RrEstimate {
        breaths_per_min: (best_f * 60.0) as f32,
        band_fraction: band_fraction as f32,
    })
}

/// Normalized LF/HF band powers of the IBI spectrum. `Ok(None)` when
/// both bands are empty (undefined metrics).
pub fn hrv_metrics(bvp: &[f32], fs: f32) -> Result<Option<HrvMetrics>> {
    let grid = ibi_for_spectrum(bvp, fs)?;
    let spec = periodogram(&grid, IBI_RESAMPLE_HZ);
    let mut lf = 0.0f64;
    let mut hf = 0.0f64;
    for (fr, p) in spec.frequencies.iter().zip(&spec.power) {
        let f = f64::from(*fr);
        if f >= LF_BAND.0 && f < LF_BAND.1 {
            lf += *p as f64;
        } else if f >= HF_BAND.0 && f <= HF_BAND.1 {
            hf += *p as f64;
        }
    }
    if lf + hf == 0.0 {
        return Ok(None);
    }
    Ok(Some(HrvMetrics {
        lfnu: lf / (lf + hf),
        hfnu: hf / (lf + hf),
        lf_over_hf: if hf > 0.0 { lf / hf } else { f64::INFINITY },
    }))
}

/// Product-moment correlation; `None` when either input has zero
/// variance or lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn pearson32(a: &[f32], b: &[f32]) -> Option<f64> {
    let av: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson(&av, &bv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f32, fs: f32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f32::consts::PI * freq * i as f32 / fs).sin())
            .collect()
    }

    /// Brute-force local-maxima scan with the distance rule applied by
    /// hand; the oracle for `find_peaks`.
    fn peak_oracle(signal: &[f32], fs: f32) -> Vec<usize> {
        let mean = signal.iter().sum::<f32>() / signal.len() as f32;
        let mut cand: Vec<usize> = (1..signal.len() - 1)
            .filter(|&i| {
                signal[i] > signal[i - 1] && signal[i] >= signal[i + 1] && signal[i] > mean
            })
            .collect();
        cand.sort_by(|&a, &b| {
            signal[b]
                .partial_cmp(&signal[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let dist = ((fs * 60.0 / 220.0).floor() as usize).max(1);
        let mut acc: Vec<usize> = Vec::new();
        for c in cand {
            if acc.iter().all(|&p| p.abs_diff(c) >= dist) {
                acc.push(c);
            }
        }
        acc.sort_unstable();
        acc
    }

    #[test]
    fn ten_peaks_for_1_2_hz_sine() {
        let s = sine(1.2, 30.0, 256);
        let p = find_peaks(&s, 30.0).unwrap();
        assert_eq!(p.indices.len(), 10);
        assert_eq!(p.indices, peak_oracle(&s, 30.0));
        for w in p.indices.windows(2) {
            assert!((w[1] - w[0]) as i32 - 25 <= 1);
        }
    }

    #[test]
    fn constant_signal_yields_no_peaks() {
        let s = vec![1.5f32; 128];
        let p = find_peaks(&s, 30.0).unwrap();
        assert!(p.indices.is_empty());
    }

    #[test]
    fn small_ripple_is_suppressed_by_distance_rule() {
        let fs = 30.0;
        let n = 300;
        let s: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f32 / fs;
                (2.0 * std::f32::consts::PI * 1.0 * t).sin()
                    + 0.05 * (2.0 * std::f32::consts::PI * 10.0 * t).sin()
            })
            .collect();
        let p = find_peaks(&s, fs).unwrap();
        let oracle = peak_oracle(&s, fs);
        assert_eq!(p.indices, oracle);
        // one surviving peak per 1.0 Hz cycle
        assert_eq!(p.indices.len(), 10);
    }

    #[test]
    fn hr_from_12hz_sine_is_72() {
        let s = sine(1.2, 30.0, 256);
        let p = find_peaks(&s, 30.0).unwrap();
        let hr = hr_from_peaks(&p).unwrap();
        assert!((hr - 72.0).abs() <= 1.0, "hr={hr}");
    }

    #[test]
    fn hr_of_exact_one_second_spacing_is_60() {
        let p = PeakList {
            indices: (0..8).map(|i| i * 30).collect(),
            fs: 30.0,
        };
        assert_eq!(hr_from_peaks(&p).unwrap(), 60.0);
    }

    #[test]
    fn single_peak_is_an_error() {
        let p = PeakList {
            indices: vec![42],
            fs: 30.0,
        };
        assert!(matches!(
            hr_from_peaks(&p),
            Err(Error::InsufficientPeaks { .. })
        ));
    }

    #[test]
    fn hr_sweep_within_two_bpm() {
        let fs = 30.0;
        for bpm in (48..=180).step_by(6) {
            let f = bpm as f32 / 60.0;
            let s = sine(f, fs, 512);
            let p = find_peaks(&s, fs).unwrap();
            let hr = hr_from_peaks(&p).unwrap();
            assert!((hr - bpm as f32).abs() <= 2.0, "bpm={bpm} hr={hr}");
        }
    }

    /// Synthetic BVP with sinusoidal RSA: instantaneous frequency
    /// f_h·(1 + depth·sin(2π f_r t)), integrated phase.
    fn rsa_bvp(hr_bpm: f32, f_r: f32, depth: f32, fs: f32, n: usize) -> Vec<f32> {
        let fh = hr_bpm / 60.0;
        let mut phase = 0.0f64;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / fs as f64;
            let finst = fh as f64
                * (1.0 + depth as f64 * (2.0 * std::f64::consts::PI * f_r as f64 * t).sin());
            phase += 2.0 * std::f64::consts::PI * finst / fs as f64;
            out.push((2.0 * (phase.cos() - 1.0)).exp() as f32);
        }
        out
    }

    #[test]
    fn rr_recovers_quarter_hz_rsa() {
        let bvp = rsa_bvp(72.0, 0.25, 0.05, 30.0, 900);
        let rr = rr_from_bvp(&bvp, 30.0).unwrap();
        assert!(
            (rr.breaths_per_min - 15.0).abs() <= 1.5,
            "rr={}",
            rr.breaths_per_min
        );
        assert!(!rr.is_low_confidence());
    }

    #[test]
    fn rr_recovers_band_edge() {
        let bvp = rsa_bvp(90.0, 0.4, 0.05, 30.0, 900);
        let rr = rr_from_bvp(&bvp, 30.0).unwrap();
        assert!(
            (rr.breaths_per_min - 24.0).abs() <= 1.5,
            "rr={}",
            rr.breaths_per_min
        );
    }

    #[test]
    fn rr_without_rsa_is_low_confidence() {
        let bvp = rsa_bvp(72.0, 0.25, 0.0, 30.0, 900);
        let rr = rr_from_bvp(&bvp, 30.0).unwrap();
        assert!(rr.band_fraction < 0.1, "fraction={}", rr.band_fraction);
        assert!(rr.is_low_confidence());
    }

    #[test]
    fn hrv_pure_hf_modulation() {
        let bvp = rsa_bvp(75.0, 0.25, 0.06, 30.0, 1800);
        let m = hrv_metrics(&bvp, 30.0).unwrap().unwrap();
        assert!(m.hfnu >= 0.9, "hfnu={}", m.hfnu);
        assert!(m.lfnu <= 0.1, "lfnu={}", m.lfnu);
        assert!((m.lfnu + m.hfnu - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hrv_pure_lf_modulation() {
        let bvp = rsa_bvp(75.0, 0.1, 0.06, 30.0, 1800);
        let m = hrv_metrics(&bvp, 30.0).unwrap().unwrap();
        assert!(m.lf_over_hf >= 5.0, "lf/hf={}", m.lf_over_hf);
    }

    #[test]
    fn periodogram_satisfies_parseval() {
        let mut rng_state = 12345u64;
        let mut noise = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x: Vec<f64> = (0..128).map(|_| noise()).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let spec = periodogram(&x, 4.0);
        let total: f64 = spec.power.iter().map(|&p| p as f64).sum();
        assert!((total - var).abs() / var < 1e-3, "total={total} var={var}");
    }

    #[test]
    fn pearson_identities() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let b = vec![1.0, 3.0, 2.0, 4.0];
        assert!((pearson(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        assert!(pearson(&a, &[2.0, 2.0, 2.0, 2.0]).is_none());
    }

    #[test]
    fn pipeline_is_scale_and_offset_invariant() {
        let bvp = rsa_bvp(66.0, 0.3, 0.05, 30.0, 900);
        let scaled: Vec<f32> = bvp.iter().map(|v| 7.3 * v + 41.0).collect();
        let p1 = find_peaks(&bvp, 30.0).unwrap();
        let p2 = find_peaks(&scaled, 30.0).unwrap();
        assert_eq!(p1.indices, p2.indices);
        let r1 = rr_from_bvp(&bvp, 30.0).unwrap();
        let r2 = rr_from_bvp(&scaled, 30.0).unwrap();
        assert_eq!(r1.breaths_per_min, r2.breaths_per_min);
        let h1 = hrv_metrics(&bvp, 30.0).unwrap().unwrap();
        let h2 = hrv_metrics(&scaled, 30.0).unwrap().unwrap();
        assert!((h1.lfnu - h2.lfnu).abs() < 1e-9);
        let a: Vec<f64> = bvp.iter().map(|&v| v as f64).collect();
        let s: Vec<f64> = scaled.iter().map(|&v| v as f64).collect();
        assert!((pearson(&a, &s).unwrap() - 1.0).abs() < 1e-9);
    }
}
