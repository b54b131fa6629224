//! Training objectives: masked task losses, spatial/temporal consistency
//! terms, physiological priors, and the scheduled joint loss.

use crate::autodiff::{ParamStore, Tape, Tid};
use crate::model::{Predictions, ScalarHead, TASK_HR, TASK_RR, TASK_SPO2};
use crate::rng::Rng;
use crate::signal;
use crate::stmap::LabelMask;
use crate::{Error, Result};
use rand::Rng as _;

/// Trade-off weights and shared loss hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// p1..p9 in HR, SpO2, RR, OEM, Spatial, Temporal, HB, BR, ASp order.
    pub p: [f32; 9],
    /// Deadband for the temporal and breath-rate soft constraints.
    pub delta: f32,
    /// SpO2 augmentation rates.
    pub tau_grid: Vec<f32>,
    /// Admissible augmented-SpO2 band.
    pub spo2_bounds: (f32, f32),
    /// Steepness of the warm-up schedule.
    pub lambda_scale: f32,
    /// Differentiable spectral estimate instead of peak counting in the
    /// heart-rate/BVP prior.
    pub hb_spectral_surrogate: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p: [1.0; 9],
            delta: 5.0,
            tau_grid: vec![0.85, 0.90, 0.95, 1.0, 1.05, 1.10, 1.15],
            spo2_bounds: (80.0, 100.0),
            lambda_scale: 10.0,
            hb_spectral_surrogate: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Warm-up factor: 2/(1+exp(−scale·i/N)) − 1, zero at i = 0 and
/// increasing toward 1.
pub fn lambda_schedule(iter: usize, n_iter: usize, scale: f32) -> f32 {
    if n_iter == 0 {
        return 0.0;
    }
    2.0 / (1.0 + (-scale * iter as f32 / n_iter as f32).exp()) - 1.0
}

/// Per-sample ground truth for one batch.
#[derive(Debug, Clone, Default)]
pub struct BatchLabels {
    pub hr: Vec<f32>,
    pub spo2: Vec<f32>,
    pub rr: Vec<f32>,
    /// Flattened [batch × frames].
    pub bvp: Vec<f32>,
    pub mask: Vec<LabelMask>,
    pub frames: usize,
    pub fps: f32,
}

impl BatchLabels {
    pub fn batch(&self) -> usize {
        self.mask.len()
    }

    fn mask_of(&self, task: usize, b: usize) -> bool {
        match task {
            TASK_HR => self.mask[b].hr,
            TASK_SPO2 => self.mask[b].spo2,
            TASK_RR => self.mask[b].rr,
            _ => self.mask[b].bvp,
        }
    }
}

pub struct TaskLosses {
    pub hr: Tid,
    pub spo2: Tid,
    pub rr: Tid,
    pub bvp: Tid,
}

/// Mean | pred − label | over mask-selected samples; a zero constant
/// when no sample qualifies (no gradient flows).
fn masked_l1(tape: &mut Tape, pred: Tid, labels: &[f32], selected: &[bool]) -> Result<Tid> {
    let n = selected.iter().filter(|&&s| s).count();
    if n == 0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let b = labels.len();
    let lab = tape.constant(vec![b], labels.to_vec())?;
    let sel: Vec<f32> = selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let sel = tape.constant(vec![b], sel)?;
    let d = tape.sub(pred, lab)?;
    let a = tape.abs(d);
    let m = tape.mul(a, sel)?;
    let s = tape.sum(m);
    Ok(tape.scale(s, 1.0 / n as f32))
}

/// L1 losses for the scalar tasks plus the negative-correlation pulse
/// loss, each averaged over its labeled samples.
pub fn task_losses(tape: &mut Tape, preds: &Predictions, labels: &BatchLabels) -> Result<TaskLosses> {
    let b = labels.batch();
    let sel = |task: usize| -> Vec<bool> { (0..b).map(|i| labels.mask_of(task, i)).collect() };
    let hr = masked_l1(tape, preds.hr, &labels.hr, &sel(TASK_HR))?;
    let spo2 = masked_l1(tape, preds.spo2, &labels.spo2, &sel(TASK_SPO2))?;
    let rr = masked_l1(tape, preds.rr, &labels.rr, &sel(TASK_RR))?;

    // 1 − Pearson over labeled pulse signals; both sides standardized,
    // so the correlation is the scaled dot product.
    let n_bvp = (0..b).filter(|&i| labels.mask[i].bvp).count();
    let bvp = if n_bvp == 0 {
        tape.constant_scalar(0.0)
    } else {
        let frames = labels.frames;
        let truth = tape.constant(vec![b, frames], labels.bvp.clone())?;
        let zt = tape.standardize_rows(truth, 1e-6)?;
        let zp = tape.standardize_rows(preds.bvp, 1e-6)?;
        let prod = tape.mul(zp, zt)?;
        let mut rowmask = vec![0.0f32; b * frames];
        for i in 0..b {
            if labels.mask[i].bvp {
                rowmask[i * frames..(i + 1) * frames].fill(1.0);
            }
        }
        let rm = tape.constant(vec![b, frames], rowmask)?;
        let masked = tape.mul(prod, rm)?;
        let s = tape.sum(masked);
        let mean_rho = tape.scale(s, 1.0 / (frames * n_bvp) as f32);
        let neg = tape.scale(mean_rho, -1.0);
        tape.add_const(neg, 1.0)
    };
    Ok(TaskLosses { hr, spo2, rr, bvp })
}

/// Semantically-spatial consistency: for every (sample, channel, row) of
/// each block feature, the negative cosine similarity against a random
/// other row, averaged per block and summed across blocks. Row-partner
/// draws come from `rng` in (block, sample·channel·row) order.
pub fn spatial_loss(tape: &mut Tape, block_feats: &[Tid], rng: &mut Rng) -> Result<Tid> {
    let mut total: Option<Tid> = None;
    for &feat in block_feats {
        let shape = tape.shape(feat).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h < 2 {
            return Err(Error::Shape {
                op: "spatial_loss",
                expected: "spatial extent >= 2".into(),
                got: format!("{h}"),
            });
        }
        let rows = tape.reshape(feat, vec![b * c * h, w])?;
        let mut partners = Vec::with_capacity(b * c * h);
        for bc in 0..b * c {
            for row in 0..h {
                let mut draw = rng.gen_range(0..h - 1);
                if draw >= row {
                    draw += 1;
                }
                partners.push(bc * h + draw);
            }
        }
        let partner_rows = tape.gather_rows(rows, partners)?;
        let cos = tape.cosine_rows(rows, partner_rows)?;
        let s = tape.sum(cos);
        let term = tape.scale(s, -1.0 / (b * c * h) as f32);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("spatial_loss needs at least one feature map".into()))
}

/// Deadband mask (1 where |values| ≥ delta) built from forward values;
/// constant in the graph so in-band terms carry no gradient.
fn deadband_mask(tape: &mut Tape, diff: Tid, delta: f32) -> Result<Tid> {
    let m: Vec<f32> = tape
        .data(diff)
        .iter()
        .map(|v| if v.abs() >= delta { 1.0 } else { 0.0 })
        .collect();
    let shape = tape.shape(diff).to_vec();
    tape.constant(shape, m)
}

/// Temporal smoothness between the two augmentation branches: per
/// sample, the scalar-task differences that exceed the deadband keep
/// their full magnitude; everything inside contributes exactly zero.
pub fn temporal_loss(
    tape: &mut Tape,
    preds: &Predictions,
    preds_aug: &Predictions,
    delta: f32,
) -> Result<Tid> {
    let b = tape.shape(preds.hr)[0];
    let mut acc: Option<Tid> = None;
    for task in [TASK_HR, TASK_SPO2, TASK_RR] {
        let d = tape.sub(preds_aug.scalar(task), preds.scalar(task))?;
        let mask = deadband_mask(tape, d, delta)?;
        let a = tape.abs(d);
        let m = tape.mul(a, mask)?;
        let s = tape.sum(m);
        acc = Some(match acc {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(acc.expect("three tasks"), 1.0 / b as f32))
}

/// SpO2-scaling augmentation prior: for every rate τ whose scaled label
/// stays inside the admissible band, the head must map τ-scaled features
/// to the τ-scaled label. Mean over admitted (sample, τ) pairs.
pub fn asp_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ScalarHead,
    gated_spo: Tid,
    labels: &BatchLabels,
    weights: &LossWeights,
) -> Result<Tid> {
    let b = labels.batch();
    let pooled = {
        let p = tape.adaptive_avg_pool(gated_spo, 1, 1)?;
        let ch = tape.shape(p)[1];
        tape.reshape(p, vec![b, ch])?
    };
    let (lo, hi) = weights.spo2_bounds;
    let mut acc: Option<Tid> = None;
    let mut admitted = 0usize;
    for &tau in &weights.tau_grid {
        let select: Vec<bool> = (0..b)
            .map(|i| {
                let scaled = tau * labels.spo2[i];
                labels.mask[i].spo2 && scaled >= lo && scaled <= hi
            })
            .collect();
        let n = select.iter().filter(|&&s| s).count();
        if n == 0 {
            continue;
        }
        admitted += n;
        let feat = tape.scale(pooled, tau);
        let pred = {
            let w = tape.param(store, head.w);
            let bb = tape.param(store, head.b);
            let y = tape.matmul(feat, w)?;
            let y = tape.scale(y, head.scale);
            let y = tape.add_row_bias(y, bb)?;
            tape.reshape(y, vec![b])?
        };
        let target: Vec<f32> = labels.spo2.iter().map(|&y| tau * y).collect();
        let tgt = tape.constant(vec![b], target)?;
        let selv: Vec<f32> = select.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        let selv = tape.constant(vec![b], selv)?;
        let d = tape.sub(pred, tgt)?;
        let a = tape.abs(d);
        let m = tape.mul(a, selv)?;
        let s = tape.sum(m);
        acc = Some(match acc {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match acc {
        Some(t) if admitted > 0 => Ok(tape.scale(t, 1.0 / admitted as f32)),
        _ => Ok(tape.constant_scalar(0.0)),
    }
}

/// Breath-rate prior: supervise the RR head with the rate extracted from
/// the ground-truth pulse wherever one exists, under the deadband.
/// Returns the loss and the number of failed extractions.
pub fn br_loss(
    tape: &mut Tape,
    pred_rr: Tid,
    labels: &BatchLabels,
    delta: f32,
) -> Result<(Tid, usize)> {
    let b = labels.batch();
    let mut targets = vec![0.0f32; b];
    let mut select = vec![false; b];
    let mut failures = 0usize;
    for i in 0..b {
        if !labels.mask[i].bvp {
            continue;
        }
        let bvp = &labels.bvp[i * labels.frames..(i + 1) * labels.frames];
        match signal::rr_from_bvp(bvp, labels.fps) {
            Ok(est) => {
                targets[i] = est.breaths_per_min;
                select[i] = true;
            }
            Err(_) => failures += 1,
        }
    }
    if !select.iter().any(|&s| s) {
        return Ok((tape.constant_scalar(0.0), failures));
    }
    let tgt = tape.constant(vec![b], targets)?;
    let d = tape.sub(pred_rr, tgt)?;
    let band = deadband_mask(tape, d, delta)?;
    let selv: Vec<f32> = select.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let selv = tape.constant(vec![b], selv)?;
    let gate = tape.mul(band, selv)?;
    let a = tape.abs(d);
    let m = tape.mul(a, gate)?;
    let s = tape.sum(m);
    Ok((tape.scale(s, 1.0 / b as f32), failures))
}

/// Heart-rate/pulse-shape prior: the predicted HR must agree with the
/// rate found in the predicted pulse. Peak detection is not
/// differentiable, so by default the extracted rate enters as a
/// constant and gradient reaches only the HR head; the spectral
/// surrogate routes gradient into the pulse as well.
pub fn hb_loss(
    tape: &mut Tape,
    pred_hr: Tid,
    pred_bvp: Tid,
    labels: &BatchLabels,
    weights: &LossWeights,
) -> Result<(Tid, usize)> {
    if weights.hb_spectral_surrogate {
        return hb_loss_spectral(tape, pred_hr, pred_bvp, labels);
    }
    let b = labels.batch();
    let frames = tape.shape(pred_bvp)[1];
    let bvp_vals = tape.data(pred_bvp).to_vec();
    let mut targets = vec![0.0f32; b];
    let mut select = vec![false; b];
    let mut failures = 0usize;
    for i in 0..b {
        if !labels.mask[i].hr {
            continue;
        }
        let series = &bvp_vals[i * frames..(i + 1) * frames];
        let hr = signal::find_peaks(series, labels.fps)
            .and_then(|p| signal::hr_from_peaks(&p));
        match hr {
            Ok(v) => {
                targets[i] = v;
                select[i] = true;
            }
            Err(_) => failures += 1,
        }
    }
    if !select.iter().any(|&s| s) {
        return Ok((tape.constant_scalar(0.0), failures));
    }
    let tgt = tape.constant(vec![b], targets)?;
    let selv: Vec<f32> = select.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let selv = tape.constant(vec![b], selv)?;
    let d = tape.sub(pred_hr, tgt)?;
    let a = tape.abs(d);
    let m = tape.mul(a, selv)?;
    let s = tape.sum(m);
    Ok((tape.scale(s, 1.0 / b as f32), failures))
}

/// Spectral surrogate: HR as the power-weighted mean frequency of the
/// predicted pulse inside the plausible band, differentiable end to end.
fn hb_loss_spectral(
    tape: &mut Tape,
    pred_hr: Tid,
    pred_bvp: Tid,
    labels: &BatchLabels,
) -> Result<(Tid, usize)> {
    let b = labels.batch();
    let frames = tape.shape(pred_bvp)[1];
    let fs = labels.fps;
    // DFT basis over the 42..180 beats/min band
    let df = fs / frames as f32;
    let mut freqs = Vec::new();
    let mut k = 1;
    while (k as f32) * df <= 3.0 {
        let f = k as f32 * df;
        if f >= 0.7 {
            freqs.push(f);
        }
        k += 1;
    }
    let nf = freqs.len();
    let mut cos_basis = vec![0.0f32; nf * frames];
    let mut sin_basis = vec![0.0f32; nf * frames];
    for (fi, &f) in freqs.iter().enumerate() {
        for t in 0..frames {
            let ang = -2.0 * std::f32::consts::PI * f * t as f32 / fs;
            cos_basis[fi * frames + t] = ang.cos();
            sin_basis[fi * frames + t] = ang.sin();
        }
    }
    let cb = tape.constant(vec![nf, frames], cos_basis)?;
    let sb = tape.constant(vec![nf, frames], sin_basis)?;
    let re = tape.matmul_nt(pred_bvp, cb)?; // [b, nf]
    let im = tape.matmul_nt(pred_bvp, sb)?;
    let re2 = tape.mul(re, re)?;
    let im2 = tape.mul(im, im)?;
    let power = tape.add(re2, im2)?;
    let bpm_rows: Vec<f32> = (0..b)
        .flat_map(|_| freqs.iter().map(|f| f * 60.0))
        .collect();
    let bpm = tape.constant(vec![b, nf], bpm_rows)?;
    let weighted = tape.mul(power, bpm)?;

    let mut acc: Option<Tid> = None;
    let mut used = 0usize;
    for i in 0..b {
        if !labels.mask[i].hr {
            continue;
        }
        used += 1;
        let num_row = tape.gather_rows(weighted, vec![i])?;
        let den_row = tape.gather_rows(power, vec![i])?;
        let num = tape.sum(num_row);
        let den = tape.sum(den_row);
        let den = tape.add_const(den, 1e-8);
        let hr_soft = tape.sdiv(num, den)?;
        let hr_pred2 = tape.reshape(pred_hr, vec![b, 1])?;
        let hr_i = tape.gather_rows(hr_pred2, vec![i])?;
        let hr_i = tape.sum(hr_i);
        let d = tape.sub(hr_i, hr_soft)?;
        let a = tape.abs(d);
        acc = Some(match acc {
            Some(t) => tape.add(t, a)?,
            None => a,
        });
    }
    match acc {
        Some(t) if used > 0 => Ok((tape.scale(t, 1.0 / b as f32), 0)),
        _ => Ok((tape.constant_scalar(0.0), 0)),
    }
}

/// All scalar loss terms of one step, as graph nodes.
pub struct LossTerms {
    pub bvp: Tid,
    pub hr: Tid,
    pub spo2: Tid,
    pub rr: Tid,
    pub oem: Tid,
    pub spatial: Tid,
    pub temporal: Tid,
    pub hb: Tid,
    pub br: Tid,
    pub asp: Tid,
}

impl LossTerms {
    /// (name, node) pairs in logging order.
    pub fn named(&self) -> [(&'static str, Tid); 10] {
        [
            ("L_BVP", self.bvp),
            ("L_HR", self.hr),
            ("L_SpO2", self.spo2),
            ("L_RR", self.rr),
            ("L_OEM", self.oem),
            ("L_Spatial", self.spatial),
            ("L_Temporal", self.temporal),
            ("L_HB", self.hb),
            ("L_BR", self.br),
            ("L_ASp", self.asp),
        ]
    }
}

/// L_BVP + λ·(p1·L_HR + p2·L_SpO2 + p3·L_RR + p4·L_OEM + p5·L_Spatial +
/// p6·L_Temporal + p7·L_HB + p8·L_BR + p9·L_ASp).
pub fn joint_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights, lambda: f32) -> Result<Tid> {
    let order = [
        terms.hr,
        terms.spo2,
        terms.rr,
        terms.oem,
        terms.spatial,
        terms.temporal,
        terms.hb,
        terms.br,
        terms.asp,
    ];
    let mut reg: Option<Tid> = None;
    for (t, &p) in order.iter().zip(&weights.p) {
        if p == 0.0 {
            continue;
        }
        let scaled = tape.scale(*t, p);
        reg = Some(match reg {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    match reg {
        Some(r) => {
            let lr = tape.scale(r, lambda);
            tape.add(terms.bvp, lr)
        }
        None => Ok(terms.bvp),
    }
}
