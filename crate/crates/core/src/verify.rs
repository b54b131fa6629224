//! Gradient-integrity suite: central-difference checks for every tape
//! primitive and for the composite of an expert layer with all nine
//! loss terms, exactly as the `gradcheck` command reports them.

use crate::autodiff::{check_gradients, ParamCategory, ParamStore, Tape, Tid};
use crate::config::ModelConfig;
use crate::losses::{
    asp_loss, br_loss, hb_loss, joint_loss, spatial_loss, task_losses, temporal_loss, BatchLabels,
    LossTerms, LossWeights,
};
use crate::mle::oem_loss;
use crate::model::{stmaps_to_tensor, Model, TASK_SPO2};
use crate::stmap::{generate_window, GeneratorParams, StMap};
use crate::Result;
use rand::Rng as _;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f32,
    pub coords: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradcheckSummary {
    pub checks: Vec<CheckResult>,
    pub tolerance: f32,
}

impl GradcheckSummary {
    pub fn worst(&self) -> f32 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f32::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

fn run_check<F>(
    checks: &mut Vec<CheckResult>,
    name: &str,
    shape: Vec<usize>,
    data: Vec<f32>,
    h: f32,
    build: F,
) -> Result<()>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Tid)>,
{
    let mut store = ParamStore::new();
    let pid = store.register("p", shape, data, true, ParamCategory::Heads);
    debug_assert_eq!(pid, 0);
    let report = check_gradients(&mut store, &[pid], h, 16, 2024, build)?;
    checks.push(CheckResult {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
    });
    Ok(())
}

/// Check every registered primitive at 16 random coordinates.
pub fn check_primitives(seed: u64) -> Result<GradcheckSummary> {
    let mut rng = crate::rng::seeded(seed);
    let mut checks = Vec::new();
    let h = 1e-2f32;

    let v12: Vec<f32> = (0..12).map(|_| rng.gen_range(0.3..1.2)).collect();
    let aux12: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let aux12b = aux12.clone();
    run_check(&mut checks, "elementwise_add_mul", vec![12], v12.clone(), h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let c = t.constant(vec![12], aux12b.clone())?;
        let a = t.add(p, c)?;
        let m = t.mul(a, p)?;
        let sc = t.scale(m, 0.7);
        let loss = t.mean(sc);
        Ok((t, loss))
    })?;

    run_check(&mut checks, "relu", vec![12], v12.clone(), h, |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let r = t.relu(p);
        let loss = t.sum(r);
        Ok((t, loss))
    })?;

    run_check(&mut checks, "sigmoid", vec![12], v12.clone(), h, |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let r = t.sigmoid(p);
        let loss = t.sum(r);
        Ok((t, loss))
    })?;

    run_check(&mut checks, "mean", vec![12], v12.clone(), h, |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let p2 = t.mul(p, p)?;
        let loss = t.mean(p2);
        Ok((t, loss))
    })?;

    run_check(&mut checks, "sum", vec![12], v12.clone(), h, |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let p2 = t.mul(p, p)?;
        let loss = t.sum(p2);
        Ok((t, loss))
    })?;

    let m23: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m34: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    run_check(&mut checks, "matmul", vec![2, 3], m23, h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let c = t.constant(vec![3, 4], m34.clone())?;
        let y = t.matmul(p, c)?;
        let loss = t.mean(y);
        Ok((t, loss))
    })?;

    let wconv: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let xconv: Vec<f32> = (0..2 * 2 * 5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    run_check(&mut checks, "conv2d", vec![3, 2, 3, 3], wconv, h, move |s| {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2, 5, 6], xconv.clone())?;
        let w = t.param(s, 0);
        let y = t.conv2d(x, w, (2, 2), (1, 1))?;
        let loss = t.mean(y);
        Ok((t, loss))
    })?;

    let xn: Vec<f32> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let wn: Vec<f32> = (0..96).map(|i| ((i % 7) as f32 - 3.0) * 0.2).collect();
    let wn2 = wn.clone();
    run_check(&mut checks, "batch_norm", vec![2, 3, 4, 4], xn.clone(), h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let mut bn = crate::autodiff::BnState::new(3);
        let y = t.batch_norm(p, &mut bn, 1e-5, true)?;
        let c = t.constant(vec![2, 3, 4, 4], wn2.clone())?;
        let m = t.mul(y, c)?;
        let loss = t.mean(m);
        Ok((t, loss))
    })?;

    let wn3 = wn.clone();
    run_check(&mut checks, "instance_norm", vec![2, 3, 4, 4], xn.clone(), h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let y = t.instance_norm(p, 1e-5)?;
        let c = t.constant(vec![2, 3, 4, 4], wn3.clone())?;
        let m = t.mul(y, c)?;
        let loss = t.mean(m);
        Ok((t, loss))
    })?;

    let rows: Vec<f32> = (0..3 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let wrows: Vec<f32> = (0..24).map(|i| ((i % 3) as f32 - 1.0) * 0.5).collect();
    run_check(&mut checks, "standardize_rows", vec![3, 8], rows, h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let y = t.standardize_rows(p, 1e-4)?;
        let c = t.constant(vec![3, 8], wrows.clone())?;
        let m = t.mul(y, c)?;
        let loss = t.mean(m);
        Ok((t, loss))
    })?;

    let xp: Vec<f32> = (0..1 * 2 * 4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wp: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.5).collect();
    run_check(&mut checks, "adaptive_avg_pool", vec![1, 2, 4, 6], xp.clone(), h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let y = t.adaptive_avg_pool(p, 2, 3)?;
        let c = t.constant(vec![1, 2, 2, 3], wp.clone())?;
        let m = t.mul(y, c)?;
        let loss = t.sum(m);
        Ok((t, loss))
    })?;

    let wu: Vec<f32> = (0..96).map(|i| ((i % 11) as f32 - 5.0) * 0.1).collect();
    run_check(&mut checks, "upsample_nearest", vec![1, 2, 4, 6], xp, h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let y = t.upsample_nearest(p, 1, 2)?;
        let c = t.constant(vec![1, 2, 4, 12], wu.clone())?;
        let m = t.mul(y, c)?;
        let loss = t.mean(m);
        Ok((t, loss))
    })?;

    let ra: Vec<f32> = (0..4 * 6).map(|_| rng.gen_range(0.2..1.5)).collect();
    let rb: Vec<f32> = (0..4 * 6).map(|_| rng.gen_range(0.2..1.5)).collect();
    run_check(&mut checks, "cosine_similarity", vec![4, 6], ra, h, move |s| {
        let mut t = Tape::new();
        let p = t.param(s, 0);
        let c = t.constant(vec![4, 6], rb.clone())?;
        let cs = t.cosine_rows(p, c)?;
        let loss = t.mean(cs);
        Ok((t, loss))
    })?;

    Ok(GradcheckSummary {
        checks,
        tolerance: 1e-3,
    })
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_rows: 16,
        input_frames: 256,
        stem_channels: 4,
        stem_stride: (2, 1),
        channel_plan: vec![4, 8],
        layers_per_block: 2,
        experts: 2,
        rank: 2,
        alpha: 4.0,
        task_router_hidden: 4,
        bvp_decoder_channels: vec![8, 4],
        ..ModelConfig::default()
    }
}

/// Deterministic two-sample toy batch from the synthetic generator.
fn toy_batch(seed: u64) -> Result<(Vec<StMap>, BatchLabels)> {
    let params = GeneratorParams {
        rows: 16,
        ..GeneratorParams::default()
    };
    let mut maps = Vec::new();
    let mut labels = BatchLabels {
        frames: params.frames,
        fps: params.fps as f32,
        ..BatchLabels::default()
    };
    for i in 0..2 {
        let (map, lab) = generate_window(&params, seed + i)?;
        labels.hr.push(lab.hr);
        labels.spo2.push(lab.spo2);
        labels.rr.push(lab.rr);
        labels.bvp.extend_from_slice(&lab.bvp);
        labels.mask.push(lab.mask);
        maps.push(map);
    }
    Ok((maps, labels))
}

/// Composite check: an expert-layer model driving all nine loss terms
/// plus the joint objective, differentiated end to end on a two-sample
/// toy batch. The heart-rate/pulse prior runs its differentiable
/// spectral form here; peak detection is a step function and has no
/// gradient to verify.

#[allow(clippy::too_many_arguments)]
fn composite_graph(
    cfg: &ModelConfig,
    weights: &LossWeights,
    s: &ParamStore,
    input: &crate::autodiff::Tensor,
    input_aug: &crate::autodiff::Tensor,
    labels: &BatchLabels,
    seed: u64,
) -> Result<(Tape, Tid)> {
    let mut model = Model::init(cfg, seed, &mut ParamStore::new())?;
    let mut tape = Tape::new();
    let (preds, inter) = model.forward(&mut tape, s, input.clone(), true)?;
    let (preds_aug, _) = model.forward(&mut tape, s, input_aug.clone(), true)?;
    let layers = model.layers();
    let oem = oem_loss(&mut tape, s, &layers, cfg.oem_target, seed)?;
    let mut srng = crate::rng::seeded(seed ^ 7);
    let spatial = spatial_loss(&mut tape, &inter.block_feats, &mut srng)?;
    let tasks = task_losses(&mut tape, &preds, labels)?;
    let temporal = temporal_loss(&mut tape, &preds, &preds_aug, weights.delta)?;
    let (hb, _) = hb_loss(&mut tape, preds.hr, preds.bvp, labels, weights)?;
    let (br, _) = br_loss(&mut tape, preds.rr, labels, weights.delta)?;
    let asp = asp_loss(
        &mut tape,
        s,
        &model.spo2_head,
        inter.gated[TASK_SPO2],
        labels,
        weights,
    )?;
    let terms = LossTerms {
        bvp: tasks.bvp,
        hr: tasks.hr,
        spo2: tasks.spo2,
        rr: tasks.rr,
        oem,
        spatial,
        temporal,
        hb,
        br,
        asp,
    };
    let joint = joint_loss(&mut tape, &terms, weights, 0.7)?;
    Ok((tape, joint))
}

pub fn check_composite(seed: u64, h: f32) -> Result<GradcheckSummary> {
    let config = toy_model_config();
    let (maps, labels) = toy_batch(seed)?;
    let weights = LossWeights {
        hb_spectral_surrogate: true,
        ..LossWeights::default()
    };

    let mut store = ParamStore::new();
    let model_template = Model::init(&config, seed, &mut store)?;
    // strengthen adapters so composite gradients sit well above the
    // f32 finite-difference noise floor
    let mut rng = crate::rng::seeded(seed ^ 0xabcd);
    for block in &model_template.blocks {
        for layer in block {
            for e in &layer.experts {
                for v in store.value_mut(e.a).iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
                for v in store.value_mut(e.b).iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
    }

    let map_refs: Vec<&StMap> = maps.iter().collect();
    let input = stmaps_to_tensor(&map_refs, &config)?;
    // the augmented branch: same windows, shifted labels are irrelevant
    // to the temporal term which compares predictions only
    let mut aug_maps = maps.clone();
    for m in aug_maps.iter_mut() {
        m.values.rotate_left(m.channels * 7);
    }
    let aug_refs: Vec<&StMap> = aug_maps.iter().collect();
    let input_aug = stmaps_to_tensor(&aug_refs, &config)?;

    let sample_layer = &model_template.blocks[0][0];
    let mut params: Vec<usize> = vec![
        sample_layer.experts[0].a,
        sample_layer.experts[0].b,
        sample_layer.routers[0].conv1_w,
        model_template.hr_head.w,
        model_template.spo2_head.w,
        model_template.rr_head.b,
    ];
    let last = model_template.blocks.last().unwrap().last().unwrap();
    params.push(last.experts[1].a);

    let cfg2 = config.clone();
    let weights2 = weights.clone();
    for &pid in &params {
        eprintln!("checking {}", store.name(pid));
        let cfg3 = cfg2.clone(); let w3 = weights2.clone();
        let input3 = input.clone(); let aug3 = input_aug.clone(); let lab3 = labels.clone();
        let rep = check_gradients(&mut store, &[pid], h, 8, seed, move |s| {
            composite_graph(&cfg3, &w3, s, &input3, &aug3, &lab3, seed)
        })?;
        eprintln!("  -> rel {}", rep.max_rel_err);
    }
    let cfg3 = cfg2.clone();
    let w3 = weights2.clone();
    let report = check_gradients(&mut store, &params, h, 8, seed, move |s| {
        composite_graph(&cfg3, &w3, s, &input, &input_aug, &labels, seed)
    })?;

    Ok(GradcheckSummary {
        checks: vec![CheckResult {
            name: "composite_layer_plus_nine_losses".into(),
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
        }],
        tolerance: 1e-3,
    })
}

/// The full gradient-integrity gate: primitives plus composite.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckSummary> {
    let mut summary = check_primitives(seed)?;
    let composite = check_composite(seed, 1e-3)?;
    summary.checks.extend(composite.checks);
    Ok(summary)
}
