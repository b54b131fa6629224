//! The training loop: batch sampling over pooled source domains, the
//! two-branch augmented forward pass, all loss terms, Adam updates,
//! JSONL loss logs and binary checkpoints.

use crate::autodiff::{ParamStore, Tape, Tid};
use crate::config::ModelConfig;
use crate::losses::{
    self, asp_loss, br_loss, hb_loss, joint_loss, lambda_schedule, spatial_loss, task_losses,
    temporal_loss, BatchLabels, LossTerms, LossWeights,
};
use crate::mle::oem_loss;
use crate::model::{stmaps_to_tensor, Model, Predictions, TASK_BVP, TASK_SPO2};
use crate::rng::{for_path, Rng};
use crate::stmap::{
    augment, read_stmap, DomainManifest, DomainSpec, LabelMask, StMap, SubjectTrace, VitalLabels,
};
use crate::{Error, Result};
use rand::Rng as _;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Window advance of the augmented branch, frames.
    pub aug_shift: usize,
    /// Sample the batch round-robin across source domains instead of
    /// uniformly over the pooled windows.
    pub balanced_domains: bool,
    /// Emit a loss-log line every n iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 60,
            iterations: 20_000,
            learning_rate: 1e-5,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            aug_shift: 30,
            balanced_domains: false,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: small batches, short schedule, higher learning
    /// rate since the frozen base is random rather than pretrained, and
    /// trade-off weights rebalanced so the orthogonality term (whose raw
    /// magnitude tracks the layer width) does not drown the task losses.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 6,
            iterations: 2_000,
            learning_rate: 1e-3,
            loss: LossWeights {
                p: [1.0, 1.0, 1.0, 0.02, 0.5, 1.0, 0.25, 0.5, 1.0],
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.model.validate()?;
        self.loss.validate()
    }
}

// ---- optimizer ---------------------------------------------------------

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let m = store.ids().map(|i| vec![0.0; store.value(i).len()]).collect();
        let v = store.ids().map(|i| vec![0.0; store.value(i).len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for pid in store.trainable_ids() {
            let g = store.grad(pid).to_vec();
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let value = store.value_mut(pid);
            for i in 0..value.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ---- dataset -----------------------------------------------------------

struct Sample {
    map: StMap,
    labels: VitalLabels,
    domain_idx: usize,
    subject_id: u32,
    window_start: usize,
}

/// Training windows pooled from several domains, plus everything needed
/// to regenerate the augmented branch. File reads are recorded for the
/// leakage audit.
pub struct Dataset {
    samples: Vec<Sample>,
    specs: Vec<DomainSpec>,
    traces: HashMap<(usize, u32), SubjectTrace>,
    accessed: Vec<PathBuf>,
}

impl Dataset {
    pub fn load(manifests: &[DomainManifest]) -> Result<Self> {
        if manifests.is_empty() {
            return Err(Error::Config("no training domains".into()));
        }
        let mut samples = Vec::new();
        let mut specs = Vec::new();
        let mut traces = HashMap::new();
        let mut accessed = Vec::new();
        for (di, m) in manifests.iter().enumerate() {
            let spec = DomainSpec {
                domain_id: m.domain_id.clone(),
                label_mask: m.label_mask,
                params: m.generator_params.clone(),
                n_subjects: m.n_subjects,
                windows_per_subject: m.windows_per_subject,
                window_step: m.window_step,
                seed: m.seed,
            };
            for e in &m.entries {
                let (map, labels) = read_stmap(&e.path)?;
                accessed.push(e.path.clone());
                samples.push(Sample {
                    map,
                    labels,
                    domain_idx: di,
                    subject_id: e.subject_id,
                    window_start: e.window_start,
                });
                traces
                    .entry((di, e.subject_id))
                    .or_insert_with(|| spec.trace(e.subject_id).expect("trace regeneration"));
            }
            specs.push(spec);
        }
        if samples.is_empty() {
            return Err(Error::Config("training domains contain no windows".into()));
        }
        Ok(Dataset {
            samples,
            specs,
            traces,
            accessed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Paths read while loading; the protocol harness audits these
    /// against the held-out domain.
    pub fn accessed_paths(&self) -> &[PathBuf] {
        &self.accessed
    }

    fn batch_indices(&self, rng: &mut Rng, n: usize, balanced: bool) -> Vec<usize> {
        if !balanced || self.specs.len() < 2 {
            return (0..n).map(|_| rng.gen_range(0..self.samples.len())).collect();
        }
        let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); self.specs.len()];
        for (i, s) in self.samples.iter().enumerate() {
            by_domain[s.domain_idx].push(i);
        }
        (0..n)
            .map(|k| {
                let d = k % by_domain.len();
                by_domain[d][rng.gen_range(0..by_domain[d].len())]
            })
            .collect()
    }

    /// The augmented branch of one sample: the window advanced by
    /// `shift` with rows shuffled, regenerated from the subject trace.
    fn augmented(&self, idx: usize, shift: usize, rng: &mut Rng) -> Result<StMap> {
        let s = &self.samples[idx];
        let trace = &self.traces[&(s.domain_idx, s.subject_id)];
        let frames = s.map.frames;
        let ext = trace.window_raw(s.window_start, frames + shift, true)?;
        let shifted = augment(&ext, shift, frames, rng)?;
        Ok(shifted.normalize_rows())
    }

    fn labels_for(&self, indices: &[usize], fps: f32) -> BatchLabels {
        let frames = self.samples[indices[0]].map.frames;
        let mut lb = BatchLabels {
            frames,
            fps,
            ..BatchLabels::default()
        };
        for &i in indices {
            let s = &self.samples[i];
            lb.hr.push(s.labels.hr);
            lb.spo2.push(s.labels.spo2);
            lb.rr.push(s.labels.rr);
            lb.bvp.extend_from_slice(&s.labels.bvp);
            lb.mask.push(s.labels.mask);
        }
        lb
    }
}

// ---- loss log -----------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossLogLine {
    pub iter: usize,
    #[serde(rename = "L_BVP")]
    pub l_bvp: f32,
    #[serde(rename = "L_HR")]
    pub l_hr: f32,
    #[serde(rename = "L_SpO2")]
    pub l_spo2: f32,
    #[serde(rename = "L_RR")]
    pub l_rr: f32,
    #[serde(rename = "L_OEM")]
    pub l_oem: f32,
    #[serde(rename = "L_Spatial")]
    pub l_spatial: f32,
    #[serde(rename = "L_Temporal")]
    pub l_temporal: f32,
    #[serde(rename = "L_HB")]
    pub l_hb: f32,
    #[serde(rename = "L_BR")]
    pub l_br: f32,
    #[serde(rename = "L_ASp")]
    pub l_asp: f32,
    pub lambda: f32,
    pub joint: f32,
    /// Peak/rate extraction failures in this step's priors.
    pub prior_failures: usize,
}

pub struct TrainOutput {
    pub log: Vec<LossLogLine>,
    pub accessed_paths: Vec<PathBuf>,
}

// ---- training loop -------------------------------------------------------

/// One training step on explicit batch indices. Returns the log line.
fn train_step(
    model: &mut Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    dataset: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    iter: usize,
) -> Result<LossLogLine> {
    let fps = dataset.samples[indices[0]].map.fps as f32;
    let lambda = lambda_schedule(iter, config.iterations, config.loss.lambda_scale);

    let mut aug_rng = for_path(config.seed, &format!("augment/{iter}"));
    let maps: Vec<&StMap> = indices.iter().map(|&i| &dataset.samples[i].map).collect();
    let input = stmaps_to_tensor(&maps, &config.model)?;
    let aug_maps: Vec<StMap> = indices
        .iter()
        .map(|&i| dataset.augmented(i, config.aug_shift, &mut aug_rng))
        .collect::<Result<_>>()?;
    let aug_refs: Vec<&StMap> = aug_maps.iter().collect();
    let input_aug = stmaps_to_tensor(&aug_refs, &config.model)?;
    let labels = dataset.labels_for(indices, fps);

    let mut tape = Tape::new();
    let (preds, inter) = model.forward(&mut tape, store, input, true)?;
    let (preds_aug, _) = model.forward(&mut tape, store, input_aug, true)?;

    let layers = model.layers();
    let oem = oem_loss(
        &mut tape,
        store,
        &layers,
        config.model.oem_target,
        config.seed ^ iter as u64,
    )?;
    let mut spatial_rng = for_path(config.seed, &format!("spatial/{iter}"));
    let spatial = spatial_loss(&mut tape, &inter.block_feats, &mut spatial_rng)?;
    let tasks = task_losses(&mut tape, &preds, &labels)?;
    let temporal = temporal_loss(&mut tape, &preds, &preds_aug, config.loss.delta)?;
    let (hb, hb_fail) = hb_loss(&mut tape, preds.hr, preds.bvp, &labels, &config.loss)?;
    let (br, br_fail) = br_loss(&mut tape, preds.rr, &labels, config.loss.delta)?;
    let gated_spo = inter.gated[TASK_SPO2];
    let asp = asp_loss(
        &mut tape,
        store,
        &model.spo2_head,
        gated_spo,
        &labels,
        &config.loss,
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
    for (name, tid) in terms.named() {
        let v = tape.scalar_value(tid);
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let joint = joint_loss(&mut tape, &terms, &config.loss, lambda)?;
    let joint_v = tape.scalar_value(joint);
    if !joint_v.is_finite() {
        return Err(Error::NonFinite {
            term: "joint".into(),
        });
    }

    tape.backward(joint)?;
    store.zero_grads();
    tape.export_param_grads(store);
    adam.step(store);

    let val = |t: Tid| tape.scalar_value(t);
    Ok(LossLogLine {
        iter,
        l_bvp: val(terms.bvp),
        l_hr: val(terms.hr),
        l_spo2: val(terms.spo2),
        l_rr: val(terms.rr),
        l_oem: val(terms.oem),
        l_spatial: val(terms.spatial),
        l_temporal: val(terms.temporal),
        l_hb: val(terms.hb),
        l_br: val(terms.br),
        l_asp: val(terms.asp),
        lambda,
        joint: joint_v,
        prior_failures: hb_fail + br_fail,
    })
}

/// Train a fresh model on the given source domains. Writes the loss log
/// as JSON lines when `log_path` is set and a checkpoint when
/// `checkpoint_path` is set.
pub fn train(
    config: &TrainConfig,
    manifests: &[DomainManifest],
    checkpoint_path: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<(Model, ParamStore, TrainOutput)> {
    config.validate()?;
    crate::threads::init();
    let dataset = Dataset::load(manifests)?;
    let mut store = ParamStore::new();
    let mut model = Model::init(&config.model, config.seed, &mut store)?;
    let mut adam = Adam::new(&store, config.learning_rate);

    let mut batch_rng = for_path(config.seed, "batch");
    let mut log = Vec::new();
    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    for iter in 0..config.iterations {
        let indices =
            dataset.batch_indices(&mut batch_rng, config.batch_size, config.balanced_domains);
        let line = train_step(
            &mut model,
            &mut store,
            &mut adam,
            &dataset,
            &indices,
            config,
            iter,
        )?;
        if iter % config.log_every.max(1) == 0 || iter + 1 == config.iterations {
            if let Some(f) = log_file.as_mut() {
                let js = serde_json::to_string(&line)
                    .map_err(|e| Error::Invalid(format!("loss log: {e}")))?;
                writeln!(f, "{js}").map_err(|e| Error::io(log_path.unwrap(), e))?;
            }
            log.push(line);
        }
    }

    if let Some(p) = checkpoint_path {
        save_checkpoint(p, config, &store, &model)?;
    }
    Ok((
        model,
        store,
        TrainOutput {
            log,
            accessed_paths: dataset.accessed.clone(),
        },
    ))
}

// ---- checkpoint -----------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"PMCK";
const CKPT_VERSION: u16 = 1;

/// Binary checkpoint: magic "PMCK", version u16, train-config JSON
/// (u32 length + bytes), parameters keyed by module path (u16 name
/// length + name, u8 ndim, u32 dims, f32 data), then normalization
/// states (u16 name length + name, u32 channels, f32 momentum, means,
/// variances). All integers little-endian.
pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    store: &ParamStore,
    model: &Model,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).map_err(|e| Error::Invalid(format!("config: {e}")))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);

    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for pid in store.ids() {
        let name = store.name(pid).as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = store.shape(pid);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in store.value(pid) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let bns = model.bn_states();
    buf.extend_from_slice(&(bns.len() as u32).to_le_bytes());
    for (name, bn) in bns {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(bn.running_mean.len() as u32).to_le_bytes());
        buf.extend_from_slice(&bn.momentum.to_le_bytes());
        for v in &bn.running_mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &bn.running_var {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, Model, ParamStore)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(bad("truncated"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_bytes = take(&mut pos, cfg_len)?;
    let config: TrainConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| bad(&format!("config parse: {e}")))?;

    let mut store = ParamStore::new();
    let mut model = Model::init(&config.model, config.seed, &mut store)?;

    let n_params = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    for _ in 0..n_params {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("name encoding"))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.restore(&name, &shape, data)?;
    }

    let n_bns = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    for _ in 0..n_bns {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("name encoding"))?;
        let channels = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let momentum = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mean_raw = take(&mut pos, 4 * channels)?;
        let running_mean: Vec<f32> = mean_raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let var_raw = take(&mut pos, 4 * channels)?;
        let running_var: Vec<f32> = var_raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.restore_bn(
            &name,
            crate::autodiff::BnState {
                running_mean,
                running_var,
                momentum,
            },
        )?;
    }
    Ok((config, model, store))
}

/// Run the model over a set of windows in evaluation mode.
pub struct WindowPrediction {
    pub hr: f32,
    pub spo2: f32,
    pub rr: f32,
    pub bvp: Vec<f32>,
}

pub fn predict_windows(
    model: &mut Model,
    store: &ParamStore,
    maps: &[&StMap],
    config: &ModelConfig,
) -> Result<Vec<WindowPrediction>> {
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(16) {
        let input = stmaps_to_tensor(chunk, config)?;
        let mut tape = Tape::new();
        let (preds, _) = model.forward(&mut tape, store, input, false)?;
        let frames = tape.shape(preds.bvp)[1];
        for (i, _) in chunk.iter().enumerate() {
            out.push(WindowPrediction {
                hr: tape.data(preds.hr)[i],
                spo2: tape.data(preds.spo2)[i],
                rr: tape.data(preds.rr)[i],
                bvp: tape.data(preds.bvp)[i * frames..(i + 1) * frames].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Mask-aware predicted-vs-label pairs used by the mask-semantics tests.
pub fn parameter_snapshot(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<u32>)> {
    store
        .ids()
        .filter(|&i| store.name(i).starts_with(prefix))
        .map(|i| {
            (
                store.name(i).to_string(),
                store.value(i).iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamCategory;
    use crate::stmap::{build_domain, GeneratorParams};

    pub fn tiny_model() -> ModelConfig {
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

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            iterations: 4,
            learning_rate: 1e-3,
            seed: 9,
            model: tiny_model(),
            ..TrainConfig::default()
        }
    }

    fn tiny_domains(dir: &Path) -> Vec<DomainManifest> {
        let mut out = Vec::new();
        for (i, mask) in [
            LabelMask::all(),
            LabelMask {
                spo2: false,
                rr: false,
                ..LabelMask::all()
            },
        ]
        .into_iter()
        .enumerate()
        {
            let spec = DomainSpec {
                domain_id: format!("d{i}"),
                label_mask: mask,
                params: GeneratorParams {
                    rows: 16,
                    ..GeneratorParams::default()
                },
                n_subjects: 2,
                windows_per_subject: 2,
                window_step: 10,
                seed: 100 + i as u64,
            };
            out.push(build_domain(&spec, dir).unwrap());
        }
        out
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let pid = store.register("p", vec![3], vec![1.0, -2.0, 0.5], true, ParamCategory::Heads);
        let before: Vec<u32> = store.value(pid).iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::new(&store, 1e-2);
        store.zero_grads();
        adam.step(&mut store);
        let after: Vec<u32> = store.value(pid).iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_seeds_give_identical_loss_logs() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = tiny_domains(dir.path());
        let cfg = tiny_train_config();
        let (_, _, out1) = train(&cfg, &manifests, None, None).unwrap();
        let (_, _, out2) = train(&cfg, &manifests, None, None).unwrap();
        assert_eq!(out1.log.len(), out2.log.len());
        for (a, b) in out1.log.iter().zip(&out2.log) {
            assert_eq!(a.joint.to_bits(), b.joint.to_bits());
            assert_eq!(a.l_bvp.to_bits(), b.l_bvp.to_bits());
        }
    }

    #[test]
    fn lambda_column_reproduces_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = tiny_domains(dir.path());
        let cfg = tiny_train_config();
        let (_, _, out) = train(&cfg, &manifests, None, None).unwrap();
        for line in &out.log {
            let expect = lambda_schedule(line.iter, cfg.iterations, cfg.loss.lambda_scale);
            assert_eq!(line.lambda.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn spo2_head_untouched_without_spo2_labels_or_eligible_asp() {
        // single source domain labeled {HR, BVP}: one step must leave the
        // SpO2 head bit-identical (the temporal deadband suppresses the
        // only other path at init)
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec {
            domain_id: "hb_only".into(),
            label_mask: LabelMask {
                hr: true,
                bvp: true,
                spo2: false,
                rr: false,
            },
            params: GeneratorParams {
                rows: 16,
                ..GeneratorParams::default()
            },
            n_subjects: 2,
            windows_per_subject: 2,
            window_step: 10,
            seed: 42,
        };
        let manifest = build_domain(&spec, dir.path()).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            ..tiny_train_config()
        };
        let dataset = Dataset::load(std::slice::from_ref(&manifest)).unwrap();
        let mut store = ParamStore::new();
        let mut model = Model::init(&cfg.model, cfg.seed, &mut store).unwrap();
        let before = parameter_snapshot(&store, "head.spo2");
        let mut adam = Adam::new(&store, cfg.learning_rate);
        let mut rng = for_path(cfg.seed, "batch");
        let indices = dataset.batch_indices(&mut rng, cfg.batch_size, false);
        train_step(&mut model, &mut store, &mut adam, &dataset, &indices, &cfg, 0).unwrap();
        let after = parameter_snapshot(&store, "head.spo2");
        assert_eq!(before, after);

        // RR head still learns through the breath-rate prior when the
        // extracted rate disagrees by at least the deadband
        let before_rr = parameter_snapshot(&store, "head.rr");
        // second step (lambda > 0 now)
        let indices = dataset.batch_indices(&mut rng, cfg.batch_size, false);
        let cfg2 = TrainConfig {
            iterations: 2,
            ..cfg
        };
        train_step(&mut model, &mut store, &mut adam, &dataset, &indices, &cfg2, 1).unwrap();
        let after_rr = parameter_snapshot(&store, "head.rr");
        assert_ne!(before_rr, after_rr);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = tiny_domains(dir.path());
        let cfg = tiny_train_config();
        let ckpt = dir.path().join("model.pmck");
        let (model, store, _) = train(&cfg, &manifests, Some(&ckpt), None).unwrap();
        let (cfg2, model2, store2) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(cfg2.seed, cfg.seed);
        for pid in store.ids() {
            let a: Vec<u32> = store.value(pid).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = store2
                .value(store2.id(store.name(pid)).unwrap())
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b, "param {}", store.name(pid));
        }
        for ((n1, b1), (n2, b2)) in model.bn_states().iter().zip(model2.bn_states().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(b1.running_mean, b2.running_mean);
            assert_eq!(b1.running_var, b2.running_var);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pmck");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn loss_log_file_is_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = tiny_domains(dir.path());
        let cfg = TrainConfig {
            iterations: 2,
            ..tiny_train_config()
        };
        let log_path = dir.path().join("loss.jsonl");
        train(&cfg, &manifests, None, Some(&log_path)).unwrap();
        let text = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in [
            "iter", "L_BVP", "L_HR", "L_SpO2", "L_RR", "L_OEM", "L_Spatial", "L_Temporal",
            "L_HB", "L_BR", "L_ASp", "lambda", "joint",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn task_gates_separate_after_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = tiny_domains(dir.path());
        let cfg = TrainConfig {
            iterations: 1,
            ..tiny_train_config()
        };
        let (mut model, store, _) = train(&cfg, &manifests, None, None).unwrap();
        let dataset = Dataset::load(&manifests).unwrap();
        let maps: Vec<&StMap> = vec![&dataset.samples[0].map];
        let input = stmaps_to_tensor(&maps, &cfg.model).unwrap();
        let mut tape = Tape::new();
        let (_, inter) = model.forward(&mut tape, &store, input, false).unwrap();
        let hr_gate = tape.data(inter.gates[crate::model::TASK_HR]).to_vec();
        let spo_gate = tape.data(inter.gates[TASK_SPO2]).to_vec();
        assert_ne!(hr_gate, spo_gate);
        let _ = TASK_BVP;
    }
}
