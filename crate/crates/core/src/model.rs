//! Convolutional backbone with expert layers, task-specific routers and
//! four regression heads, plus parameter and MAC accounting.

use crate::autodiff::{BnState, ParamCategory, ParamStore, Tape, Tensor, Tid};
use crate::config::{ModelConfig, RouterInput};
use crate::mle::{EfRouter, LayerSpec, PhysMleLayer};
use crate::rng::for_path;
use crate::stmap::StMap;
use crate::{Error, Result};
use rand_distr::{Distribution, Normal};

pub const TASKS: [&str; 4] = ["hr", "bvp", "spo2", "rr"];
pub const TASK_HR: usize = 0;
pub const TASK_BVP: usize = 1;
pub const TASK_SPO2: usize = 2;
pub const TASK_RR: usize = 3;

const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct ScalarHead {
    pub w: usize,
    pub b: usize,
    /// Fixed output scale: y = scale·(w·f) + b.
    pub scale: f32,
}

impl ScalarHead {
    fn init(store: &mut ParamStore, path: &str, c_in: usize, bias: f32, scale: f32, seed: u64) -> Self {
        let mut rng = for_path(seed, path);
        let normal = Normal::new(0.0f32, 0.01).unwrap();
        let w = store.register(
            format!("{path}.w"),
            vec![c_in, 1],
            (0..c_in).map(|_| normal.sample(&mut rng)).collect(),
            true,
            ParamCategory::Heads,
        );
        let b = store.register(
            format!("{path}.b"),
            vec![1],
            vec![bias],
            true,
            ParamCategory::Heads,
        );
        ScalarHead { w, b, scale }
    }

    /// pooled [B, C] → [B]
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pooled: Tid) -> Result<Tid> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(pooled, w)?;
        let y = tape.scale(y, self.scale);
        let y = tape.add_row_bias(y, b)?;
        let n = tape.shape(y)[0];
        tape.reshape(y, vec![n])
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    w: usize,
    b: usize,
}

/// Pulse-signal decoder: the gated feature map is row-pooled, then each
/// stage doubles the temporal extent (nearest upsample → 1×3 conv →
/// norm → ReLU); a final pointwise conv emits one channel and the output
/// is standardized per sample.
#[derive(Debug, Clone)]
struct BvpDecoder {
    stages: Vec<DecoderStage>,
    final_w: usize,
    final_b: usize,
}

impl BvpDecoder {
    fn init(store: &mut ParamStore, path: &str, c_in: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = for_path(seed, path);
        let mut stages = Vec::new();
        let mut prev = c_in;
        for (i, &ch) in channels.iter().enumerate() {
            let fan_in = prev * 3;
            let he = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
            let w = store.register(
                format!("{path}.stage{i}.w"),
                vec![ch, prev, 1, 3],
                (0..ch * prev * 3).map(|_| he.sample(&mut rng)).collect(),
                true,
                ParamCategory::Heads,
            );
            let b = store.register(
                format!("{path}.stage{i}.b"),
                vec![ch],
                vec![0.0; ch],
                true,
                ParamCategory::Heads,
            );
            stages.push(DecoderStage { w, b });
            prev = ch;
        }
        let he = Normal::new(0.0f32, (2.0 / prev as f32).sqrt()).unwrap();
        let final_w = store.register(
            format!("{path}.final.w"),
            vec![1, prev, 1, 1],
            (0..prev).map(|_| he.sample(&mut rng)).collect(),
            true,
            ParamCategory::Heads,
        );
        let final_b = store.register(
            format!("{path}.final.b"),
            vec![1],
            vec![0.0],
            true,
            ParamCategory::Heads,
        );
        BvpDecoder {
            stages,
            final_w,
            final_b,
        }
    }
}

pub struct Predictions {
    pub hr: Tid,
    pub spo2: Tid,
    pub rr: Tid,
    pub bvp: Tid,
}

impl Predictions {
    pub fn scalar(&self, task: usize) -> Tid {
        match task {
            TASK_HR => self.hr,
            TASK_SPO2 => self.spo2,
            TASK_RR => self.rr,
            _ => panic!("bvp is not a scalar task"),
        }
    }
}

pub struct Intermediates {
    pub s0: Tid,
    /// Post-activation output of each basic block.
    pub block_feats: Vec<Tid>,
    pub s_prime: Tid,
    /// Gated task features s'' in hr/bvp/spo2/rr order (empty in
    /// full-fine-tune mode where heads read s' directly).
    pub gated: Vec<Tid>,
    /// Task gate tensors, same order.
    pub gates: Vec<Tid>,
}

pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub stem_w: usize,
    pub stem_bn: BnState,
    pub blocks: Vec<Vec<PhysMleLayer>>,
    pub layer_bns: Vec<Vec<BnState>>,
    pub task_routers: Vec<EfRouter>,
    pub hr_head: ScalarHead,
    pub spo2_head: ScalarHead,
    pub rr_head: ScalarHead,
    decoder: BvpDecoder,
    decoder_bns: Vec<BnState>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = for_path(seed, "stem.conv");
        let fan_in = config.input_channels * 9;
        let he = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let stem_w = store.register(
            "stem.conv",
            vec![config.stem_channels, config.input_channels, 3, 3],
            (0..config.stem_channels * fan_in)
                .map(|_| he.sample(&mut rng))
                .collect(),
            config.full_fine_tune,
            ParamCategory::Frozen,
        );

        let experts = if config.full_fine_tune { 0 } else { config.experts };
        let mut blocks = Vec::new();
        let mut layer_bns = Vec::new();
        let mut c_in = config.stem_channels;
        for (m, &c_out) in config.channel_plan.iter().enumerate() {
            let mut block = Vec::new();
            let mut bns = Vec::new();
            for t in 0..config.layers_per_block {
                let stride = if t == 0 { (2, 2) } else { (1, 1) };
                let router_c_in = match config.router_input {
                    RouterInput::PerLayer => {
                        if t == 0 {
                            c_in
                        } else {
                            c_out
                        }
                    }
                    RouterInput::Stem => config.stem_channels,
                };
                let spec = LayerSpec {
                    c_in: if t == 0 { c_in } else { c_out },
                    c_out,
                    kernel: (3, 3),
                    stride,
                    padding: (1, 1),
                    experts,
                    rank: config.rank,
                    alpha: config.alpha,
                    gamma: config.gamma,
                    router_hidden: (c_out / config.router_hidden_div).max(4),
                    frozen_trainable: config.full_fine_tune,
                };
                let mut layer =
                    PhysMleLayer::init(store, &format!("block{m}.layer{t}"), &spec, seed);
                // routers see the configured source; rebuild them when it
                // is not the layer input
                if config.router_input == RouterInput::Stem && experts > 0 {
                    layer.routers = (0..experts)
                        .map(|i| {
                            EfRouter::init(
                                store,
                                &format!("block{m}.layer{t}.stemrouter{i}"),
                                router_c_in,
                                c_out,
                                spec.router_hidden,
                                stride,
                                seed,
                            )
                        })
                        .collect();
                }
                block.push(layer);
                bns.push(BnState::new(c_out));
            }
            blocks.push(block);
            layer_bns.push(bns);
            c_in = c_out;
        }

        let (c_final, _, _) = config.final_geometry();
        let task_routers = if config.full_fine_tune {
            Vec::new()
        } else {
            TASKS
                .iter()
                .map(|t| {
                    EfRouter::init(
                        store,
                        &format!("task_router.{t}"),
                        c_final,
                        c_final,
                        config.task_router_hidden,
                        (1, 1),
                        seed,
                    )
                })
                .collect()
        };

        let hr_head = ScalarHead::init(
            store,
            "head.hr",
            c_final,
            config.head_bias_init[0],
            config.head_scale[0],
            seed,
        );
        let spo2_head = ScalarHead::init(
            store,
            "head.spo2",
            c_final,
            config.head_bias_init[1],
            config.head_scale[1],
            seed,
        );
        let rr_head = ScalarHead::init(
            store,
            "head.rr",
            c_final,
            config.head_bias_init[2],
            config.head_scale[2],
            seed,
        );
        let decoder = BvpDecoder::init(
            store,
            "head.bvp",
            c_final,
            &config.bvp_decoder_channels,
            seed,
        );
        let decoder_bns = config
            .bvp_decoder_channels
            .iter()
            .map(|&c| BnState::new(c))
            .collect();

        Ok(Model {
            config: config.clone(),
            seed,
            stem_w,
            stem_bn: BnState::new(config.stem_channels),
            blocks,
            layer_bns,
            task_routers,
            hr_head,
            spo2_head,
            rr_head,
            decoder,
            decoder_bns,
        })
    }

    /// All expert layers in block/layer order (for the orthogonality
    /// regularizer).
    pub fn layers(&self) -> Vec<&PhysMleLayer> {
        self.blocks.iter().flatten().collect()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Tensor,
        train: bool,
    ) -> Result<(Predictions, Intermediates)> {
        let c = &self.config;
        let want = [
            input.shape.first().copied().unwrap_or(0),
            c.input_channels,
            c.input_rows,
            c.input_frames,
        ];
        if input.shape.len() != 4 || input.shape[1..] != want[1..] {
            return Err(Error::Shape {
                op: "model_forward",
                expected: format!("[B, {}, {}, {}]", want[1], want[2], want[3]),
                got: format!("{:?}", input.shape),
            });
        }
        let batch = input.shape[0];
        let x = tape.leaf(input);

        let stem_w = tape.param(store, self.stem_w);
        let mut cur = tape.conv2d(x, stem_w, c.stem_stride, (1, 1))?;
        cur = tape.batch_norm(cur, &mut self.stem_bn, BN_EPS, train)?;
        cur = tape.relu(cur);
        let s0 = cur;

        let router_input = c.router_input;
        let mut block_feats = Vec::with_capacity(self.blocks.len());
        for (block, bns) in self.blocks.iter().zip(self.layer_bns.iter_mut()) {
            for (layer, bn) in block.iter().zip(bns.iter_mut()) {
                let rsrc = match router_input {
                    RouterInput::PerLayer => cur,
                    RouterInput::Stem => {
                        let (h, w) = {
                            let s = tape.shape(cur);
                            (s[2], s[3])
                        };
                        tape.adaptive_avg_pool(s0, h, w)?
                    }
                };
                cur = layer.forward(tape, store, cur, rsrc)?;
                cur = tape.batch_norm(cur, bn, BN_EPS, train)?;
                cur = tape.relu(cur);
            }
            block_feats.push(cur);
        }
        let s_prime = cur;

        let (mut gated, mut gates) = (Vec::new(), Vec::new());
        if self.task_routers.is_empty() {
            gated = vec![s_prime; 4];
        } else {
            for router in &self.task_routers {
                let g = router.forward(tape, store, s_prime)?;
                gates.push(g);
                gated.push(tape.mul(g, s_prime)?);
            }
        }

        let pool_flat = |tape: &mut Tape, t: Tid| -> Result<Tid> {
            let pooled = tape.adaptive_avg_pool(t, 1, 1)?;
            let ch = tape.shape(pooled)[1];
            tape.reshape(pooled, vec![batch, ch])
        };
        let hr_in = pool_flat(tape, gated[TASK_HR])?;
        let spo_in = pool_flat(tape, gated[TASK_SPO2])?;
        let rr_in = pool_flat(tape, gated[TASK_RR])?;
        let hr = self.hr_head.forward(tape, store, hr_in)?;
        let spo2 = self.spo2_head.forward(tape, store, spo_in)?;
        let rr = self.rr_head.forward(tape, store, rr_in)?;
        let bvp = self.bvp_forward(tape, store, gated[TASK_BVP], batch, train)?;

        Ok((
            Predictions { hr, spo2, rr, bvp },
            Intermediates {
                s0,
                block_feats,
                s_prime,
                gated,
                gates,
            },
        ))
    }

    fn bvp_forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        feat: Tid,
        batch: usize,
        train: bool,
    ) -> Result<Tid> {
        let w_t = tape.shape(feat)[3];
        let mut cur = tape.adaptive_avg_pool(feat, 1, w_t)?;
        for (stage, bn) in self.decoder.stages.iter().zip(self.decoder_bns.iter_mut()) {
            cur = tape.upsample_nearest(cur, 1, 2)?;
            let w = tape.param(store, stage.w);
            let b = tape.param(store, stage.b);
            cur = tape.conv2d(cur, w, (1, 1), (0, 1))?;
            cur = tape.add_chan_bias(cur, b)?;
            cur = tape.batch_norm(cur, bn, BN_EPS, train)?;
            cur = tape.relu(cur);
        }
        let w = tape.param(store, self.decoder.final_w);
        let b = tape.param(store, self.decoder.final_b);
        cur = tape.conv2d(cur, w, (1, 1), (0, 0))?;
        cur = tape.add_chan_bias(cur, b)?;
        let frames = tape.shape(cur)[3];
        let flat = tape.reshape(cur, vec![batch, frames])?;
        tape.standardize_rows(flat, 1e-6)
    }

    /// Named normalization states for checkpointing, in a stable order.
    pub fn bn_states(&self) -> Vec<(String, &BnState)> {
        let mut out = vec![("stem.bn".to_string(), &self.stem_bn)];
        for (m, bns) in self.layer_bns.iter().enumerate() {
            for (t, bn) in bns.iter().enumerate() {
                out.push((format!("block{m}.layer{t}.bn"), bn));
            }
        }
        for (i, bn) in self.decoder_bns.iter().enumerate() {
            out.push((format!("head.bvp.stage{i}.bn"), bn));
        }
        out
    }

    pub fn restore_bn(&mut self, name: &str, state: BnState) -> Result<()> {
        let slot: Option<&mut BnState> = if name == "stem.bn" {
            Some(&mut self.stem_bn)
        } else if let Some(rest) = name.strip_prefix("block") {
            let parse = || -> Option<(usize, usize)> {
                let (m, rest) = rest.split_once(".layer")?;
                let (t, _) = rest.split_once(".bn")?;
                Some((m.parse().ok()?, t.parse().ok()?))
            };
            parse().and_then(|(m, t)| {
                self.layer_bns
                    .get_mut(m)
                    .and_then(|b| b.get_mut(t))
            })
        } else if let Some(rest) = name.strip_prefix("head.bvp.stage") {
            rest.split_once(".bn")
                .and_then(|(i, _)| i.parse::<usize>().ok())
                .and_then(|i| self.decoder_bns.get_mut(i))
        } else {
            None
        };
        match slot {
            Some(s) => {
                *s = state;
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown normalization state {name}"))),
        }
    }
}

/// Convert a batch of STMaps into the model input tensor: rows resized
/// to the model geometry, intensities scaled to [0, 1], channels first.
pub fn stmaps_to_tensor(maps: &[&StMap], config: &ModelConfig) -> Result<Tensor> {
    let b = maps.len();
    let (rows, frames, chans) = (config.input_rows, config.input_frames, config.input_channels);
    let mut data = vec![0.0f32; b * chans * rows * frames];
    for (bi, m) in maps.iter().enumerate() {
        if m.frames != frames || m.channels != chans {
            return Err(Error::Shape {
                op: "stmaps_to_tensor",
                expected: format!("{frames} frames x {chans} channels"),
                got: format!("{} x {}", m.frames, m.channels),
            });
        }
        let resized;
        let src = if m.rows == rows {
            *m
        } else {
            resized = m.resize_rows(rows)?;
            &resized
        };
        for c in 0..chans {
            for r in 0..rows {
                for t in 0..frames {
                    data[((bi * chans + c) * rows + r) * frames + t] = src.get(r, t, c) / 255.0;
                }
            }
        }
    }
    Tensor::new(vec![b, chans, rows, frames], data)
}

// ---- accounting -------------------------------------------------------

/// Multiply-accumulate counts for one forward pass, by component.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct MacCounts {
    pub frozen: u64,
    pub experts: u64,
    pub routers: u64,
    pub heads: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.frozen + self.experts + self.routers + self.heads
    }
}

/// Expert configuration for the MAC estimate.
#[derive(Debug, Clone, Copy)]
pub enum ExpertStyle {
    /// Factorized low-rank experts with element-wise routers.
    LowRank { k: usize, rank: usize },
    /// Dense full-weight experts with a softmax gate over pooled input.
    Dense { count: usize },
    /// No experts at all (full-fine-tune base).
    None,
}

/// Analytic MAC count of one forward pass at the configured geometry.
pub fn flops_estimate(config: &ModelConfig, style: ExpertStyle) -> MacCounts {
    let mut mac = MacCounts::default();
    let conv = |c_out: usize, c_in: usize, k: usize, oh: usize, ow: usize| -> u64 {
        (c_out * c_in * k * oh * ow) as u64
    };
    let mut h = config.input_rows / config.stem_stride.0;
    let mut w = config.input_frames / config.stem_stride.1;
    mac.frozen += conv(config.stem_channels, config.input_channels, 9, h, w);

    let mut c_in = config.stem_channels;
    for &c_out in &config.channel_plan {
        for t in 0..config.layers_per_block {
            let lc_in = if t == 0 { c_in } else { c_out };
            if t == 0 {
                h /= 2;
                w /= 2;
            }
            mac.frozen += conv(c_out, lc_in, 9, h, w);
            match style {
                ExpertStyle::LowRank { k, rank } => {
                    let r = rank.min(c_out).min(lc_in * 9);
                    mac.experts += k as u64
                        * (conv(r, lc_in, 9, h, w) + conv(c_out, r, 1, h, w));
                    let hid = (c_out / config.router_hidden_div).max(4);
                    mac.routers +=
                        k as u64 * (conv(hid, lc_in, 1, h, w) + conv(c_out, hid, 1, h, w));
                }
                ExpertStyle::Dense { count } => {
                    mac.experts += count as u64 * conv(c_out, lc_in, 9, h, w);
                    // softmax gate: linear from pooled input
                    mac.routers += (lc_in * count) as u64;
                }
                ExpertStyle::None => {}
            }
        }
        c_in = c_out;
    }

    let c_final = *config.channel_plan.last().unwrap();
    if !matches!(style, ExpertStyle::None | ExpertStyle::Dense { .. }) {
        let th = config.task_router_hidden;
        mac.routers += 4 * (conv(th, c_final, 1, h, w) + conv(c_final, th, 1, h, w));
    }

    // scalar heads
    mac.heads += 3 * c_final as u64;
    // decoder on the row-pooled map
    let mut dw = w;
    let mut prev = c_final;
    for &ch in &config.bvp_decoder_channels {
        dw *= 2;
        mac.heads += conv(ch, prev, 3, 1, dw);
        prev = ch;
    }
    mac.heads += conv(1, prev, 1, 1, dw);
    mac
}
