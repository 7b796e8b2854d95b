//! The desk-scale audio-visual encoder-decoder.
//!
//! Encoder: per-modality linear projectors, concatenation fusion, learned
//! frame positions, then attention + FFN blocks with per-frame
//! standardization after each residual. Decoder: token embedding plus fixed
//! sinusoidal positions, causal self-attention, cross-attention to the
//! encoder, and one routed FFN per block.
//!
//! Output classes are the label vocabulary plus an end token (`vocab`).
//! The decoder input starts with a begin token (`vocab + 1`).

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::metrics::write_atomic;
use crate::moe::{Activation, DispatchStats, Modality, MoeGraphOut, MoeLayer, MoeLayerConfig, MoeMode};
use crate::numeric::{normal_tensor, Graph, ParamId, ParamStore, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "avmoe-checkpoint-v1";
const STD_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

fn default_router_std() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

/// Routed FFN settings shared by every decoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderFfn {
    pub mode: MoeMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_router_std")]
    pub router_init_std: f64,
    #[serde(default = "default_true")]
    pub z_loss_inter: bool,
    #[serde(default = "default_true")]
    pub z_loss_intra: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim_audio: usize,
    pub dim_video: usize,
    pub d: usize,
    pub h: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub ffn: DecoderFfn,
    /// Label vocabulary size, without the end and begin tokens.
    pub vocab: usize,
    pub topk_blocks: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// Used to initialize frame positions on the token time scale.
    pub frames_per_token: usize,
    pub mlm_clusters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim_audio: 24,
            dim_video: 24,
            d: 32,
            h: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            ffn: DecoderFfn {
                mode: MoeMode::hierarchical(4),
                activation: Activation::Gelu,
                router_init_std: default_router_std(),
                z_loss_inter: true,
                z_loss_intra: true,
            },
            vocab: 16,
            topk_blocks: 2,
            max_frames: 120,
            max_tokens: 40,
            frames_per_token: 3,
            mlm_clusters: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim_audio", self.dim_audio),
            ("dim_video", self.dim_video),
            ("d", self.d),
            ("h", self.h),
            ("enc_blocks", self.enc_blocks),
            ("dec_blocks", self.dec_blocks),
            ("vocab", self.vocab),
            ("max_frames", self.max_frames),
            ("max_tokens", self.max_tokens),
            ("frames_per_token", self.frames_per_token),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.topk_blocks == 0 || self.topk_blocks > self.enc_blocks {
            return Err(Error::Config(format!(
                "topk_blocks must lie in 1..={}, got {}",
                self.enc_blocks, self.topk_blocks
            )));
        }
        if self.mlm_clusters < 2 || self.mlm_clusters > self.d {
            return Err(Error::Config("mlm_clusters must lie in 2..=d".into()));
        }
        self.moe_config().validate()
    }

    pub fn moe_config(&self) -> MoeLayerConfig {
        MoeLayerConfig {
            mode: self.ffn.mode,
            d: self.d,
            h: self.h,
            activation: self.ffn.activation,
            router_init_std: self.ffn.router_init_std,
            z_loss_inter: self.ffn.z_loss_inter,
            z_loss_intra: self.ffn.z_loss_intra,
        }
    }

    pub fn end_token(&self) -> usize {
        self.vocab
    }

    pub fn begin_token(&self) -> usize {
        self.vocab + 1
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            b: store.zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn on(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttnParams {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: store.normal(format!("{name}.wq"), &[d, d], s, rng),
            wk: store.normal(format!("{name}.wk"), &[d, d], s, rng),
            wv: store.normal(format!("{name}.wv"), &[d, d], s, rng),
            wo: store.normal(format!("{name}.wo"), &[d, d], s, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: AttnParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub moe: MoeLayer,
}

/// Parameter handles of every model component.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layout {
    pub cfg: ModelConfig,
    pub audio_proj: Linear,
    pub video_proj: Linear,
    pub fuse: Linear,
    pub enc_pos: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub embed: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub classifier: Linear,
    pub pred_av: Linear,
    pub pred_audio: Linear,
    pub pred_video: Linear,
    pub mlm_head: Linear,
}

/// Encoder activations for a batch. Sequence `s` occupies rows `ranges[s]`
/// of every matrix.
pub struct EncodeOut {
    pub features: Var,
    pub blocks: Vec<Var>,
    pub ranges: Vec<Range<usize>>,
}

pub struct DecodeOut {
    pub logits: Var,
    pub l_ce: Var,
    pub moe: Vec<MoeGraphOut>,
    pub ranges: Vec<Range<usize>>,
}

fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

fn ranges_of(lengths: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASKED;
        }
    }
    m
}

impl Layout {
    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &AttnParams,
        x: Var,
        memory: Option<(Var, &[Range<usize>])>,
        ranges: &[Range<usize>],
        causal: bool,
    ) -> Result<Var> {
        let wq = store.bind(g, p.wq);
        let wk = store.bind(g, p.wk);
        let wv = store.bind(g, p.wv);
        let wo = store.bind(g, p.wo);
        let q = g.matmul(x, wq)?;
        let (src, src_ranges) = memory.unwrap_or((x, ranges));
        let k = g.matmul(src, wk)?;
        let v = g.matmul(src, wv)?;
        let mut parts = Vec::with_capacity(ranges.len());
        for (r, sr) in ranges.iter().zip(src_ranges) {
            let qi: Vec<usize> = r.clone().collect();
            let ki: Vec<usize> = sr.clone().collect();
            let qs = g.gather_rows(q, &qi)?;
            let ks = g.gather_rows(k, &ki)?;
            let vs = g.gather_rows(v, &ki)?;
            let mask = causal.then(|| causal_mask(qi.len()));
            parts.push(g.attention(qs, ks, vs, mask.as_ref())?);
        }
        let a = g.concat_rows(&parts)?;
        g.matmul(a, wo)
    }

    fn residual(&self, g: &mut Graph, x: Var, delta: Var) -> Result<Var> {
        let s = g.add(x, delta)?;
        Ok(g.standardize_rows(s, STD_EPS))
    }

    /// Encodes a batch of aligned `(audio, video)` frame sequences.
    pub fn encode_on(&self, g: &mut Graph, store: &ParamStore, batch: &[(&Tensor, &Tensor)]) -> Result<EncodeOut> {
        if batch.is_empty() {
            return precondition("encode of an empty batch");
        }
        let mut lens = Vec::with_capacity(batch.len());
        for (a, v) in batch {
            let (ta, da) = a.dims2();
            let (tv, dv) = v.dims2();
            if ta != tv {
                return Err(Error::Dimension {
                    op: "encode alignment",
                    lhs: a.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            if da != self.cfg.dim_audio || dv != self.cfg.dim_video {
                return Err(Error::Dimension {
                    op: "encode feature dims",
                    lhs: vec![da, dv],
                    rhs: vec![self.cfg.dim_audio, self.cfg.dim_video],
                });
            }
            if ta > self.cfg.max_frames {
                return precondition(format!("{ta} frames exceed max_frames {}", self.cfg.max_frames));
            }
            lens.push(ta);
        }
        let ranges = ranges_of(lens.iter().copied());
        let a_parts: Vec<Var> = batch.iter().map(|(a, _)| g.constant((*a).clone())).collect();
        let v_parts: Vec<Var> = batch.iter().map(|(_, v)| g.constant((*v).clone())).collect();
        let a_all = g.concat_rows(&a_parts)?;
        let v_all = g.concat_rows(&v_parts)?;
        let za = self.audio_proj.on(g, store, a_all)?;
        let zv = self.video_proj.on(g, store, v_all)?;
        let z = g.concat_cols(za, zv)?;
        let mut x = self.fuse.on(g, store, z)?;
        let pos_idx: Vec<usize> = lens.iter().flat_map(|&n| 0..n).collect();
        let pos = store.bind(g, self.enc_pos);
        let pos = g.gather_rows(pos, &pos_idx)?;
        x = g.add(x, pos)?;
        let mut blocks = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let a = self.attend(g, store, &b.attn, x, None, &ranges, false)?;
            x = self.residual(g, x, a)?;
            let h = b.ffn_in.on(g, store, x)?;
            let h = g.gelu(h);
            let f = b.ffn_out.on(g, store, h)?;
            x = self.residual(g, x, f)?;
            blocks.push(x);
        }
        Ok(EncodeOut {
            features: x,
            blocks,
            ranges,
        })
    }

    /// Teacher-forced decoding. `features` rows are split by `feat_ranges`;
    /// `modalities` tags each sequence for routing.
    pub fn decode_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        feat_ranges: &[Range<usize>],
        labels: &[&[usize]],
        modalities: &[Modality],
    ) -> Result<DecodeOut> {
        if labels.len() != feat_ranges.len() || modalities.len() != labels.len() {
            return precondition("decode needs one label sequence and one modality per feature sequence");
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for l in labels {
            if let Some(&bad) = l.iter().find(|&&t| t >= self.cfg.vocab) {
                return Err(Error::Index {
                    index: bad,
                    len: self.cfg.vocab,
                });
            }
            if l.len() + 1 > self.cfg.max_tokens {
                return precondition(format!("{} labels exceed max_tokens", l.len()));
            }
            inputs.push(self.cfg.begin_token());
            inputs.extend_from_slice(l);
            targets.extend_from_slice(l);
            targets.push(self.cfg.end_token());
        }
        let (logits, moe, ranges) = self.decoder_logits(g, store, features, feat_ranges, &inputs, labels, modalities)?;
        let l_ce = g.cross_entropy_rows(logits, &targets)?;
        Ok(DecodeOut {
            logits,
            l_ce,
            moe,
            ranges,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        feat_ranges: &[Range<usize>],
        inputs: &[usize],
        labels: &[&[usize]],
        modalities: &[Modality],
    ) -> Result<(Var, Vec<MoeGraphOut>, Vec<Range<usize>>)> {
        let ranges = ranges_of(labels.iter().map(|l| l.len() + 1));
        let token_mod: Vec<Modality> = ranges
            .iter()
            .zip(modalities)
            .flat_map(|(r, &m)| std::iter::repeat_n(m, r.len()))
            .collect();
        let d = self.cfg.d;
        let mut pos = Vec::with_capacity(inputs.len() * d);
        for r in &ranges {
            for i in 0..r.len() {
                pos.extend(sinusoid(i as f64, d));
            }
        }
        let embed = store.bind(g, self.embed);
        let e = g.gather_rows(embed, inputs)?;
        let p = g.constant(Tensor::matrix(inputs.len(), d, pos)?);
        let mut x = g.add(e, p)?;
        let mut moe_out = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let a = self.attend(g, store, &b.self_attn, x, None, &ranges, true)?;
            x = self.residual(g, x, a)?;
            let c = self.attend(g, store, &b.cross_attn, x, Some((features, feat_ranges)), &ranges, false)?;
            x = self.residual(g, x, c)?;
            let m = b.moe.forward_on(g, store, x, &token_mod)?;
            x = self.residual(g, x, m.y)?;
            moe_out.push(m);
        }
        let logits = self.classifier.on(g, store, x)?;
        Ok((logits, moe_out, ranges))
    }

    /// Mean of the last `topk` block outputs.
    pub fn top_blocks_mean(&self, g: &mut Graph, enc: &EncodeOut, topk: usize) -> Result<Var> {
        if topk == 0 || topk > enc.blocks.len() {
            return precondition(format!("topk_blocks must lie in 1..={}", enc.blocks.len()));
        }
        let tail = &enc.blocks[enc.blocks.len() - topk..];
        let mut acc = tail[0];
        for &b in &tail[1..] {
            acc = g.add(acc, b)?;
        }
        Ok(if topk == 1 { acc } else { g.scale(acc, 1.0 / topk as f64) })
    }
}

/// Parameter counts of the decoder FFN positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub expert: usize,
    pub ffn_total: usize,
    pub ffn_activated: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layout: Layout,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

impl Model {
    /// Experts and projections draw from `init_seed`; routers are redrawn
    /// from `routing_seed` so routing init can be varied on its own.
    pub fn new(cfg: ModelConfig, init_seed: u64, routing_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let (d, h) = (cfg.d, cfg.h);
        let audio_proj = Linear::init(&mut store, "enc.audio_proj", cfg.dim_audio, d, &mut rng);
        let video_proj = Linear::init(&mut store, "enc.video_proj", cfg.dim_video, d, &mut rng);
        let fuse = Linear::init(&mut store, "enc.fuse", 2 * d, d, &mut rng);
        let mut pos = Vec::with_capacity(cfg.max_frames * d);
        for t in 0..cfg.max_frames {
            pos.extend(sinusoid(t as f64 / cfg.frames_per_token as f64, d));
        }
        let enc_pos = store.add("enc.pos", Tensor::matrix(cfg.max_frames, d, pos)?);
        let encoder = (0..cfg.enc_blocks)
            .map(|i| EncoderBlock {
                attn: AttnParams::init(&mut store, &format!("enc.block{i}.attn"), d, &mut rng),
                ffn_in: Linear::init(&mut store, &format!("enc.block{i}.ffn_in"), d, h, &mut rng),
                ffn_out: Linear::init(&mut store, &format!("enc.block{i}.ffn_out"), h, d, &mut rng),
            })
            .collect();
        let embed = store.normal("dec.embed", &[cfg.vocab + 2, d], 1.0, &mut rng);
        let mut decoder = Vec::with_capacity(cfg.dec_blocks);
        for i in 0..cfg.dec_blocks {
            decoder.push(DecoderBlock {
                self_attn: AttnParams::init(&mut store, &format!("dec.block{i}.self"), d, &mut rng),
                cross_attn: AttnParams::init(&mut store, &format!("dec.block{i}.cross"), d, &mut rng),
                moe: MoeLayer::init(&mut store, &format!("dec.block{i}.moe"), cfg.moe_config(), &mut rng)?,
            });
        }
        let classifier = Linear::init(&mut store, "dec.classifier", d, cfg.vocab + 1, &mut rng);
        let pred_av = Linear::init(&mut store, "head.pred_av", d, d, &mut rng);
        let pred_audio = Linear::init(&mut store, "head.pred_audio", d, d, &mut rng);
        let pred_video = Linear::init(&mut store, "head.pred_video", d, d, &mut rng);
        let mlm_head = Linear::init(&mut store, "head.mlm", d, cfg.mlm_clusters, &mut rng);

        let mut routing_rng = ChaCha8Rng::seed_from_u64(routing_seed);
        for b in &decoder {
            let ids: Vec<ParamId> = b.moe.routers.iter().copied().chain(b.moe.inter).collect();
            for id in ids {
                let shape = store.get(id).shape().to_vec();
                let fresh = normal_tensor(&shape, cfg.ffn.router_init_std, &mut routing_rng);
                *store.get_mut(id) = fresh;
            }
        }
        Ok(Self {
            layout: Layout {
                cfg,
                audio_proj,
                video_proj,
                fuse,
                enc_pos,
                encoder,
                embed,
                decoder,
                classifier,
                pred_av,
                pred_audio,
                pred_video,
                mlm_head,
            },
            params: store,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.layout.cfg
    }

    /// Final features and every block output for one sequence.
    pub fn encode(&self, a: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::without_grad();
        let out = self.layout.encode_on(&mut g, &self.params, &[(a, v)])?;
        let blocks = out.blocks.iter().map(|&b| g.value(b).clone()).collect();
        Ok((g.value(out.features).clone(), blocks))
    }

    /// Teacher-forced logits (`(L + 1) x (vocab + 1)`), mean cross-entropy,
    /// and routing statistics per decoder block.
    pub fn decode_train(
        &self,
        features: &Tensor,
        labels: &[usize],
        modality: Modality,
    ) -> Result<(Tensor, f64, Vec<DispatchStats>)> {
        let mut g = Graph::without_grad();
        let f = g.constant(features.clone());
        let r = [0..features.rows()];
        let out = self.layout.decode_on(&mut g, &self.params, f, &r, &[labels], &[modality])?;
        let stats = out.moe.iter().map(|m| m.stats.clone()).collect();
        Ok((g.value(out.logits).clone(), g.scalar(out.l_ce), stats))
    }

    /// Greedy argmax decoding until the end token or `max_len` labels.
    pub fn decode_greedy(&self, features: &Tensor, max_len: usize, modality: Modality) -> Result<Vec<usize>> {
        if max_len == 0 {
            return precondition("max_len must be at least 1");
        }
        let max_len = max_len.min(self.cfg().max_tokens - 1);
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..max_len {
            let mut g = Graph::without_grad();
            let f = g.constant(features.clone());
            let mut inputs = vec![self.cfg().begin_token()];
            inputs.extend_from_slice(&out);
            let (logits, _, _) =
                self.layout
                    .decoder_logits(&mut g, &self.params, f, &[0..features.rows()], &inputs, &[&out], &[modality])?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = crate::moe::argmax(last);
            if next == self.cfg().end_token() {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn param_report(&self) -> ParamReport {
        let mode = self.cfg().ffn.mode;
        let expert = {
            let (d, h) = (self.cfg().d, self.cfg().h);
            d * h + h + h * d + d
        };
        let blocks = self.cfg().dec_blocks;
        ParamReport {
            total: self.params.scalar_count(),
            expert,
            ffn_total: blocks * mode.n_experts() * expert,
            ffn_activated: blocks * mode.active_per_token() * expert,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.layout.cfg.clone(),
            params,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", ck.format)));
        }
        let mut model = Model::new(ck.config, 0, 0)?;
        let mut params = ck.params;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let stored = params
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let t = Tensor::new(stored.shape, stored.values)?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Dimension {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: model.params.get(id).shape().to_vec(),
                });
            }
            *model.params.get_mut(id) = t;
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
