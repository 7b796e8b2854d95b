//! Training regimes, evaluation metrics and run output.
//!
//! Every random draw comes from one of four named streams (data,
//! corruption, routing init, model init) plus an eval stream for held-out
//! pairs, each derived from the run seed unless overridden.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{allocate_masks, apply_preset, CorruptionPreset, ModalityDrop, NoiseKind};
use crate::distill::{
    cav2vec_total_loss, mlm_centroids, mlm_on, prediction_loss_on, teacher_targets, TargetMode, TaskLosses,
    TaskWeights, TeacherState,
};
use crate::error::{Error, Result};
use crate::metrics::{coeff_of_variation, normalize_histogram, write_atomic, write_table, Cell, CsvTable};
use crate::model::{Model, ModelConfig};
use crate::moe::{flops_report, DispatchStats, FlopsReport, LossCoeffs, Modality, MoeMode, RoutingDecision};
use crate::numeric::{Graph, Optimizer, OptimizerState, Tensor, Var};
use crate::streams::{edit_distance, generate_with, Codebooks, GeneratorConfig, SyntheticPair};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "AVMOE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SupervisedMoe,
    Cav2vecUptrain,
    CombinedPipeline,
}

/// Per-stream overrides; unset streams derive from the run seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    pub data: Option<u64>,
    pub corruption: Option<u64>,
    pub routing_init: Option<u64>,
    pub model_init: Option<u64>,
    pub eval: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub data: u64,
    pub corruption: u64,
    pub routing_init: u64,
    pub model_init: u64,
    pub eval: u64,
}

/// Independent 64-bit seed number `index` of the stream keyed by `seed`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    /// Label tokens per training sequence.
    pub tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            tokens: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub preset: CorruptionPreset,
    pub coeffs: LossCoeffs,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Encoder parameters stay fixed for the first this-many steps.
    pub freeze_encoder_steps: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            preset: CorruptionPreset::supervised_noise(0.25),
            coeffs: LossCoeffs::default(),
            optimizer: Optimizer::Sgd,
            lr: 0.05,
            steps: 2000,
            batch: 8,
            freeze_encoder_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UptrainConfig {
    pub preset: CorruptionPreset,
    pub weights: TaskWeights,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub standardize_targets: bool,
}

impl Default for UptrainConfig {
    fn default() -> Self {
        Self {
            preset: CorruptionPreset::train_default(),
            weights: TaskWeights::default(),
            optimizer: Optimizer::Sgd,
            lr: 0.05,
            steps: 1000,
            batch: 8,
            eta_start: 0.99,
            eta_end: 0.999,
            mask_prob: 0.3,
            mask_span: 3,
            standardize_targets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out pairs per metric.
    pub pairs: usize,
    pub snr_list: Vec<f64>,
    /// SNR of the joint-corruption preset used for TER and feature distance.
    pub fullnoise_snr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: 32,
            snr_list: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            fullnoise_snr: -5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: SeedOverrides,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub supervised: SupervisedConfig,
    #[serde(default)]
    pub uptrain: UptrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Starting parameters; the model config must match the checkpoint.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            regime,
            seed: 0,
            seeds: SeedOverrides::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            supervised: SupervisedConfig::default(),
            uptrain: UptrainConfig::default(),
            eval: EvalConfig::default(),
            init_checkpoint: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the run seed with `AVMOE_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn seed_streams(&self) -> SeedStreams {
        let o = &self.seeds;
        SeedStreams {
            data: o.data.unwrap_or_else(|| sub_seed(self.seed, 1)),
            corruption: o.corruption.unwrap_or_else(|| sub_seed(self.seed, 2)),
            routing_init: o.routing_init.unwrap_or_else(|| sub_seed(self.seed, 3)),
            model_init: o.model_init.unwrap_or_else(|| sub_seed(self.seed, 4)),
            eval: o.eval.unwrap_or_else(|| sub_seed(self.seed, 5)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.model.validate()?;
        self.data.generator.validate()?;
        let g = &self.data.generator;
        let m = &self.model;
        if g.dim_audio != m.dim_audio || g.dim_video != m.dim_video {
            return bad("data and model feature dims differ".into());
        }
        if g.vocab != m.vocab || g.frames_per_token != m.frames_per_token {
            return bad("data and model vocab or frames_per_token differ".into());
        }
        if self.data.tokens == 0 || self.data.tokens + 1 > m.max_tokens {
            return bad(format!("tokens must lie in 1..{}", m.max_tokens));
        }
        if self.data.tokens * g.frames_per_token > m.max_frames {
            return bad("sequences exceed max_frames".into());
        }
        let s = &self.supervised;
        let u = &self.uptrain;
        let c = &s.coeffs;
        if [c.c_b, c.c_s, c.c_z].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss coefficients must be finite and nonnegative".into());
        }
        u.weights.validate()?;
        let phases: &[(&str, usize, usize, f64)] = match self.regime {
            Regime::SupervisedMoe => &[("supervised", s.steps, s.batch, s.lr)],
            Regime::Cav2vecUptrain => &[("uptrain", u.steps, u.batch, u.lr)],
            Regime::CombinedPipeline => &[("uptrain", u.steps, u.batch, u.lr), ("supervised", s.steps, s.batch, s.lr)],
        };
        for &(name, steps, batch, lr) in phases {
            if steps == 0 {
                return bad(format!("{name}.steps must be at least 1"));
            }
            if batch == 0 {
                return bad(format!("{name}.batch must be at least 1"));
            }
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name}.lr must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&u.mask_prob) || u.mask_span == 0 {
            return bad("mask_prob must lie in [0, 1] and mask_span be positive".into());
        }
        if !(0.0 <= u.eta_start && u.eta_start <= u.eta_end && u.eta_end <= 1.0) {
            return bad("need 0 <= eta_start <= eta_end <= 1".into());
        }
        if self.eval.pairs == 0 {
            return bad("eval.pairs must be positive".into());
        }
        Ok(())
    }
}

/// One logged optimizer step. Unused columns hold zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    pub l_ce: f64,
    pub l_b: f64,
    pub l_s: f64,
    pub l_z: f64,
    pub l_acp: f64,
    pub l_vcp: f64,
    pub l_mask: f64,
    pub l_mlm: f64,
    pub l_avcp: f64,
    pub total: f64,
    pub eta: f64,
    pub audio_only_seqs: usize,
    pub video_only_seqs: usize,
    /// 1 when the batch had no audio-only or no video-only sequence.
    pub subset_empty: usize,
    pub balance_cv: f64,
}

pub const STEP_COLUMNS: [&str; 17] = [
    "step",
    "phase",
    "l_ce",
    "l_b",
    "l_s",
    "l_z",
    "l_acp",
    "l_vcp",
    "l_mask",
    "l_mlm",
    "l_avcp",
    "total",
    "eta",
    "audio_only_seqs",
    "video_only_seqs",
    "subset_empty",
    "balance_cv",
];

impl StepRecord {
    fn cells(&self) -> Vec<Cell> {
        vec![
            self.step.into(),
            self.phase.as_str().into(),
            self.l_ce.into(),
            self.l_b.into(),
            self.l_s.into(),
            self.l_z.into(),
            self.l_acp.into(),
            self.l_vcp.into(),
            self.l_mask.into(),
            self.l_mlm.into(),
            self.l_avcp.into(),
            self.total.into(),
            self.eta.into(),
            self.audio_only_seqs.into(),
            self.video_only_seqs.into(),
            self.subset_empty.into(),
            self.balance_cv.into(),
        ]
    }
}

pub fn steps_table(steps: &[StepRecord]) -> Result<CsvTable> {
    let mut t = CsvTable::new(STEP_COLUMNS);
    for s in steps {
        t.push(s.cells())?;
    }
    Ok(t)
}

/// Expert selection histograms for one decoder layer, each summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    pub raw: Vec<f64>,
    pub q_weighted: Vec<f64>,
}

/// Mean inter-router weight per group, by input condition, averaged over
/// decoder layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupLoad {
    pub audio_only: Vec<f64>,
    pub video_only: Vec<f64>,
    pub audio_visual: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrLoad {
    pub snr: f64,
    pub mean_qv: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub d_before: f64,
    pub d_after: f64,
    pub relative_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub steps: usize,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub expert_load: Vec<LayerLoad>,
    pub group_load: Option<GroupLoad>,
    pub group_load_vs_snr: Vec<SnrLoad>,
    pub flops: FlopsReport,
    pub params: crate::model::ParamReport,
    pub ter: BTreeMap<String, f64>,
    /// Clean-vs-corrupted feature distance under the joint-corruption preset.
    pub feature_distance: f64,
    /// Mean within-group expert-count CV over the last tenth of the steps.
    pub balance_cv: f64,
    pub subset_empty_steps: usize,
}

pub struct RunOutput {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    pub report: MetricsReport,
}

fn modality_of(drop: ModalityDrop) -> Modality {
    match drop {
        ModalityDrop::None => Modality::AudioVisual,
        ModalityDrop::DropAudio => Modality::Video,
        ModalityDrop::DropVideo => Modality::Audio,
    }
}

struct Sample {
    pair: SyntheticPair,
    audio: Tensor,
    video: Tensor,
    plan: crate::corruption::CorruptionPlan,
    modality: Modality,
}

struct Sampler<'a> {
    data: &'a DataConfig,
    books: Codebooks,
    seeds: SeedStreams,
    counter: u64,
}

impl<'a> Sampler<'a> {
    fn new(data: &'a DataConfig, seeds: SeedStreams) -> Self {
        Self {
            data,
            books: Codebooks::new(&data.generator),
            seeds,
            counter: 0,
        }
    }

    fn next(&mut self, preset: &CorruptionPreset) -> Result<Sample> {
        let i = self.counter;
        self.counter += 1;
        let pair = generate_with(&self.data.generator, &self.books, self.data.tokens, sub_seed(self.seeds.data, i))?;
        let c = apply_preset(&pair, preset, &self.books, sub_seed(self.seeds.corruption, i))?;
        Ok(Sample {
            modality: modality_of(c.plan.modality_drop),
            audio: c.audio,
            video: c.video,
            plan: c.plan,
            pair,
        })
    }
}

fn finite_or_diverge(step: usize, rec: &StepRecord, last: Option<&StepRecord>) -> Result<()> {
    let vals = [
        rec.l_ce, rec.l_b, rec.l_s, rec.l_z, rec.l_acp, rec.l_vcp, rec.l_mask, rec.l_mlm, rec.l_avcp, rec.total,
    ];
    if vals.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let detail = match last {
        Some(l) => format!(
            "non-finite loss; last finite total {:?} (l_ce {:?}, l_b {:?}, l_s {:?}, l_z {:?})",
            l.total, l.l_ce, l.l_b, l.l_s, l.l_z
        ),
        None => "non-finite loss on the first step".to_string(),
    };
    Err(Error::Divergence { step, detail })
}

fn layer_balance_cv(stats: &[DispatchStats]) -> f64 {
    let mut acc = Vec::new();
    for s in stats {
        for f in &s.expert_frequency {
            if f.len() > 1 {
                if let Ok(cv) = coeff_of_variation(f) {
                    acc.push(cv);
                }
            }
        }
    }
    if acc.is_empty() {
        0.0
    } else {
        acc.iter().sum::<f64>() / acc.len() as f64
    }
}

fn sum_opt(g: &mut Graph, vars: impl Iterator<Item = Option<Var>>) -> Result<Option<Var>> {
    let terms: Vec<(f64, Var)> = vars.flatten().map(|v| (1.0, v)).collect();
    if terms.is_empty() {
        Ok(None)
    } else {
        Ok(Some(g.weighted_sum(&terms)?))
    }
}

fn supervised_phase(
    model: &mut Model,
    cfg: &SupervisedConfig,
    sampler: &mut Sampler,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    for step in 0..cfg.steps {
        let samples: Vec<Sample> = (0..cfg.batch).map(|_| sampler.next(&cfg.preset)).collect::<Result<_>>()?;
        let batch: Vec<(&Tensor, &Tensor)> = samples.iter().map(|s| (&s.audio, &s.video)).collect();
        let labels: Vec<&[usize]> = samples.iter().map(|s| s.pair.labels.as_slice()).collect();
        let mods: Vec<Modality> = samples.iter().map(|s| s.modality).collect();

        let mut g = Graph::new();
        let layout = &model.layout;
        let enc = layout.encode_on(&mut g, &model.params, &batch)?;
        let dec = layout.decode_on(&mut g, &model.params, enc.features, &enc.ranges, &labels, &mods)?;
        let l_b = sum_opt(&mut g, dec.moe.iter().map(|m| m.l_b))?;
        let l_s = sum_opt(&mut g, dec.moe.iter().map(|m| m.l_s))?;
        let l_z = sum_opt(&mut g, dec.moe.iter().map(|m| m.l_z))?;
        let c = cfg.coeffs;
        let mut terms = vec![(1.0, dec.l_ce)];
        for (coef, v) in [(c.c_b, l_b), (c.c_s, l_s), (c.c_z, l_z)] {
            if let Some(v) = v {
                terms.push((coef, v));
            }
        }
        let total = g.weighted_sum(&terms)?;
        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        let stats: Vec<DispatchStats> = dec.moe.iter().map(|m| m.stats.clone()).collect();
        let n_a = mods.iter().filter(|m| **m == Modality::Audio).count();
        let n_v = mods.iter().filter(|m| **m == Modality::Video).count();
        let rec = StepRecord {
            step: log.len(),
            phase: "supervised".into(),
            l_ce: g.scalar(dec.l_ce),
            l_b: value(&g, l_b),
            l_s: value(&g, l_s),
            l_z: value(&g, l_z),
            total: g.scalar(total),
            audio_only_seqs: n_a,
            video_only_seqs: n_v,
            subset_empty: usize::from(n_a == 0 || n_v == 0),
            balance_cv: layer_balance_cv(&stats),
            ..StepRecord::default()
        };
        finite_or_diverge(rec.step, &rec, log.last())?;
        g.backward(total)?;
        let frozen = step < cfg.freeze_encoder_steps;
        let scales: Vec<f64> = model
            .params
            .ids()
            .map(|id| if frozen && model.params.name(id).starts_with("enc.") { 0.0 } else { 1.0 })
            .collect();
        opt.step(&mut model.params, &g, cfg.lr, |id| scales[id.0]);
        log.push(rec);
    }
    Ok(())
}

fn refs(ts: &[Tensor]) -> Vec<&Tensor> {
    ts.iter().collect()
}

fn zero_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = t.clone();
    let c = out.cols();
    for &r in rows {
        out.data_mut()[r * c..(r + 1) * c].fill(0.0);
    }
    out
}

fn uptrain_phase(
    model: &mut Model,
    cfg: &UptrainConfig,
    sampler: &mut Sampler,
    centroid_seed: u64,
    log: &mut Vec<StepRecord>,
) -> Result<()> {
    let mcfg = model.cfg().clone();
    let centroids = mlm_centroids(mcfg.mlm_clusters, mcfg.d, centroid_seed)?;
    let mut teacher = TeacherState::new(&model.params, cfg.eta_start, cfg.eta_end, cfg.steps)?;
    let w = cfg.weights;
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    for _ in 0..cfg.steps {
        let mut samples = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let mut s = sampler.next(&cfg.preset)?;
            let mask_seed = sub_seed(sampler.seeds.corruption ^ 0x6d61_736b, sampler.counter);
            s.plan = allocate_masks(&s.plan, cfg.mask_prob, cfg.mask_span, cfg.mask_prob, cfg.mask_span, mask_seed)?;
            s.audio = zero_rows(&s.audio, &s.plan.audio_mask);
            s.video = zero_rows(&s.video, &s.plan.video_mask);
            samples.push(s);
        }
        let clean: Vec<(&Tensor, &Tensor)> = samples.iter().map(|s| (&s.pair.audio, &s.pair.video)).collect();
        let targets = |mode| {
            teacher_targets(
                &model.layout,
                &teacher.params,
                &clean,
                mcfg.topk_blocks,
                mode,
                cfg.standardize_targets,
            )
        };
        let t_av = targets(TargetMode::AudioVisual)?;
        let dropped_audio = samples.iter().any(|s| s.plan.modality_drop == ModalityDrop::DropAudio);
        let dropped_video = samples.iter().any(|s| s.plan.modality_drop == ModalityDrop::DropVideo);
        let t_a = if dropped_audio { targets(TargetMode::AudioOnly)? } else { t_av.clone() };
        let t_v = if dropped_video { targets(TargetMode::VideoOnly)? } else { t_av.clone() };

        let idx = |f: &dyn Fn(&Sample) -> Vec<usize>| samples.iter().map(f).collect::<Vec<_>>();
        let mask_idx = idx(&|s| s.plan.mask_union());
        let acp_idx = idx(&|s| match s.plan.modality_drop {
            ModalityDrop::DropAudio => s.plan.video_corrupt.clone(),
            _ => Vec::new(),
        });
        let vcp_idx = idx(&|s| match s.plan.modality_drop {
            ModalityDrop::DropVideo => s.plan.audio_corrupt.clone(),
            _ => Vec::new(),
        });
        let avcp_idx = idx(&|s| match s.plan.modality_drop {
            ModalityDrop::None => s.plan.corrupt_union(),
            _ => Vec::new(),
        });

        let batch: Vec<(&Tensor, &Tensor)> = samples.iter().map(|s| (&s.audio, &s.video)).collect();
        let mut g = Graph::new();
        let layout = &model.layout;
        let enc = layout.encode_on(&mut g, &model.params, &batch)?;
        let f = enc.features;
        let p_av = layout.pred_av.on(&mut g, &model.params, f)?;
        let p_a = layout.pred_audio.on(&mut g, &model.params, f)?;
        let p_v = layout.pred_video.on(&mut g, &model.params, f)?;
        let l_mask = prediction_loss_on(&mut g, p_av, &enc.ranges, &refs(&t_av), &mask_idx)?;
        let l_acp = prediction_loss_on(&mut g, p_a, &enc.ranges, &refs(&t_a), &acp_idx)?;
        let l_vcp = prediction_loss_on(&mut g, p_v, &enc.ranges, &refs(&t_v), &vcp_idx)?;
        let l_avcp = prediction_loss_on(&mut g, p_av, &enc.ranges, &refs(&t_av), &avcp_idx)?;
        let l_mlm = mlm_on(
            &mut g,
            &model.params,
            &layout.mlm_head,
            f,
            &enc.ranges,
            &refs(&t_av),
            &mask_idx,
            &centroids,
        )?;
        let total = g.weighted_sum(&[
            (w.acp, l_acp),
            (w.vcp, l_vcp),
            (w.mask, l_mask),
            (w.mlm, l_mlm),
            (w.avcp, l_avcp),
        ])?;
        let parts = TaskLosses {
            acp: g.scalar(l_acp),
            vcp: g.scalar(l_vcp),
            mask: g.scalar(l_mask),
            mlm: g.scalar(l_mlm),
            avcp: g.scalar(l_avcp),
        };
        let n_a = samples.iter().filter(|s| s.modality == Modality::Audio).count();
        let n_v = samples.iter().filter(|s| s.modality == Modality::Video).count();
        let mut rec = StepRecord {
            step: log.len(),
            phase: "uptrain".into(),
            l_acp: parts.acp,
            l_vcp: parts.vcp,
            l_mask: parts.mask,
            l_mlm: parts.mlm,
            l_avcp: parts.avcp,
            total: g.scalar(total),
            eta: crate::distill::eta_schedule(&teacher),
            audio_only_seqs: n_a,
            video_only_seqs: n_v,
            subset_empty: usize::from(n_a == 0 || n_v == 0),
            ..StepRecord::default()
        };
        finite_or_diverge(rec.step, &rec, log.last())?;
        rec.total = cav2vec_total_loss(&parts, &w)?;
        g.backward(total)?;
        opt.step(&mut model.params, &g, cfg.lr, |_| 1.0);
        teacher.advance(&model.params)?;
        log.push(rec);
    }
    Ok(())
}

/// Held-out pairs from the eval stream, disjoint from training draws.
pub fn eval_pairs(data: &DataConfig, seed: u64, count: usize) -> Result<Vec<SyntheticPair>> {
    let books = Codebooks::new(&data.generator);
    (0..count as u64)
        .map(|i| generate_with(&data.generator, &books, data.tokens, sub_seed(seed, i)))
        .collect()
}

/// Corpus-level token error rate (total edits over total reference tokens)
/// under a corruption preset, with greedy decoding.
pub fn evaluate_ter(
    model: &Model,
    pairs: &[SyntheticPair],
    generator: &GeneratorConfig,
    preset: &CorruptionPreset,
    seed: u64,
) -> Result<f64> {
    let books = Codebooks::new(generator);
    let (mut edits, mut total) = (0usize, 0usize);
    for (i, p) in pairs.iter().enumerate() {
        let c = apply_preset(p, preset, &books, sub_seed(seed, i as u64))?;
        let (feat, _) = model.encode(&c.audio, &c.video)?;
        let max_len = (2 * p.labels.len()).max(1);
        let hyp = model.decode_greedy(&feat, max_len, modality_of(c.plan.modality_drop))?;
        edits += edit_distance(&hyp, &p.labels);
        total += p.labels.len();
    }
    if total == 0 {
        return crate::error::precondition("no reference tokens");
    }
    Ok(edits as f64 / total as f64)
}

/// Teacher-forced routing decisions of every decoder layer for one pair.
fn routing_trace(
    model: &Model,
    audio: &Tensor,
    video: &Tensor,
    labels: &[usize],
    modality: Modality,
) -> Result<Vec<Vec<RoutingDecision>>> {
    let mut g = Graph::without_grad();
    let enc = model.layout.encode_on(&mut g, &model.params, &[(audio, video)])?;
    let dec = model
        .layout
        .decode_on(&mut g, &model.params, enc.features, &enc.ranges, &[labels], &[modality])?;
    Ok(dec.moe.into_iter().map(|m| m.decisions).collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean visual-group inter-router weight over AV tokens of every decoder
/// layer, with whole-sequence babble on the audio at each SNR.
pub fn eval_group_load_vs_snr(
    model: &Model,
    snr_list: &[f64],
    pairs: &[SyntheticPair],
    generator: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<SnrLoad>> {
    if !matches!(model.cfg().ffn.mode, MoeMode::Hierarchical { .. }) {
        return Err(Error::Unsupported("group load needs a hierarchical decoder".into()));
    }
    let books = Codebooks::new(generator);
    let mut out = Vec::with_capacity(snr_list.len());
    for &snr in snr_list {
        let preset = CorruptionPreset::audio_only(snr, NoiseKind::Babble);
        let mut qv = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            let c = apply_preset(p, &preset, &books, sub_seed(seed, i as u64))?;
            for layer in routing_trace(model, &c.audio, &c.video, &p.labels, Modality::AudioVisual)? {
                qv.extend(layer.iter().filter_map(|d| d.group_probs.as_ref().map(|q| q[1])));
            }
        }
        let (mean_qv, std) = mean_std(&qv);
        out.push(SnrLoad { snr, mean_qv, std });
    }
    Ok(out)
}

/// Each pair clean, once per input condition: audio-only (video zeroed),
/// video-only (audio zeroed) and both.
pub fn eval_routing_load(model: &Model, pairs: &[SyntheticPair]) -> Result<(Vec<LayerLoad>, Option<GroupLoad>)> {
    let n_layers = model.cfg().dec_blocks;
    let n_exp = model.cfg().ffn.mode.n_experts();
    let mut raw = vec![vec![0.0; n_exp]; n_layers];
    let mut weighted = vec![vec![0.0; n_exp]; n_layers];
    let hier = matches!(model.cfg().ffn.mode, MoeMode::Hierarchical { .. });
    let mut group: [Vec<f64>; 3] = Default::default();
    let mut counts = [0usize; 3];
    for p in pairs {
        let za = Tensor::zeros(p.audio.shape());
        let zv = Tensor::zeros(p.video.shape());
        let conds = [
            (&p.audio, &zv, Modality::Audio),
            (&za, &p.video, Modality::Video),
            (&p.audio, &p.video, Modality::AudioVisual),
        ];
        for (ci, (a, v, m)) in conds.into_iter().enumerate() {
            for (li, layer) in routing_trace(model, a, v, &p.labels, m)?.iter().enumerate() {
                for d in layer {
                    for (&e, &wgt) in d.selected_experts.iter().zip(&d.selected_weights) {
                        raw[li][e] += 1.0;
                        weighted[li][e] += wgt;
                    }
                    if let Some(q) = &d.group_probs {
                        if group[ci].is_empty() {
                            group[ci] = vec![0.0; q.len()];
                        }
                        group[ci].iter_mut().zip(q).for_each(|(a, b)| *a += b);
                        counts[ci] += 1;
                    }
                }
            }
        }
    }
    let loads = (0..n_layers)
        .map(|l| LayerLoad {
            layer: l,
            raw: normalize_histogram(&raw[l]),
            q_weighted: normalize_histogram(&weighted[l]),
        })
        .collect();
    let mean = |i: usize| group[i].iter().map(|v| v / counts[i].max(1) as f64).collect::<Vec<_>>();
    let gl = hier.then(|| GroupLoad {
        audio_only: mean(0),
        video_only: mean(1),
        audio_visual: mean(2),
    });
    Ok((loads, gl))
}

/// Mean over frames of the distance between row-normalized feature rows.
pub fn normalized_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "normalized_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let unit = |r: &[f64]| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for i in 0..a.rows() {
        let (x, y) = (unit(a.row(i)), unit(b.row(i)));
        total += x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    }
    Ok(total / a.rows().max(1) as f64)
}

/// Clean vs corrupted encoder features, averaged over pairs.
pub fn feature_distance(
    model: &Model,
    pairs: &[SyntheticPair],
    generator: &GeneratorConfig,
    preset: &CorruptionPreset,
    seed: u64,
) -> Result<f64> {
    let books = Codebooks::new(generator);
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let c = apply_preset(p, preset, &books, sub_seed(seed, i as u64))?;
        let (clean, _) = model.encode(&p.audio, &p.video)?;
        let (noisy, _) = model.encode(&c.audio, &c.video)?;
        total += normalized_distance(&clean, &noisy)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

pub fn repr_distance_report(
    before: &Model,
    after: &Model,
    pairs: &[SyntheticPair],
    generator: &GeneratorConfig,
    preset: &CorruptionPreset,
    seed: u64,
) -> Result<DistanceReport> {
    before.params.check_layout(&after.params)?;
    let d_before = feature_distance(before, pairs, generator, preset, seed)?;
    let d_after = feature_distance(after, pairs, generator, preset, seed)?;
    let relative_change = if d_before > 0.0 {
        (d_after - d_before) / d_before
    } else {
        0.0
    };
    Ok(DistanceReport {
        d_before,
        d_after,
        relative_change,
    })
}

fn initial_model(cfg: &TrainConfig, seeds: &SeedStreams) -> Result<Model> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let m = Model::load(path)?;
            if m.cfg() != &cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was saved with a different model config",
                    path.display()
                )));
            }
            Ok(m)
        }
        None => Model::new(cfg.model.clone(), seeds.model_init, seeds.routing_init),
    }
}

/// Runs the configured regime and computes the report. Nothing is written.
pub fn train(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let seeds = cfg.seed_streams();
    let mut model = initial_model(cfg, &seeds)?;
    let mut sampler = Sampler::new(&cfg.data, seeds);
    let mut log = Vec::new();
    let centroid_seed = sub_seed(seeds.model_init, 99);
    match cfg.regime {
        Regime::SupervisedMoe => supervised_phase(&mut model, &cfg.supervised, &mut sampler, &mut log)?,
        Regime::Cav2vecUptrain => uptrain_phase(&mut model, &cfg.uptrain, &mut sampler, centroid_seed, &mut log)?,
        Regime::CombinedPipeline => {
            uptrain_phase(&mut model, &cfg.uptrain, &mut sampler, centroid_seed, &mut log)?;
            supervised_phase(&mut model, &cfg.supervised, &mut sampler, &mut log)?;
        }
    }
    let report = build_report(cfg, &model, &log, &seeds)?;
    Ok(RunOutput {
        model,
        steps: log,
        report,
    })
}

fn build_report(cfg: &TrainConfig, model: &Model, log: &[StepRecord], seeds: &SeedStreams) -> Result<MetricsReport> {
    let pairs = eval_pairs(&cfg.data, seeds.eval, cfg.eval.pairs)?;
    let gen = &cfg.data.generator;
    let ev_seed = sub_seed(seeds.eval, 1 << 32);
    let fullnoise = CorruptionPreset::eval_fullnoise(cfg.eval.fullnoise_snr);
    let mut ter = BTreeMap::new();
    let decodes = cfg.regime != Regime::Cav2vecUptrain;
    if decodes {
        ter.insert("clean".to_string(), evaluate_ter(model, &pairs, gen, &CorruptionPreset::clean(), ev_seed)?);
        ter.insert("eval_fullnoise".to_string(), evaluate_ter(model, &pairs, gen, &fullnoise, ev_seed)?);
    }
    let (expert_load, group_load) = eval_routing_load(model, &pairs)?;
    let group_load_vs_snr = match cfg.model.ffn.mode {
        MoeMode::Hierarchical { .. } => eval_group_load_vs_snr(model, &cfg.eval.snr_list, &pairs, gen, ev_seed)?,
        _ => Vec::new(),
    };
    let mut loss_curves = BTreeMap::new();
    let cols: [(&str, fn(&StepRecord) -> f64); 11] = [
        ("total", |s| s.total),
        ("l_ce", |s| s.l_ce),
        ("l_b", |s| s.l_b),
        ("l_s", |s| s.l_s),
        ("l_z", |s| s.l_z),
        ("l_acp", |s| s.l_acp),
        ("l_vcp", |s| s.l_vcp),
        ("l_mask", |s| s.l_mask),
        ("l_mlm", |s| s.l_mlm),
        ("l_avcp", |s| s.l_avcp),
        ("balance_cv", |s| s.balance_cv),
    ];
    for (name, f) in cols {
        loss_curves.insert(name.to_string(), log.iter().map(f).collect());
    }
    let sup: Vec<&StepRecord> = log.iter().filter(|s| s.phase == "supervised").collect();
    let tail = sup.len().div_ceil(10);
    let balance_cv = if tail == 0 {
        0.0
    } else {
        sup[sup.len() - tail..].iter().map(|s| s.balance_cv).sum::<f64>() / tail as f64
    };
    Ok(MetricsReport {
        regime: cfg.regime,
        steps: log.len(),
        loss_curves,
        expert_load,
        group_load,
        group_load_vs_snr,
        flops: flops_report(&cfg.model.moe_config(), 1)?,
        params: model.param_report(),
        ter,
        feature_distance: feature_distance(model, &pairs, gen, &fullnoise, ev_seed)?,
        balance_cv,
        subset_empty_steps: log.iter().filter(|s| s.subset_empty == 1).count(),
    })
}

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EXPERT_LOAD_FILE: &str = "expert_load.csv";
pub const GROUP_LOAD_FILE: &str = "group_load_vs_snr.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.csv";

/// Flat `(metric, value)` table of the headline numbers in a report.
pub fn report_table(r: &MetricsReport) -> Result<CsvTable> {
    let mut t = CsvTable::new(["metric", "value"]);
    let mut put = |k: String, v: f64| t.push(vec![Cell::Text(k), v.into()]);
    put("steps".into(), r.steps as f64)?;
    for (name, curve) in &r.loss_curves {
        if let Some(v) = curve.last() {
            put(format!("final_{name}"), *v)?;
        }
    }
    for (name, v) in &r.ter {
        put(format!("ter_{name}"), *v)?;
    }
    if let Some(gl) = &r.group_load {
        for (cond, q) in [("audio_only", &gl.audio_only), ("video_only", &gl.video_only), ("audio_visual", &gl.audio_visual)] {
            for (i, v) in q.iter().enumerate() {
                put(format!("group{i}_load_{cond}"), *v)?;
            }
        }
    }
    put("flops_ratio".into(), r.flops.ratio)?;
    put("feature_distance".into(), r.feature_distance)?;
    put("balance_cv".into(), r.balance_cv)?;
    put("subset_empty_steps".into(), r.subset_empty_steps as f64)?;
    Ok(t)
}

pub fn expert_load_table(loads: &[LayerLoad]) -> Result<CsvTable> {
    let mut t = CsvTable::new(["layer", "expert", "raw", "q_weighted"]);
    for l in loads {
        for (e, (r, q)) in l.raw.iter().zip(&l.q_weighted).enumerate() {
            t.push(vec![l.layer.into(), e.into(), (*r).into(), (*q).into()])?;
        }
    }
    Ok(t)
}

pub fn group_load_table(curve: &[SnrLoad]) -> Result<CsvTable> {
    let mut t = CsvTable::new(["snr", "mean_qv", "std"]);
    for r in curve {
        t.push(vec![r.snr.into(), r.mean_qv.into(), r.std.into()])?;
    }
    Ok(t)
}

/// Writes logs, summary and checkpoint into `dir`, creating it if needed.
pub fn write_run(dir: &Path, cfg: &TrainConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(&steps_table(&out.steps)?, &dir.join(STEPS_FILE))?;
    write_table(&expert_load_table(&out.report.expert_load)?, &dir.join(EXPERT_LOAD_FILE))?;
    write_table(&group_load_table(&out.report.group_load_vs_snr)?, &dir.join(GROUP_LOAD_FILE))?;
    write_atomic(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&out.report)?.as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    out.model.save(&dir.join(CHECKPOINT_FILE))
}
