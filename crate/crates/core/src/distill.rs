//! EMA teacher, distillation targets, and the corrupted/masked prediction
//! losses used for self-distillation uptraining.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionPlan;
use crate::error::{precondition, Error, Result};
use crate::model::{Layout, Linear};
use crate::numeric::{kernels, Graph, ParamStore, Tensor, Var};
use crate::streams::{nearest_centroid, orthonormal_rows};

const TARGET_EPS: f64 = 1e-5;

/// EMA copy of the student plus its momentum schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub eta_start: f64,
    pub eta_end: f64,
    pub total_steps: usize,
    pub current_step: usize,
}

impl TeacherState {
    pub fn new(student: &ParamStore, eta_start: f64, eta_end: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta_start) || !(0.0..=1.0).contains(&eta_end) || eta_start > eta_end {
            return precondition(format!("momentum range [{eta_start}, {eta_end}] is invalid"));
        }
        Ok(Self {
            params: student.clone(),
            eta_start,
            eta_end,
            total_steps,
            current_step: 0,
        })
    }

    /// Applies one EMA update at the scheduled momentum and advances the
    /// step counter. Returns the momentum used.
    pub fn advance(&mut self, student: &ParamStore) -> Result<f64> {
        let eta = eta_schedule(self);
        ema_update(&mut self.params, student, eta)?;
        self.current_step = (self.current_step + 1).min(self.total_steps);
        Ok(eta)
    }
}

/// `teacher <- eta * teacher + (1 - eta) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return precondition(format!("momentum {eta} outside [0, 1]"));
    }
    teacher.check_layout(student)?;
    for id in student.ids().collect::<Vec<_>>() {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = if eta == 0.0 { sv } else { eta * *t + (1.0 - eta) * sv };
        }
    }
    Ok(())
}

/// Linear ramp from `eta_start` to `eta_end` over `total_steps`.
pub fn eta_schedule(state: &TeacherState) -> f64 {
    if state.total_steps == 0 {
        return state.eta_end;
    }
    let frac = (state.current_step as f64 / state.total_steps as f64).clamp(0.0, 1.0);
    state.eta_start + (state.eta_end - state.eta_start) * frac
}

/// Which modalities the teacher sees; absent ones are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    AudioVisual,
    AudioOnly,
    VideoOnly,
}

fn zeroed_inputs<'a>(a: &'a Tensor, v: &'a Tensor, mode: TargetMode) -> (Tensor, Tensor) {
    match mode {
        TargetMode::AudioVisual => (a.clone(), v.clone()),
        TargetMode::AudioOnly => (a.clone(), Tensor::zeros(v.shape())),
        TargetMode::VideoOnly => (Tensor::zeros(a.shape()), v.clone()),
    }
}

/// Per-frame targets from the last `topk_blocks` teacher blocks, optionally
/// standardized per frame. One tensor per input pair; no tape is kept.
pub fn teacher_targets(
    layout: &Layout,
    teacher: &ParamStore,
    batch: &[(&Tensor, &Tensor)],
    topk_blocks: usize,
    mode: TargetMode,
    standardize: bool,
) -> Result<Vec<Tensor>> {
    if topk_blocks == 0 {
        return precondition("topk_blocks must be at least 1");
    }
    let inputs: Vec<(Tensor, Tensor)> = batch.iter().map(|(a, v)| zeroed_inputs(a, v, mode)).collect();
    let refs: Vec<(&Tensor, &Tensor)> = inputs.iter().map(|(a, v)| (a, v)).collect();
    let mut g = Graph::without_grad();
    let enc = layout.encode_on(&mut g, teacher, &refs)?;
    let avg = layout.top_blocks_mean(&mut g, &enc, topk_blocks)?;
    let all = g.value(avg);
    enc.ranges
        .iter()
        .map(|r| {
            let rows = Tensor::matrix(r.len(), all.cols(), all.data()[r.start * all.cols()..r.end * all.cols()].to_vec())?;
            Ok(if standardize {
                kernels::standardize_rows(&rows, TARGET_EPS)
            } else {
                rows
            })
        })
        .collect()
}

/// Mean squared error over the rows in `idx`; zero when `idx` is empty.
pub fn masked_prediction_loss(student_out: &Tensor, targets: &Tensor, idx: &[usize]) -> Result<f64> {
    let mut g = Graph::without_grad();
    let s = g.constant(student_out.clone());
    let v = prediction_loss_on(&mut g, s, &[0..student_out.rows()], &[targets], &[idx.to_vec()])?;
    Ok(g.scalar(v))
}

/// Batched regression loss: for each sequence `s`, rows `idx[s]` (relative to
/// `ranges[s]`) of `pred` are compared with the same rows of `targets[s]`.
/// The mean runs over every selected element of the batch.
pub fn prediction_loss_on(
    g: &mut Graph,
    pred: Var,
    ranges: &[Range<usize>],
    targets: &[&Tensor],
    idx: &[Vec<usize>],
) -> Result<Var> {
    if ranges.len() != targets.len() || ranges.len() != idx.len() {
        return precondition("one target and index set per sequence");
    }
    let mut rows = Vec::new();
    let mut target_rows = Vec::new();
    let cols = g.value(pred).cols();
    for ((r, t), ix) in ranges.iter().zip(targets).zip(idx) {
        if t.rows() != r.len() || t.cols() != cols {
            return Err(Error::Dimension {
                op: "prediction targets",
                lhs: t.shape().to_vec(),
                rhs: vec![r.len(), cols],
            });
        }
        for &i in ix {
            if i >= r.len() {
                return Err(Error::Index { index: i, len: r.len() });
            }
            rows.push(r.start + i);
            target_rows.extend_from_slice(t.row(i));
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let picked = g.gather_rows(pred, &rows)?;
    let tv = g.constant(Tensor::matrix(rows.len(), cols, target_rows)?);
    g.mse(picked, tv)
}

/// Task layouts from the notation table: which modalities the student sees,
/// which teacher target it regresses, and on which frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    Avcp,
    MAcp,
    MVcp,
    Acp,
    Vcp,
    AcpWithin,
    VcpWithin,
}

impl TaskVariant {
    pub const ALL: [TaskVariant; 7] = [
        TaskVariant::Avcp,
        TaskVariant::MAcp,
        TaskVariant::MVcp,
        TaskVariant::Acp,
        TaskVariant::Vcp,
        TaskVariant::AcpWithin,
        TaskVariant::VcpWithin,
    ];

    /// Modalities present in the student input.
    pub fn input(self) -> TargetMode {
        match self {
            TaskVariant::Avcp | TaskVariant::MAcp | TaskVariant::MVcp => TargetMode::AudioVisual,
            TaskVariant::Acp | TaskVariant::AcpWithin => TargetMode::VideoOnly,
            TaskVariant::Vcp | TaskVariant::VcpWithin => TargetMode::AudioOnly,
        }
    }

    pub fn target(self) -> TargetMode {
        match self {
            TaskVariant::Avcp => TargetMode::AudioVisual,
            TaskVariant::MAcp | TaskVariant::Acp | TaskVariant::VcpWithin => TargetMode::AudioOnly,
            TaskVariant::MVcp | TaskVariant::Vcp | TaskVariant::AcpWithin => TargetMode::VideoOnly,
        }
    }

    /// Frames carrying the loss.
    pub fn indices(self, plan: &CorruptionPlan) -> Vec<usize> {
        match self {
            TaskVariant::Avcp => plan.corrupt_union(),
            TaskVariant::MAcp | TaskVariant::Acp | TaskVariant::AcpWithin => plan.video_corrupt.clone(),
            TaskVariant::MVcp | TaskVariant::Vcp | TaskVariant::VcpWithin => plan.audio_corrupt.clone(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "avcp" => TaskVariant::Avcp,
            "macp" => TaskVariant::MAcp,
            "mvcp" => TaskVariant::MVcp,
            "acp" => TaskVariant::Acp,
            "vcp" => TaskVariant::Vcp,
            "acp_within" => TaskVariant::AcpWithin,
            "vcp_within" => TaskVariant::VcpWithin,
            other => return Err(Error::Config(format!("unknown task variant `{other}`"))),
        })
    }
}

/// The predictor head that regresses a given target kind.
pub fn head_for(layout: &Layout, target: TargetMode) -> &Linear {
    match target {
        TargetMode::AudioVisual => &layout.pred_av,
        TargetMode::AudioOnly => &layout.pred_audio,
        TargetMode::VideoOnly => &layout.pred_video,
    }
}

/// Value of one corrupted prediction task on a single pair.
///
/// `clean` and `corrupted` are `(audio, video)`; the student sees the
/// corrupted frames with the variant's absent modality zeroed.
#[allow(clippy::too_many_arguments)]
pub fn corrupted_prediction_loss(
    variant: TaskVariant,
    layout: &Layout,
    student: &ParamStore,
    teacher: &ParamStore,
    clean: (&Tensor, &Tensor),
    corrupted: (&Tensor, &Tensor),
    plan: &CorruptionPlan,
    standardize: bool,
) -> Result<f64> {
    if clean.0.rows() != plan.seq_len || corrupted.0.rows() != plan.seq_len {
        return precondition("plan length does not match the sequences");
    }
    let target = teacher_targets(
        layout,
        teacher,
        &[clean],
        layout.cfg.topk_blocks,
        variant.target(),
        standardize,
    )?
    .remove(0);
    let (sa, sv) = zeroed_inputs(corrupted.0, corrupted.1, variant.input());
    let mut g = Graph::without_grad();
    let enc = layout.encode_on(&mut g, student, &[(&sa, &sv)])?;
    let pred = head_for(layout, variant.target()).on(&mut g, student, enc.features)?;
    let loss = prediction_loss_on(&mut g, pred, &enc.ranges, &[&target], &[variant.indices(plan)])?;
    Ok(g.scalar(loss))
}

/// `k` frozen orthonormal cluster centroids in feature space.
pub fn mlm_centroids(k: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if k < 2 {
        return precondition("at least two clusters are needed");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(orthonormal_rows(k, dim, &mut rng))
}

/// Cluster id per frame: nearest centroid in squared distance, lowest id on
/// ties.
pub fn assign_clusters(features: &Tensor, centroids: &Tensor) -> Vec<usize> {
    nearest_centroid(features, centroids)
}

/// Batched cluster classification loss over the frames in `idx`.
#[allow(clippy::too_many_arguments)]
pub fn mlm_on(
    g: &mut Graph,
    store: &ParamStore,
    head: &Linear,
    features: Var,
    ranges: &[Range<usize>],
    teacher_features: &[&Tensor],
    idx: &[Vec<usize>],
    centroids: &Tensor,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for ((r, t), ix) in ranges.iter().zip(teacher_features).zip(idx) {
        let clusters = assign_clusters(t, centroids);
        for &i in ix {
            if i >= r.len() {
                return Err(Error::Index { index: i, len: r.len() });
            }
            rows.push(r.start + i);
            ids.push(clusters[i]);
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let picked = g.gather_rows(features, &rows)?;
    let logits = head.on(g, store, picked)?;
    g.cross_entropy_rows(logits, &ids)
}

/// Value form of the cluster loss for one sequence.
pub fn mlm_loss(
    store: &ParamStore,
    head: &Linear,
    student_features: &Tensor,
    centroids: &Tensor,
    teacher_features: &Tensor,
    idx: &[usize],
) -> Result<f64> {
    if centroids.rows() < 2 {
        return precondition("at least two clusters are needed");
    }
    let mut g = Graph::without_grad();
    let f = g.constant(student_features.clone());
    let v = mlm_on(
        &mut g,
        store,
        head,
        f,
        &[0..student_features.rows()],
        &[teacher_features],
        &[idx.to_vec()],
        centroids,
    )?;
    Ok(g.scalar(v))
}

fn default_mlm() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

/// Task coefficients. `avcp` weights an optional audio-visual corrupted
/// prediction term on sequences without dropout; it is off by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    #[serde(default = "one")]
    pub acp: f64,
    #[serde(default = "one")]
    pub vcp: f64,
    #[serde(default = "one")]
    pub mask: f64,
    #[serde(default = "default_mlm")]
    pub mlm: f64,
    #[serde(default)]
    pub avcp: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            acp: 1.0,
            vcp: 1.0,
            mask: 1.0,
            mlm: 2.0,
            avcp: 0.0,
        }
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.acp, self.vcp, self.mask, self.mlm, self.avcp];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("task weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub acp: f64,
    pub vcp: f64,
    pub mask: f64,
    pub mlm: f64,
    pub avcp: f64,
}

pub fn cav2vec_total_loss(c: &TaskLosses, w: &TaskWeights) -> Result<f64> {
    let all = [c.acp, c.vcp, c.mask, c.mlm, c.avcp];
    if let Some(i) = all.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            coordinate: i,
            detail: "task loss component".into(),
        });
    }
    Ok(w.acp * c.acp + w.vcp * c.vcp + w.mask * c.mask + w.mlm * c.mlm + w.avcp * c.avcp)
}
