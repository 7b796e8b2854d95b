//! Corruption and mask index sets, corruption operators on frame sequences,
//! and named presets for the training and evaluation regimes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::numeric::Tensor;
use crate::streams::{Codebooks, FrameSeq, SyntheticPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityDrop {
    #[default]
    None,
    DropAudio,
    DropVideo,
}

/// Index sets over `[0, seq_len)`. Mask sets never intersect the union of
/// the corruption sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub seq_len: usize,
    pub audio_corrupt: Vec<usize>,
    pub video_corrupt: Vec<usize>,
    pub audio_mask: Vec<usize>,
    pub video_mask: Vec<usize>,
    pub modality_drop: ModalityDrop,
}

impl CorruptionPlan {
    pub fn clean(seq_len: usize) -> Self {
        Self {
            seq_len,
            ..Default::default()
        }
    }

    pub fn corrupt_union(&self) -> Vec<usize> {
        union(&self.audio_corrupt, &self.video_corrupt)
    }

    pub fn mask_union(&self) -> Vec<usize> {
        union(&self.audio_mask, &self.video_mask)
    }

    pub fn validate(&self) -> Result<()> {
        let sets = [
            &self.audio_corrupt,
            &self.video_corrupt,
            &self.audio_mask,
            &self.video_mask,
        ];
        for s in sets {
            if let Some(&bad) = s.iter().find(|&&i| i >= self.seq_len) {
                return Err(Error::Index {
                    index: bad,
                    len: self.seq_len,
                });
            }
        }
        let c: BTreeSet<usize> = self.corrupt_union().into_iter().collect();
        if self.mask_union().iter().any(|i| c.contains(i)) {
            return Err(Error::Invariant("mask and corruption sets overlap".into()));
        }
        Ok(())
    }
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionOp {
    AdditiveNoise { snr_db: f64 },
    Zero,
    Blur { window: usize },
    Shuffle,
}

/// Frames corrupted under a ratio: `floor(ratio * seq_len)`.
pub fn corrupted_count(ratio: f64, seq_len: usize) -> usize {
    (ratio * seq_len as f64 + 1e-9).floor() as usize
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return precondition(format!("{name} range must satisfy 0 <= lo <= hi <= 1"));
    }
    Ok(())
}

/// `events` disjoint contiguous chunks totalling `count` frames, placed with
/// uniformly random gaps. Chunk lengths differ by at most one, longer chunks
/// first.
fn sample_chunks(seq_len: usize, count: usize, events: usize, rng: &mut impl Rng) -> Vec<usize> {
    if events == 0 || count == 0 {
        return Vec::new();
    }
    let free = seq_len - count;
    let mut offsets: Vec<usize> = (0..events).map(|_| rng.random_range(0..=free)).collect();
    offsets.sort_unstable();
    let mut out = Vec::with_capacity(count);
    let mut consumed = 0;
    for (i, off) in offsets.iter().enumerate() {
        let len = count / events + usize::from(i < count % events);
        let start = off + consumed;
        out.extend(start..start + len);
        consumed += len;
    }
    out
}

fn sample_drop(drop_prob: f64, rng: &mut impl Rng) -> ModalityDrop {
    let u: f64 = rng.random();
    if u < drop_prob {
        ModalityDrop::DropAudio
    } else if u < drop_prob + drop_prob.min(1.0 - drop_prob) {
        ModalityDrop::DropVideo
    } else {
        ModalityDrop::None
    }
}

/// Samples per-modality corruption chunks and a modality-dropout flag.
///
/// Each modality draws a ratio uniformly from its range and corrupts
/// `floor(ratio * seq_len)` frames split over `events` chunks. Audio and video
/// are each dropped with probability `drop_prob` (exclusive; for
/// `drop_prob > 0.5` video gets the remaining `1 - drop_prob`).
pub fn sample_corruption_plan(
    seq_len: usize,
    video_ratio_range: (f64, f64),
    audio_ratio_range: (f64, f64),
    events: usize,
    drop_prob: f64,
    rng_seed: u64,
) -> Result<CorruptionPlan> {
    check_range("video ratio", video_ratio_range)?;
    check_range("audio ratio", audio_ratio_range)?;
    if !(0.0..=1.0).contains(&drop_prob) {
        return precondition("drop_prob must lie in [0, 1]");
    }
    if events > seq_len {
        return Err(Error::Infeasible(format!(
            "{events} corruption events do not fit in {seq_len} frames"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let draw = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| {
        let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let count = corrupted_count(ratio, seq_len);
        sample_chunks(seq_len, count, events, rng)
    };
    let video_corrupt = draw(video_ratio_range, &mut rng);
    let audio_corrupt = draw(audio_ratio_range, &mut rng);
    let modality_drop = sample_drop(drop_prob, &mut rng);
    Ok(CorruptionPlan {
        seq_len,
        audio_corrupt,
        video_corrupt,
        audio_mask: Vec::new(),
        video_mask: Vec::new(),
        modality_drop,
    })
}

/// Span mask starts: `floor(prob * len / span + u)` distinct starts drawn
/// uniformly from `[0, len - span]`, each masking `span` frames.
fn span_mask(len: usize, prob: f64, span: usize, rng: &mut impl Rng) -> Vec<usize> {
    if prob <= 0.0 || len == 0 {
        return Vec::new();
    }
    let span = span.min(len);
    let u: f64 = rng.random();
    let positions = len - span + 1;
    let starts = ((prob * len as f64 / span as f64 + u).floor() as usize).min(positions);
    let mut candidates: Vec<usize> = (0..positions).collect();
    let (chosen, _) = candidates.partial_shuffle(rng, starts);
    let mut out = BTreeSet::new();
    for &s in chosen.iter() {
        out.extend(s..s + span);
    }
    out.into_iter().collect()
}

/// Adds span masks to a plan, then drops any masked frame that is corrupted
/// in either modality.
pub fn allocate_masks(
    plan: &CorruptionPlan,
    audio_mask_prob: f64,
    audio_span: usize,
    video_mask_prob: f64,
    video_span: usize,
    rng_seed: u64,
) -> Result<CorruptionPlan> {
    if audio_span < 1 || video_span < 1 {
        return precondition("mask spans must be at least 1");
    }
    if !(0.0..=1.0).contains(&audio_mask_prob) || !(0.0..=1.0).contains(&video_mask_prob) {
        return precondition("mask probabilities must lie in [0, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let corrupted: BTreeSet<usize> = plan.corrupt_union().into_iter().collect();
    let keep = |m: Vec<usize>| -> Vec<usize> {
        m.into_iter().filter(|i| !corrupted.contains(i)).collect()
    };
    let audio_mask = keep(span_mask(plan.seq_len, audio_mask_prob, audio_span, &mut rng));
    let video_mask = keep(span_mask(plan.seq_len, video_mask_prob, video_span, &mut rng));
    Ok(CorruptionPlan {
        audio_mask,
        video_mask,
        ..plan.clone()
    })
}

fn span_energy(frames: &FrameSeq, rows: impl Iterator<Item = usize>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in rows {
        for v in frames.row(r) {
            total += v * v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Noise gain that puts `noise` at `snr_db` below the signal energy.
pub fn snr_gain(signal_energy: f64, noise_energy: f64, snr_db: f64) -> f64 {
    (signal_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds scaled noise on `indices`. The `k`-th indexed frame receives noise
/// row `k`; the gain is set from energies over the indexed span.
pub fn corrupt_audio(
    frames: &FrameSeq,
    noise: &FrameSeq,
    snr_db: f64,
    indices: &[usize],
) -> Result<FrameSeq> {
    if indices.is_empty() {
        return Ok(frames.clone());
    }
    let t = frames.rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
        return Err(Error::Index { index: bad, len: t });
    }
    if noise.rows() < indices.len() || noise.cols() != frames.cols() {
        return Err(Error::Dimension {
            op: "corrupt_audio",
            lhs: frames.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let es = span_energy(frames, indices.iter().copied());
    let en = span_energy(noise, 0..indices.len());
    if en <= 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let alpha = snr_gain(es, en, snr_db);
    let mut out = frames.clone();
    let c = frames.cols();
    for (k, &i) in indices.iter().enumerate() {
        let nrow = noise.row(k).to_vec();
        for (o, n) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(nrow) {
            *o += alpha * n;
        }
    }
    Ok(out)
}

/// SNR in dB measured between a clean and a corrupted sequence over indices.
pub fn measured_snr_db(clean: &FrameSeq, corrupted: &FrameSeq, indices: &[usize]) -> f64 {
    let es = span_energy(clean, indices.iter().copied());
    let mut diff = corrupted.clone();
    diff.data_mut()
        .iter_mut()
        .zip(clean.data())
        .for_each(|(d, c)| *d -= c);
    let en = span_energy(&diff, indices.iter().copied());
    10.0 * (es / en).log10()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

pub fn gaussian_frames(rows: usize, cols: usize, rng: &mut impl Rng) -> FrameSeq {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Applies a visual corruption operator on `indices`; frames elsewhere are
/// untouched. Blur reads neighbours with reflective boundaries.
pub fn corrupt_video(
    frames: &FrameSeq,
    op: CorruptionOp,
    indices: &[usize],
    rng_seed: u64,
) -> Result<FrameSeq> {
    if let CorruptionOp::Blur { window } = op {
        if window == 0 || window % 2 == 0 {
            return precondition(format!("blur window must be odd and positive, got {window}"));
        }
    }
    let t = frames.rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
        return Err(Error::Index { index: bad, len: t });
    }
    if indices.is_empty() {
        return Ok(frames.clone());
    }
    let c = frames.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = frames.clone();
    match op {
        CorruptionOp::Zero => {
            for &i in indices {
                out.data_mut()[i * c..(i + 1) * c].fill(0.0);
            }
        }
        CorruptionOp::AdditiveNoise { snr_db } => {
            let noise = gaussian_frames(indices.len(), c, &mut rng);
            let es = span_energy(frames, indices.iter().copied());
            if es == 0.0 {
                return Ok(out);
            }
            out = corrupt_audio(frames, &noise, snr_db, indices)?;
        }
        CorruptionOp::Blur { window } => {
            let half = (window / 2) as isize;
            for &i in indices {
                let mut acc = vec![0.0; c];
                for k in -half..=half {
                    let src = reflect(i as isize + k, t);
                    acc.iter_mut().zip(frames.row(src)).for_each(|(a, v)| *a += v);
                }
                for (o, a) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(acc) {
                    *o = a / window as f64;
                }
            }
        }
        CorruptionOp::Shuffle => {
            let mut perm = indices.to_vec();
            perm.shuffle(&mut rng);
            for (&dst, &src) in indices.iter().zip(&perm) {
                let row = frames.row(src).to_vec();
                out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&row);
            }
        }
    }
    Ok(out)
}

/// Replaces a dropped modality with zero frames.
pub fn apply_modality_dropout(
    audio: &FrameSeq,
    video: &FrameSeq,
    plan: &CorruptionPlan,
) -> Result<(FrameSeq, FrameSeq)> {
    if audio.rows() != plan.seq_len || video.rows() != plan.seq_len {
        return Err(Error::Dimension {
            op: "apply_modality_dropout",
            lhs: audio.shape().to_vec(),
            rhs: vec![plan.seq_len],
        });
    }
    Ok(match plan.modality_drop {
        ModalityDrop::None => (audio.clone(), video.clone()),
        ModalityDrop::DropAudio => (Tensor::zeros(audio.shape()), video.clone()),
        ModalityDrop::DropVideo => (audio.clone(), Tensor::zeros(video.shape())),
    })
}

/// Two-flag form used by replayed plans; both set is rejected.
pub fn modality_drop_from_flags(drop_audio: bool, drop_video: bool) -> Result<ModalityDrop> {
    match (drop_audio, drop_video) {
        (true, true) => Err(Error::Invariant("both modalities dropped".into())),
        (true, false) => Ok(ModalityDrop::DropAudio),
        (false, true) => Ok(ModalityDrop::DropVideo),
        (false, false) => Ok(ModalityDrop::None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// White Gaussian frames.
    Gaussian,
    /// Sum of three random codebook rows per frame, a speech-like interferer.
    Babble,
}

pub fn noise_frames(kind: NoiseKind, book: &Tensor, rows: usize, rng: &mut impl Rng) -> FrameSeq {
    match kind {
        NoiseKind::Gaussian => gaussian_frames(rows, book.cols(), rng),
        NoiseKind::Babble => {
            let c = book.cols();
            let mut data = vec![0.0; rows * c];
            for r in 0..rows {
                for _ in 0..3 {
                    let k = rng.random_range(0..book.rows());
                    data[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(book.row(k))
                        .for_each(|(d, v)| *d += v);
                }
            }
            Tensor::matrix(rows, c, data).expect("shape")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentLength {
    /// Fraction of the sequence drawn uniformly from `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Fraction drawn from Beta(2, 2).
    Beta22,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnrSpec {
    Fixed { db: f64 },
    Normal { mean: f64, std: f64 },
}

impl SnrSpec {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            SnrSpec::Fixed { db } => db,
            SnrSpec::Normal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
        }
    }
}

/// Named corruption regime applied to a clean pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPreset {
    pub name: String,
    /// Fraction of sequences that receive audio corruption.
    pub audio_prob: f64,
    pub audio_length: SegmentLength,
    pub audio_snr: SnrSpec,
    pub audio_noise: NoiseKind,
    /// Fraction of sequences that receive visual corruption.
    pub video_prob: f64,
    pub video_length: SegmentLength,
    pub video_events: usize,
    /// Occlusion (zeroing) is always applied; noise and blur follow it with
    /// these probabilities.
    pub video_noise_prob: f64,
    pub video_blur_prob: f64,
    pub video_noise_snr_db: f64,
    pub blur_window: usize,
    pub drop_prob: f64,
}

impl CorruptionPreset {
    pub fn clean() -> Self {
        Self {
            name: "clean".into(),
            audio_prob: 0.0,
            audio_length: SegmentLength::Uniform { lo: 0.0, hi: 0.0 },
            audio_snr: SnrSpec::Fixed { db: 0.0 },
            audio_noise: NoiseKind::Babble,
            video_prob: 0.0,
            video_length: SegmentLength::Uniform { lo: 0.0, hi: 0.0 },
            video_events: 1,
            video_noise_prob: 0.0,
            video_blur_prob: 0.0,
            video_noise_snr_db: 0.0,
            blur_window: 3,
            drop_prob: 0.0,
        }
    }

    /// Single audio chunk of 30-50% at -10 dB babble, single visual chunk of
    /// 10-50% occluded then noised or blurred with probability 0.3 each,
    /// modality dropout 0.25.
    pub fn train_default() -> Self {
        Self {
            name: "train-default".into(),
            audio_prob: 1.0,
            audio_length: SegmentLength::Uniform { lo: 0.3, hi: 0.5 },
            audio_snr: SnrSpec::Fixed { db: -10.0 },
            audio_noise: NoiseKind::Babble,
            video_prob: 1.0,
            video_length: SegmentLength::Uniform { lo: 0.1, hi: 0.5 },
            video_events: 1,
            video_noise_prob: 0.3,
            video_blur_prob: 0.3,
            video_noise_snr_db: 0.0,
            blur_window: 3,
            drop_prob: 0.25,
        }
    }

    /// Whole-sequence babble at `snr_db` plus one Beta(2,2)-length occluded
    /// and noised visual segment. No modality dropout.
    pub fn eval_fullnoise(snr_db: f64) -> Self {
        Self {
            name: "eval-fullnoise".into(),
            audio_prob: 1.0,
            audio_length: SegmentLength::Uniform { lo: 1.0, hi: 1.0 },
            audio_snr: SnrSpec::Fixed { db: snr_db },
            audio_noise: NoiseKind::Babble,
            video_prob: 1.0,
            video_length: SegmentLength::Beta22,
            video_events: 1,
            video_noise_prob: 1.0,
            video_blur_prob: 0.0,
            video_noise_snr_db: 0.0,
            blur_window: 3,
            drop_prob: 0.0,
        }
    }

    /// Noise augmentation for supervised training: a quarter of the sequences
    /// get whole-sequence audio noise at an SNR drawn from N(0, 5).
    pub fn supervised_noise(drop_prob: f64) -> Self {
        Self {
            name: "supervised-noise".into(),
            audio_prob: 0.25,
            audio_length: SegmentLength::Uniform { lo: 1.0, hi: 1.0 },
            audio_snr: SnrSpec::Normal { mean: 0.0, std: 5.0 },
            audio_noise: NoiseKind::Babble,
            drop_prob,
            ..Self::clean()
        }
    }

    /// Whole-sequence audio noise only, for SNR sweeps.
    pub fn audio_only(snr_db: f64, noise: NoiseKind) -> Self {
        Self {
            name: "audio-fullnoise".into(),
            audio_prob: 1.0,
            audio_length: SegmentLength::Uniform { lo: 1.0, hi: 1.0 },
            audio_snr: SnrSpec::Fixed { db: snr_db },
            audio_noise: noise,
            ..Self::clean()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(Self::clean()),
            "train-default" => Ok(Self::train_default()),
            "eval-fullnoise" => Ok(Self::eval_fullnoise(-5.0)),
            "supervised-noise" => Ok(Self::supervised_noise(0.25)),
            other => Err(Error::Config(format!("unknown corruption preset `{other}`"))),
        }
    }
}

/// A pair after corruption: inputs with the dropped modality zeroed, and the
/// plan that produced them.
#[derive(Clone, Debug)]
pub struct CorruptedPair {
    pub audio: FrameSeq,
    pub video: FrameSeq,
    pub plan: CorruptionPlan,
}

fn segment_fraction(len: SegmentLength, rng: &mut impl Rng) -> f64 {
    match len {
        SegmentLength::Uniform { lo, hi } => {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
        SegmentLength::Beta22 => Beta::new(2.0, 2.0).expect("valid").sample(rng),
    }
}

/// Corrupts both modalities of a clean pair under a preset. Dropout is
/// recorded in the plan and applied to the returned frames.
pub fn apply_preset(
    pair: &SyntheticPair,
    preset: &CorruptionPreset,
    books: &Codebooks,
    rng_seed: u64,
) -> Result<CorruptedPair> {
    let t = pair.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut audio_idx = Vec::new();
    if rng.random::<f64>() < preset.audio_prob {
        let count = corrupted_count(segment_fraction(preset.audio_length, &mut rng), t);
        audio_idx = sample_chunks(t, count, 1, &mut rng);
    }
    let mut video_idx = Vec::new();
    if rng.random::<f64>() < preset.video_prob {
        let count = corrupted_count(segment_fraction(preset.video_length, &mut rng), t);
        if preset.video_events > t {
            return Err(Error::Infeasible("more visual events than frames".into()));
        }
        video_idx = sample_chunks(t, count, preset.video_events, &mut rng);
    }
    let modality_drop = sample_drop(preset.drop_prob, &mut rng);

    let mut audio = pair.audio.clone();
    if !audio_idx.is_empty() {
        let snr = preset.audio_snr.sample(&mut rng);
        let noise = noise_frames(preset.audio_noise, &books.audio, audio_idx.len(), &mut rng);
        audio = corrupt_audio(&audio, &noise, snr, &audio_idx)?;
    }
    let mut video = pair.video.clone();
    if !video_idx.is_empty() {
        video = corrupt_video(&video, CorruptionOp::Zero, &video_idx, rng.random())?;
        let u: f64 = rng.random();
        if u < preset.video_noise_prob {
            // occluded frames carry no energy, so noise is scaled against the
            // clean segment
            let noise = gaussian_frames(video_idx.len(), video.cols(), &mut rng);
            let es = span_energy(&pair.video, video_idx.iter().copied());
            let en = span_energy(&noise, 0..video_idx.len());
            let alpha = snr_gain(es, en, preset.video_noise_snr_db);
            let c = video.cols();
            for (k, &i) in video_idx.iter().enumerate() {
                for (o, n) in video.data_mut()[i * c..(i + 1) * c].iter_mut().zip(noise.row(k)) {
                    *o += alpha * n;
                }
            }
        } else if u < preset.video_noise_prob + preset.video_blur_prob {
            video = corrupt_video(
                &video,
                CorruptionOp::Blur {
                    window: preset.blur_window,
                },
                &video_idx,
                rng.random(),
            )?;
        }
    }

    let plan = CorruptionPlan {
        seq_len: t,
        audio_corrupt: audio_idx,
        video_corrupt: video_idx,
        audio_mask: Vec::new(),
        video_mask: Vec::new(),
        modality_drop,
    };
    let (audio, video) = apply_modality_dropout(&audio, &video, &plan)?;
    Ok(CorruptedPair { audio, video, plan })
}
