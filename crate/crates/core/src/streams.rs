//! Paired audio/visual frame sequences driven by a shared token transcript,
//! and token error rate scoring.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::numeric::Tensor;

/// `T x D` frames, one row per time step.
pub type FrameSeq = Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub frames_per_token: usize,
    pub dim_audio: usize,
    pub dim_video: usize,
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub codebook_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            frames_per_token: 3,
            dim_audio: 24,
            dim_video: 24,
            sigma_audio: 0.0,
            sigma_video: 0.0,
            codebook_seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return precondition("vocab must be at least 2");
        }
        if self.frames_per_token < 1 {
            return precondition("frames_per_token must be at least 1");
        }
        if self.dim_audio == 0 || self.dim_video == 0 {
            return precondition("frame dimensions must be positive");
        }
        if !(self.sigma_audio >= 0.0 && self.sigma_video >= 0.0) {
            return precondition("noise scales must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub labels: Vec<usize>,
    pub audio: FrameSeq,
    pub video: FrameSeq,
    pub frames_per_token: usize,
    pub seed: u64,
}

impl SyntheticPair {
    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Row-orthonormal codebooks for both modalities.
#[derive(Clone, Debug)]
pub struct Codebooks {
    pub audio: Tensor,
    pub video: Tensor,
}

impl Codebooks {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.codebook_seed);
        Self {
            audio: orthonormal_rows(cfg.vocab, cfg.dim_audio, &mut rng),
            video: orthonormal_rows(cfg.vocab, cfg.dim_video, &mut rng),
        }
    }
}

/// Random `rows x dim` matrix with Gram-Schmidt orthonormalized rows. When
/// `rows > dim` only the first `dim` rows can be orthogonal; the rest are
/// unit-norm.
pub fn orthonormal_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    Tensor::from_rows(&out).expect("rectangular")
}

pub fn generate_pair(cfg: &GeneratorConfig, length: usize, rng_seed: u64) -> Result<SyntheticPair> {
    generate_with(cfg, &Codebooks::new(cfg), length, rng_seed)
}

/// Same as [`generate_pair`] with precomputed codebooks.
pub fn generate_with(
    cfg: &GeneratorConfig,
    books: &Codebooks,
    length: usize,
    rng_seed: u64,
) -> Result<SyntheticPair> {
    cfg.validate()?;
    if length < 1 {
        return precondition("sequence length must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let labels: Vec<usize> = (0..length).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let t = length * cfg.frames_per_token;
    let mut frames = |book: &Tensor, sigma: f64| -> FrameSeq {
        let d = book.cols();
        let mut data = Vec::with_capacity(t * d);
        for step in 0..t {
            let row = book.row(labels[step / cfg.frames_per_token]);
            for &c in row {
                let n: f64 = rng.sample(StandardNormal);
                data.push(c + sigma * n);
            }
        }
        Tensor::matrix(t, d, data).expect("shape")
    };
    let audio = frames(&books.audio, cfg.sigma_audio);
    let video = frames(&books.video, cfg.sigma_video);
    Ok(SyntheticPair {
        labels,
        audio,
        video,
        frames_per_token: cfg.frames_per_token,
        seed: rng_seed,
    })
}

/// `count` pairs; pair `i` uses seed `base_seed + i`.
pub fn generate_batch(
    cfg: &GeneratorConfig,
    length: usize,
    base_seed: u64,
    count: usize,
) -> Result<Vec<SyntheticPair>> {
    let books = Codebooks::new(cfg);
    (0..count)
        .map(|i| generate_with(cfg, &books, length, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Index of the nearest codebook row per frame (lowest index on ties).
pub fn nearest_centroid(frames: &FrameSeq, book: &Tensor) -> Vec<usize> {
    (0..frames.rows())
        .map(|t| {
            let f = frames.row(t);
            let mut best = (f64::INFINITY, 0);
            for k in 0..book.rows() {
                let d: f64 = f.iter().zip(book.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Token sequence decoded from frames: per-token majority of frame decodes,
/// lowest id on ties.
pub fn decode_tokens(frames: &FrameSeq, book: &Tensor, frames_per_token: usize) -> Vec<usize> {
    let per_frame = nearest_centroid(frames, book);
    per_frame
        .chunks(frames_per_token)
        .map(|chunk| {
            let mut counts = vec![0usize; book.rows()];
            chunk.iter().for_each(|&k| counts[k] += 1);
            let max = *counts.iter().max().unwrap_or(&0);
            counts.iter().position(|&c| c == max).unwrap_or(0)
        })
        .collect()
}

/// Minimal edit distance (unit substitution, insertion, deletion costs).
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance normalized by reference length; may exceed 1.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return precondition("reference transcript is empty");
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    labels: Vec<usize>,
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
    seed: u64,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// One JSON object per line: `labels`, `audio`, `video`, `seed`.
pub fn dump_jsonl(pairs: &[SyntheticPair], mut out: impl Write) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            labels: p.labels.clone(),
            audio: to_rows(&p.audio),
            video: to_rows(&p.video),
            seed: p.seed,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl(input: impl BufRead) -> Result<Vec<SyntheticPair>> {
    let mut pairs = Vec::new();
    for (row, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            detail: e.to_string(),
        })?;
        let audio = Tensor::from_rows(&rec.audio)?;
        let video = Tensor::from_rows(&rec.video)?;
        if rec.labels.is_empty() || audio.rows() % rec.labels.len() != 0 || video.rows() != audio.rows()
        {
            return Err(Error::Parse {
                row,
                detail: "frame count is not a multiple of the label count".into(),
            });
        }
        pairs.push(SyntheticPair {
            frames_per_token: audio.rows() / rec.labels.len(),
            labels: rec.labels,
            audio,
            video,
            seed: rec.seed,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_frames_are_codebook_rows() {
        let cfg = GeneratorConfig::default();
        let books = Codebooks::new(&cfg);
        let p = generate_pair(&cfg, 5, 3).unwrap();
        assert_eq!(p.len(), 5 * cfg.frames_per_token);
        for t in 0..p.len() {
            let k = p.labels[t / cfg.frames_per_token];
            assert_eq!(p.audio.row(t), books.audio.row(k));
            assert_eq!(p.video.row(t), books.video.row(k));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = GeneratorConfig {
            sigma_audio: 0.3,
            sigma_video: 0.2,
            ..Default::default()
        };
        assert_eq!(generate_pair(&cfg, 7, 99).unwrap(), generate_pair(&cfg, 7, 99).unwrap());
        assert_ne!(generate_pair(&cfg, 7, 99).unwrap(), generate_pair(&cfg, 7, 100).unwrap());
    }

    #[test]
    fn codebook_rows_orthonormal() {
        let books = Codebooks::new(&GeneratorConfig::default());
        let b = &books.audio;
        for i in 0..b.rows() {
            for j in 0..b.rows() {
                let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = GeneratorConfig::default();
        assert!(generate_pair(&cfg, 0, 1).is_err());
        cfg.vocab = 1;
        assert!(generate_pair(&cfg, 3, 1).is_err());
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[], &[1, 2, 3, 4]).unwrap(), 1.0);
        let ter = token_error_rate(&[0, 9, 2, 7], &[0, 1, 2]).unwrap();
        assert!((ter - 2.0 / 3.0).abs() < 1e-15);
        assert!(token_error_rate(&[1], &[]).is_err());
        assert_eq!(token_error_rate(&[1, 1, 1, 1], &[2]).unwrap(), 4.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = GeneratorConfig {
            sigma_audio: 0.5,
            ..Default::default()
        };
        let pairs = generate_batch(&cfg, 4, 10, 3).unwrap();
        let mut buf = Vec::new();
        dump_jsonl(&pairs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        let back = load_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
        assert!(matches!(
            load_jsonl("{not json}\n".as_bytes()),
            Err(Error::Parse { row: 0, .. })
        ));
    }
}
