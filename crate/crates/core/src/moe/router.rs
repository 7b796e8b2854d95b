//! Router probabilities, expert/group selection, and batch dispatch
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::numeric::{kernels, Tensor};

/// Which modalities a sequence carries after dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Video,
    AudioVisual,
}

/// A linear router: `d x n_outputs`, one column per expert or group.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub weight: Tensor,
}

impl RouterParams {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return precondition("router weight must be a matrix");
        }
        if !weight.is_finite() {
            return precondition("router weight must be finite");
        }
        Ok(Self { weight })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (d, _) = self.weight.dims2();
        if x.len() != d {
            return Err(Error::Dimension {
                op: "router",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let row = Tensor::matrix(1, d, x.data().to_vec())?;
        kernels::matmul(&row, &self.weight)
    }
}

/// Per-token routing outcome.
///
/// `expert_probs[g]` holds the router distribution over group `g` (one
/// group in dense mode), empty when that group's router did not run.
/// `selected_weights` are the final combination weights of
/// `selected_experts` (global ids) and sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub expert_probs: Vec<Vec<f64>>,
    pub selected_experts: Vec<usize>,
    pub selected_weights: Vec<f64>,
    pub group_probs: Option<Vec<f64>>,
    pub selected_groups: Vec<usize>,
    pub group_weights: Vec<f64>,
    pub per_group_argmax: Vec<usize>,
}

/// `softmax(W^T x)`.
pub fn route_dense(router: &RouterParams, x: &Tensor) -> Result<Tensor> {
    let logits = router.logits(x)?;
    let n = logits.len();
    kernels::softmax(&logits.reshape(vec![n])?)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The `k` largest entries (lowest id first among equals), in descending
/// order, with weights renormalized over the selection.
pub fn select_topk(probs: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = probs.len();
    if k < 1 || k > n {
        return precondition(format!("top-k needs 1 <= k <= n, got k={k}, n={n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower ids ahead of equal values
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order.truncate(k);
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let weights = if total > 0.0 {
        order.iter().map(|&i| probs[i] / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    Ok((order, weights))
}

/// Modality-fixed routing over an audio group (ids `0..n`) and a visual
/// group (ids `n..2n`). Audio-visual tokens take `k/2` experts from each
/// group and mix the groups with `audio_weight` and `1 - audio_weight`.
pub fn route_hard(
    modality: Modality,
    routers: (&RouterParams, &RouterParams),
    x: &Tensor,
    k: usize,
    audio_weight: f64,
) -> Result<RoutingDecision> {
    let n = routers.0.weight.cols();
    if routers.1.weight.cols() != n {
        return precondition("hard routing needs equal group sizes");
    }
    if modality == Modality::AudioVisual && k % 2 != 0 {
        return precondition(format!("audio-visual hard routing needs even k, got {k}"));
    }
    let pa = match modality {
        Modality::Video => None,
        _ => Some(route_dense(routers.0, x)?.into_data()),
    };
    let pv = match modality {
        Modality::Audio => None,
        _ => Some(route_dense(routers.1, x)?.into_data()),
    };
    decide_hard(modality, pa, pv, n, k, audio_weight)
}

/// Selection given already computed group distributions. A group whose
/// router did not run is `None`.
pub(crate) fn decide_hard(
    modality: Modality,
    pa: Option<Vec<f64>>,
    pv: Option<Vec<f64>>,
    n: usize,
    k: usize,
    audio_weight: f64,
) -> Result<RoutingDecision> {
    let plan: Vec<(usize, usize, f64)> = match modality {
        Modality::Audio => vec![(0, k, 1.0)],
        Modality::Video => vec![(1, k, 1.0)],
        Modality::AudioVisual => vec![(0, k / 2, audio_weight), (1, k / 2, 1.0 - audio_weight)],
    };
    let expert_probs = vec![pa.unwrap_or_default(), pv.unwrap_or_default()];
    let mut decision = RoutingDecision {
        expert_probs: Vec::new(),
        selected_experts: Vec::new(),
        selected_weights: Vec::new(),
        group_probs: None,
        selected_groups: Vec::new(),
        group_weights: Vec::new(),
        per_group_argmax: Vec::new(),
    };
    for (group, kk, gw) in plan {
        let p = &expert_probs[group];
        if p.len() != n {
            return precondition("hard routing: group probabilities missing");
        }
        let (ids, w) = select_topk(p, kk)?;
        decision.selected_groups.push(group);
        decision.group_weights.push(gw);
        decision.per_group_argmax.push(argmax(p));
        for (id, wi) in ids.into_iter().zip(w) {
            decision.selected_experts.push(group * n + id);
            decision.selected_weights.push(gw * wi);
        }
    }
    decision.expert_probs = expert_probs;
    Ok(decision)
}

/// Single-router top-`k` decision.
pub(crate) fn decide_sparse(p: Vec<f64>, k: usize) -> Result<RoutingDecision> {
    let (ids, w) = select_topk(&p, k)?;
    Ok(RoutingDecision {
        per_group_argmax: vec![argmax(&p)],
        expert_probs: vec![p],
        selected_experts: ids,
        selected_weights: w,
        group_probs: None,
        selected_groups: vec![0],
        group_weights: vec![1.0],
    })
}

/// Two-level routing: top-`m` groups from the inter router, then within each
/// selected group either the argmax expert with unit weight
/// (`k_per_group == 1`) or the renormalized top-`k_per_group`.
pub fn route_hierarchical(
    inter: &RouterParams,
    intra: &[RouterParams],
    x: &Tensor,
    m: usize,
    k_per_group: usize,
) -> Result<RoutingDecision> {
    let groups = inter.weight.cols();
    if intra.len() != groups {
        return precondition("one intra router per group");
    }
    if m > groups {
        return precondition(format!("m={m} exceeds {groups} groups"));
    }
    let q = route_dense(inter, x)?.into_data();
    let expert_probs = intra
        .iter()
        .map(|r| route_dense(r, x).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    decide_hierarchical(q, expert_probs, m, k_per_group)
}

/// Selection given already computed inter and intra distributions.
pub(crate) fn decide_hierarchical(
    q: Vec<f64>,
    expert_probs: Vec<Vec<f64>>,
    m: usize,
    k_per_group: usize,
) -> Result<RoutingDecision> {
    let (groups, group_weights) = select_topk(&q, m)?;
    let mut offsets = Vec::with_capacity(expert_probs.len());
    let mut acc = 0;
    for p in &expert_probs {
        offsets.push(acc);
        acc += p.len();
    }
    let mut d = RoutingDecision {
        expert_probs: Vec::new(),
        selected_experts: Vec::new(),
        selected_weights: Vec::new(),
        group_probs: None,
        selected_groups: groups.clone(),
        group_weights: group_weights.clone(),
        per_group_argmax: Vec::new(),
    };
    for (&gi, &gw) in groups.iter().zip(&group_weights) {
        let p = &expert_probs[gi];
        let j = argmax(p);
        d.per_group_argmax.push(j);
        if k_per_group == 1 {
            d.selected_experts.push(offsets[gi] + j);
            d.selected_weights.push(gw);
        } else {
            let (ids, w) = select_topk(p, k_per_group)?;
            for (id, wi) in ids.into_iter().zip(w) {
                d.selected_experts.push(offsets[gi] + id);
                d.selected_weights.push(gw * wi);
            }
        }
    }
    d.expert_probs = expert_probs;
    d.group_probs = Some(q);
    Ok(d)
}

/// Batch-level routing statistics.
///
/// Expert statistics are per group: `expert_frequency[g][j]` is the share of
/// tokens (among those that ran group `g`'s router) whose router argmax is
/// `j`; `expert_probability[g][j]` is the mean router probability. Group
/// statistics are split by sequence modality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchStats {
    pub expert_frequency: Vec<Vec<f64>>,
    pub expert_probability: Vec<Vec<f64>>,
    pub group_frequency_audio: Vec<f64>,
    pub group_probability_audio: Vec<f64>,
    pub group_frequency_video: Vec<f64>,
    pub group_probability_video: Vec<f64>,
    pub group_frequency_av: Vec<f64>,
    pub group_probability_av: Vec<f64>,
    pub tokens_audio: usize,
    pub tokens_video: usize,
    pub tokens_av: usize,
}

fn mean_and_argmax_freq<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut freq = vec![0.0; width];
    let mut prob = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        if r.is_empty() {
            continue;
        }
        freq[argmax(r)] += 1.0;
        prob.iter_mut().zip(r).for_each(|(p, v)| *p += v);
        n += 1;
    }
    if n > 0 {
        freq.iter_mut().for_each(|f| *f /= n as f64);
        prob.iter_mut().for_each(|p| *p /= n as f64);
    }
    (freq, prob)
}

/// Reduces per-sequence decisions in a fixed order (sequence, then token).
pub fn dispatch_stats(decisions: &[Vec<RoutingDecision>], modalities: &[Modality]) -> Result<DispatchStats> {
    if decisions.len() != modalities.len() {
        return precondition("one modality tag per sequence");
    }
    let tokens: Vec<(&RoutingDecision, Modality)> = decisions
        .iter()
        .zip(modalities)
        .flat_map(|(seq, &m)| seq.iter().map(move |d| (d, m)))
        .collect();
    reduce_stats(&tokens)
}

/// Same as [`dispatch_stats`] with one modality tag per token.
pub fn dispatch_stats_tokens(decisions: &[RoutingDecision], modalities: &[Modality]) -> Result<DispatchStats> {
    if decisions.len() != modalities.len() {
        return precondition("one modality tag per token");
    }
    let tokens: Vec<(&RoutingDecision, Modality)> =
        decisions.iter().zip(modalities.iter().copied()).collect();
    reduce_stats(&tokens)
}

fn reduce_stats(tokens: &[(&RoutingDecision, Modality)]) -> Result<DispatchStats> {
    let Some((first, _)) = tokens.first() else {
        return precondition("dispatch statistics of an empty batch");
    };
    let n_groups = first.expert_probs.len();
    let mut stats = DispatchStats::default();
    for g in 0..n_groups {
        let width = tokens
            .iter()
            .map(|(d, _)| d.expert_probs.get(g).map_or(0, Vec::len))
            .max()
            .unwrap_or(0);
        let (f, p) = mean_and_argmax_freq(tokens.iter().filter_map(|(d, _)| d.expert_probs.get(g)), width);
        stats.expert_frequency.push(f);
        stats.expert_probability.push(p);
    }
    for (_, m) in tokens {
        match m {
            Modality::Audio => stats.tokens_audio += 1,
            Modality::Video => stats.tokens_video += 1,
            Modality::AudioVisual => stats.tokens_av += 1,
        }
    }
    if let Some(q0) = &first.group_probs {
        let width = q0.len();
        let subset = |want: Modality| {
            tokens
                .iter()
                .filter(move |(_, m)| *m == want)
                .filter_map(|(d, _)| d.group_probs.as_ref())
        };
        (stats.group_frequency_audio, stats.group_probability_audio) =
            mean_and_argmax_freq(subset(Modality::Audio), width);
        (stats.group_frequency_video, stats.group_probability_video) =
            mean_and_argmax_freq(subset(Modality::Video), width);
        (stats.group_frequency_av, stats.group_probability_av) =
            mean_and_argmax_freq(subset(Modality::AudioVisual), width);
    }
    Ok(stats)
}

/// Combination weight each group receives, zero for unselected groups.
pub fn group_weight_vector(d: &RoutingDecision, groups: usize) -> Vec<f64> {
    let mut w = vec![0.0; groups];
    for (&g, &q) in d.selected_groups.iter().zip(&d.group_weights) {
        if g < groups {
            w[g] += q;
        }
    }
    w
}
