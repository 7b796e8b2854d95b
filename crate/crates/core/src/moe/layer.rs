//! Expert feed-forward networks and the routed layer built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::moe::losses;
use crate::moe::router::{
    argmax, decide_hard, decide_hierarchical, decide_sparse, dispatch_stats_tokens, select_topk, DispatchStats,
    Modality, RoutingDecision,
};
use crate::numeric::{kernels, matmul, Graph, ParamId, ParamStore, Tensor, Var};

/// Published per-FFN cost of the base-size sparse model, MFLOPs. Kept for
/// reference next to [`flops_report`]; not asserted anywhere.
pub const REFERENCE_BASE_SPARSE_MFLOPS: f64 = 921.0;
/// Published per-FFN cost of the matching dense model, MFLOPs.
pub const REFERENCE_BASE_DENSE_MFLOPS: f64 = 472.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Linear,
}

/// Two fully connected layers with an activation in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFFN {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl ExpertFFN {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Self> {
        let (d, h) = w1.dims2();
        if w2.dims2() != (h, d) || b1.len() != h || b2.len() != d {
            return Err(Error::Dimension {
                op: "expert",
                lhs: w1.shape().to_vec(),
                rhs: w2.shape().to_vec(),
            });
        }
        if ![&w1, &b1, &w2, &b2].iter().all(|t| t.is_finite()) {
            return precondition("expert parameters must be finite");
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn d(&self) -> usize {
        self.w1.rows()
    }

    /// Applies the expert to each row of `x` (`rows x d`, or a single
    /// `d`-vector).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (r, d) = x.dims2();
        if d != self.d() {
            return Err(Error::Dimension {
                op: "expert_forward",
                lhs: x.shape().to_vec(),
                rhs: self.w1.shape().to_vec(),
            });
        }
        let x2 = Tensor::matrix(r, d, x.data().to_vec())?;
        let mut hidden = matmul(&x2, &self.w1)?;
        let h = self.b1.len();
        for (i, v) in hidden.data_mut().iter_mut().enumerate() {
            let z = *v + self.b1.data()[i % h];
            *v = match self.activation {
                Activation::Gelu => kernels::gelu(z),
                Activation::Linear => z,
            };
        }
        let mut out = matmul(&hidden, &self.w2)?;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.b2.data()[i % d];
        }
        out.reshape(x.shape().to_vec())
    }
}

pub fn expert_forward(e: &ExpertFFN, x: &Tensor) -> Result<Tensor> {
    e.forward(x)
}

fn default_audio_weight() -> f64 {
    0.5
}

/// How tokens reach experts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MoeMode {
    DenseFfn,
    SparseTopK {
        n_experts: usize,
        k: usize,
    },
    /// Audio experts are ids `0..n_per_group`, visual ones follow.
    Hard {
        n_per_group: usize,
        k: usize,
        #[serde(default = "default_audio_weight")]
        audio_weight: f64,
    },
    Hierarchical {
        groups: usize,
        n_per_group: usize,
        m: usize,
        k_per_group: usize,
    },
}

impl MoeMode {
    /// Two groups, both active, argmax expert in each.
    pub fn hierarchical(n_per_group: usize) -> Self {
        MoeMode::Hierarchical {
            groups: 2,
            n_per_group,
            m: 2,
            k_per_group: 1,
        }
    }

    pub fn n_experts(&self) -> usize {
        match *self {
            MoeMode::DenseFfn => 1,
            MoeMode::SparseTopK { n_experts, .. } => n_experts,
            MoeMode::Hard { n_per_group, .. } => 2 * n_per_group,
            MoeMode::Hierarchical { groups, n_per_group, .. } => groups * n_per_group,
        }
    }

    /// Experts evaluated for one token.
    pub fn active_per_token(&self) -> usize {
        match *self {
            MoeMode::DenseFfn => 1,
            MoeMode::SparseTopK { k, .. } | MoeMode::Hard { k, .. } => k,
            MoeMode::Hierarchical { m, k_per_group, .. } => m * k_per_group,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MoeMode::DenseFfn => true,
            MoeMode::SparseTopK { n_experts, k } => k >= 1 && k <= n_experts,
            MoeMode::Hard {
                n_per_group,
                k,
                audio_weight,
            } => k >= 1 && k <= n_per_group && (0.0..=1.0).contains(&audio_weight),
            MoeMode::Hierarchical {
                groups,
                n_per_group,
                m,
                k_per_group,
            } => groups >= 1 && m >= 1 && m <= groups && k_per_group >= 1 && k_per_group <= n_per_group,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid MoE mode {self:?}")))
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_router_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayerConfig {
    pub mode: MoeMode,
    pub d: usize,
    pub h: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_router_std")]
    pub router_init_std: f64,
    /// z-loss on the group router.
    #[serde(default = "default_true")]
    pub z_loss_inter: bool,
    /// z-loss on expert routers.
    #[serde(default = "default_true")]
    pub z_loss_intra: bool,
}

impl MoeLayerConfig {
    pub fn new(mode: MoeMode, d: usize, h: usize) -> Self {
        Self {
            mode,
            d,
            h,
            activation: Activation::Gelu,
            router_init_std: default_router_std(),
            z_loss_inter: true,
            z_loss_intra: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 {
            return Err(Error::Config("MoE dims must be positive".into()));
        }
        if !(self.router_init_std >= 0.0 && self.router_init_std.is_finite()) {
            return Err(Error::Config("router_init_std must be finite and >= 0".into()));
        }
        self.mode.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// A routed layer whose tensors live in a [`ParamStore`].
///
/// `routers` holds the expert routers: one in top-k mode, audio then visual
/// in hard mode, one per group in hierarchical mode. `inter` is the group
/// router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub cfg: MoeLayerConfig,
    pub experts: Vec<ExpertParams>,
    pub routers: Vec<ParamId>,
    pub inter: Option<ParamId>,
}

/// Result of a value-level forward pass.
#[derive(Clone, Debug)]
pub struct MoeForward {
    pub output: Tensor,
    pub stats: DispatchStats,
    pub expert_calls: usize,
}

/// Result of a forward pass recorded on a tape.
pub struct MoeGraphOut {
    pub y: Var,
    pub l_b: Option<Var>,
    pub l_s: Option<Var>,
    pub l_z: Option<Var>,
    pub stats: DispatchStats,
    pub decisions: Vec<RoutingDecision>,
    pub expert_calls: usize,
}

impl MoeLayer {
    /// Registers fresh parameters under `prefix`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: MoeLayerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d, cfg.h);
        let experts = (0..cfg.mode.n_experts())
            .map(|e| ExpertParams {
                w1: store.normal(format!("{prefix}.expert{e}.w1"), &[d, h], 1.0 / (d as f64).sqrt(), rng),
                b1: store.zeros(format!("{prefix}.expert{e}.b1"), &[h]),
                w2: store.normal(format!("{prefix}.expert{e}.w2"), &[h, d], 1.0 / (h as f64).sqrt(), rng),
                b2: store.zeros(format!("{prefix}.expert{e}.b2"), &[d]),
            })
            .collect();
        let std = cfg.router_init_std;
        let (routers, inter) = match cfg.mode {
            MoeMode::DenseFfn => (Vec::new(), None),
            MoeMode::SparseTopK { n_experts, .. } => {
                (vec![store.normal(format!("{prefix}.router"), &[d, n_experts], std, rng)], None)
            }
            MoeMode::Hard { n_per_group, .. } => (
                vec![
                    store.normal(format!("{prefix}.router_audio"), &[d, n_per_group], std, rng),
                    store.normal(format!("{prefix}.router_video"), &[d, n_per_group], std, rng),
                ],
                None,
            ),
            MoeMode::Hierarchical {
                groups, n_per_group, ..
            } => {
                let inter = store.normal(format!("{prefix}.router_inter"), &[d, groups], std, rng);
                let intra = (0..groups)
                    .map(|gi| store.normal(format!("{prefix}.router_group{gi}"), &[d, n_per_group], std, rng))
                    .collect();
                (intra, Some(inter))
            }
        };
        Ok(Self {
            cfg,
            experts,
            routers,
            inter,
        })
    }

    pub fn expert(&self, store: &ParamStore, e: usize) -> Result<ExpertFFN> {
        let p = self.experts.get(e).ok_or(Error::Index {
            index: e,
            len: self.experts.len(),
        })?;
        ExpertFFN::new(
            store.get(p.w1).clone(),
            store.get(p.b1).clone(),
            store.get(p.w2).clone(),
            store.get(p.b2).clone(),
            self.cfg.activation,
        )
    }

    /// All parameters owned by this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| [e.w1, e.b1, e.w2, e.b2]).collect();
        ids.extend(self.routers.iter().copied());
        ids.extend(self.inter);
        ids
    }

    /// Routes each row of `tokens` (`T x d`).
    pub fn route(&self, store: &ParamStore, tokens: &Tensor, modalities: &[Modality]) -> Result<Vec<RoutingDecision>> {
        let (t, d) = tokens.dims2();
        if d != self.cfg.d {
            return Err(Error::Dimension {
                op: "moe route",
                lhs: tokens.shape().to_vec(),
                rhs: vec![self.cfg.d],
            });
        }
        if modalities.len() != t {
            return precondition("one modality tag per token");
        }
        let x = Tensor::matrix(t, d, tokens.data().to_vec())?;
        let probs = |id: ParamId| -> Result<Tensor> { Ok(kernels::softmax_rows(&matmul(&x, store.get(id))?)) };
        match self.cfg.mode {
            MoeMode::DenseFfn => Ok((0..t)
                .map(|_| RoutingDecision {
                    expert_probs: vec![vec![1.0]],
                    selected_experts: vec![0],
                    selected_weights: vec![1.0],
                    group_probs: None,
                    selected_groups: vec![0],
                    group_weights: vec![1.0],
                    per_group_argmax: vec![0],
                })
                .collect()),
            MoeMode::SparseTopK { k, .. } => {
                let p = probs(self.routers[0])?;
                (0..t).map(|i| decide_sparse(p.row(i).to_vec(), k)).collect()
            }
            MoeMode::Hard {
                n_per_group,
                k,
                audio_weight,
            } => {
                let pa = probs(self.routers[0])?;
                let pv = probs(self.routers[1])?;
                (0..t)
                    .map(|i| {
                        let m = modalities[i];
                        let a = (m != Modality::Video).then(|| pa.row(i).to_vec());
                        let v = (m != Modality::Audio).then(|| pv.row(i).to_vec());
                        decide_hard(m, a, v, n_per_group, k, audio_weight)
                    })
                    .collect()
            }
            MoeMode::Hierarchical { m, k_per_group, .. } => {
                let q = probs(self.inter.expect("hierarchical layer has a group router"))?;
                let intra = self.routers.iter().map(|&r| probs(r)).collect::<Result<Vec<_>>>()?;
                (0..t)
                    .map(|i| {
                        let p = intra.iter().map(|pi| pi.row(i).to_vec()).collect();
                        decide_hierarchical(q.row(i).to_vec(), p, m, k_per_group)
                    })
                    .collect()
            }
        }
    }

    fn check_decision(&self, d: &RoutingDecision) -> Result<()> {
        let n = self.cfg.mode.n_experts();
        let hier = matches!(self.cfg.mode, MoeMode::Hierarchical { .. });
        if d.selected_experts.len() != self.cfg.mode.active_per_token()
            || d.selected_experts.len() != d.selected_weights.len()
            || d.selected_experts.iter().any(|&e| e >= n)
            || d.group_probs.is_some() != hier
        {
            return Err(Error::Config(format!(
                "routing decision does not fit a {:?} layer",
                self.cfg.mode
            )));
        }
        Ok(())
    }

    /// Combines selected expert outputs per token. Only selected experts are
    /// evaluated; `expert_calls` counts (token, expert) evaluations.
    pub fn forward_with_routing(
        &self,
        store: &ParamStore,
        tokens: &Tensor,
        decisions: &[RoutingDecision],
        modalities: &[Modality],
    ) -> Result<MoeForward> {
        let (t, d) = tokens.dims2();
        if decisions.len() != t {
            return precondition("one routing decision per token");
        }
        for dec in decisions {
            self.check_decision(dec)?;
        }
        let experts = (0..self.experts.len())
            .map(|e| self.expert(store, e))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; t * d];
        let mut calls = 0;
        for (i, dec) in decisions.iter().enumerate() {
            let x = Tensor::vector(tokens.data()[i * d..(i + 1) * d].to_vec());
            let acc = &mut out[i * d..(i + 1) * d];
            for (&e, &w) in dec.selected_experts.iter().zip(&dec.selected_weights) {
                let y = experts[e].forward(&x)?;
                calls += 1;
                acc.iter_mut().zip(y.data()).for_each(|(a, v)| *a += w * v);
            }
        }
        let stats = dispatch_stats_tokens(decisions, modalities)?;
        Ok(MoeForward {
            output: Tensor::new(tokens.shape().to_vec(), out)?,
            stats,
            expert_calls: calls,
        })
    }

    /// One expert applied to every row of `x` on a tape.
    pub fn expert_on(&self, g: &mut Graph, store: &ParamStore, e: usize, x: Var) -> Result<Var> {
        let p = self.experts[e];
        let w1 = store.bind(g, p.w1);
        let b1 = store.bind(g, p.b1);
        let w2 = store.bind(g, p.w2);
        let b2 = store.bind(g, p.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = match self.cfg.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Linear => h,
        };
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }

    /// Forward pass over `x` (`N x d`, every token of a batch) on a tape,
    /// with the auxiliary losses. `modalities` tags each row.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        modalities: &[Modality],
    ) -> Result<MoeGraphOut> {
        let (n_tok, d) = g.value(x).dims2();
        if d != self.cfg.d {
            return Err(Error::Dimension {
                op: "moe forward",
                lhs: vec![n_tok, d],
                rhs: vec![self.cfg.d],
            });
        }
        if modalities.len() != n_tok {
            return precondition("one modality tag per token");
        }
        if let MoeMode::DenseFfn = self.cfg.mode {
            let y = self.expert_on(g, store, 0, x)?;
            let decisions = self.route(store, g.value(x), modalities)?;
            let stats = dispatch_stats_tokens(&decisions, modalities)?;
            return Ok(MoeGraphOut {
                y,
                l_b: None,
                l_s: None,
                l_z: None,
                stats,
                decisions,
                expert_calls: n_tok,
            });
        }
        let mut z_terms = Vec::new();
        let mut lb_terms = Vec::new();
        let mut l_s = None;
        let (weights, decisions, stats) = match self.cfg.mode {
            MoeMode::DenseFfn => unreachable!(),
            MoeMode::SparseTopK { n_experts, k } => {
                let w = store.bind(g, self.routers[0]);
                let logits = g.matmul(x, w)?;
                let probs = g.softmax_rows(logits);
                let pv = g.value(probs).clone();
                let decisions = (0..n_tok)
                    .map(|i| decide_sparse(pv.row(i).to_vec(), k))
                    .collect::<Result<Vec<_>>>()?;
                let stats = dispatch_stats_tokens(&decisions, modalities)?;
                let mask = selection_mask(&decisions, n_tok, n_experts, 0);
                let weights = masked_normalized(g, probs, mask)?;
                if self.cfg.z_loss_intra {
                    z_terms.push(losses::router_z_loss_on(g, logits));
                }
                lb_terms.push(losses::load_balancing_on(g, &stats.expert_frequency[0], probs)?);
                (weights, decisions, stats)
            }
            MoeMode::Hard {
                n_per_group,
                k,
                audio_weight,
            } => {
                let mut decisions_parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = vec![(None, None); n_tok];
                let mut group_vars = Vec::new();
                for gi in 0..2 {
                    let idx: Vec<usize> = (0..n_tok)
                        .filter(|&i| match modalities[i] {
                            Modality::Audio => gi == 0,
                            Modality::Video => gi == 1,
                            Modality::AudioVisual => true,
                        })
                        .collect();
                    if idx.is_empty() {
                        group_vars.push(None);
                        continue;
                    }
                    let xs = g.gather_rows(x, &idx)?;
                    let w = store.bind(g, self.routers[gi]);
                    let logits = g.matmul(xs, w)?;
                    let probs = g.softmax_rows(logits);
                    let pv = g.value(probs).clone();
                    for (r, &i) in idx.iter().enumerate() {
                        let row = Some(pv.row(r).to_vec());
                        if gi == 0 {
                            decisions_parts[i].0 = row;
                        } else {
                            decisions_parts[i].1 = row;
                        }
                    }
                    if self.cfg.z_loss_intra {
                        z_terms.push(losses::router_z_loss_on(g, logits));
                    }
                    group_vars.push(Some((idx, probs)));
                }
                let decisions = decisions_parts
                    .into_iter()
                    .zip(modalities)
                    .map(|((a, v), &m)| decide_hard(m, a, v, n_per_group, k, audio_weight))
                    .collect::<Result<Vec<_>>>()?;
                let stats = dispatch_stats_tokens(&decisions, modalities)?;
                let mut blocks = Vec::new();
                for (gi, gv) in group_vars.into_iter().enumerate() {
                    let block = match gv {
                        None => g.constant(Tensor::zeros(&[n_tok, n_per_group])),
                        Some((idx, probs)) => {
                            lb_terms.push(losses::load_balancing_on(g, &stats.expert_frequency[gi], probs)?);
                            let mut mask = Tensor::zeros(&[idx.len(), n_per_group]);
                            let mut scale = Vec::with_capacity(idx.len());
                            for (r, &i) in idx.iter().enumerate() {
                                let dec = &decisions[i];
                                for &e in &dec.selected_experts {
                                    if e / n_per_group == gi {
                                        mask.data_mut()[r * n_per_group + e % n_per_group] = 1.0;
                                    }
                                }
                                let pos = dec.selected_groups.iter().position(|&s| s == gi).expect("group used");
                                scale.push(dec.group_weights[pos]);
                            }
                            let wn = masked_normalized(g, probs, mask)?;
                            let sc = g.constant(Tensor::matrix(idx.len(), 1, scale)?);
                            let wn = g.mul_col(wn, sc)?;
                            g.scatter_rows(wn, &idx, n_tok)?
                        }
                    };
                    blocks.push(block);
                }
                let weights = g.concat_cols(blocks[0], blocks[1])?;
                (weights, decisions, stats)
            }
            MoeMode::Hierarchical {
                groups,
                n_per_group,
                m,
                k_per_group,
            } => {
                let vr = store.bind(g, self.inter.expect("hierarchical layer has a group router"));
                let q_logits = g.matmul(x, vr)?;
                let q = g.softmax_rows(q_logits);
                if self.cfg.z_loss_inter {
                    z_terms.push(losses::router_z_loss_on(g, q_logits));
                }
                let mut intra = Vec::with_capacity(groups);
                for gi in 0..groups {
                    let w = store.bind(g, self.routers[gi]);
                    let logits = g.matmul(x, w)?;
                    if self.cfg.z_loss_intra {
                        z_terms.push(losses::router_z_loss_on(g, logits));
                    }
                    intra.push(g.softmax_rows(logits));
                }
                let qv = g.value(q).clone();
                let iv: Vec<Tensor> = intra.iter().map(|&p| g.value(p).clone()).collect();
                let decisions = (0..n_tok)
                    .map(|i| {
                        let p = iv.iter().map(|t| t.row(i).to_vec()).collect();
                        decide_hierarchical(qv.row(i).to_vec(), p, m, k_per_group)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let stats = dispatch_stats_tokens(&decisions, modalities)?;
                for gi in 0..groups {
                    lb_terms.push(losses::load_balancing_on(g, &stats.expert_frequency[gi], intra[gi])?);
                }
                let mut gmask = Tensor::zeros(&[n_tok, groups]);
                for (i, dec) in decisions.iter().enumerate() {
                    for &s in &dec.selected_groups {
                        gmask.data_mut()[i * groups + s] = 1.0;
                    }
                }
                let qt = masked_normalized(g, q, gmask)?;
                let mut blocks = Vec::with_capacity(groups);
                for gi in 0..groups {
                    let at: Vec<(usize, usize)> = (0..n_tok).map(|i| (i, gi)).collect();
                    let qcol = g.gather_elems(qt, &at)?;
                    let block = if k_per_group == 1 {
                        let mut onehot = Tensor::zeros(&[n_tok, n_per_group]);
                        for (i, dec) in decisions.iter().enumerate() {
                            if dec.selected_groups.contains(&gi) {
                                onehot.data_mut()[i * n_per_group + argmax(iv[gi].row(i))] = 1.0;
                            }
                        }
                        let oh = g.constant(onehot);
                        g.mul_col(oh, qcol)?
                    } else {
                        let mut mask = Tensor::zeros(&[n_tok, n_per_group]);
                        for i in 0..n_tok {
                            let (ids, _) = select_topk(iv[gi].row(i), k_per_group)?;
                            for j in ids {
                                mask.data_mut()[i * n_per_group + j] = 1.0;
                            }
                        }
                        let pt = masked_normalized(g, intra[gi], mask)?;
                        g.mul_col(pt, qcol)?
                    };
                    blocks.push(block);
                }
                let mut weights = blocks[0];
                for &b in &blocks[1..] {
                    weights = g.concat_cols(weights, b)?;
                }
                if groups == 2 {
                    let mut terms = Vec::new();
                    for (want, gi, freq) in [
                        (Modality::Audio, 0, stats.group_frequency_audio.first().copied()),
                        (Modality::Video, 1, stats.group_frequency_video.get(1).copied()),
                    ] {
                        let idx: Vec<usize> = (0..n_tok).filter(|&i| modalities[i] == want).collect();
                        if idx.is_empty() {
                            continue;
                        }
                        let qs = g.gather_rows(q, &idx)?;
                        terms.push(losses::load_biasing_term_on(g, freq.unwrap_or(0.0), qs, gi)?);
                    }
                    l_s = Some(sum_vars(g, &terms)?.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))));
                }
                (weights, decisions, stats)
            }
        };

        // dispatch: gather each expert's tokens, evaluate, scale, scatter back
        let n_exp = self.cfg.mode.n_experts();
        let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); n_exp];
        for (i, dec) in decisions.iter().enumerate() {
            for &e in &dec.selected_experts {
                per_expert[e].push(i);
            }
        }
        let mut expert_calls = 0;
        let mut parts = Vec::new();
        for (e, idx) in per_expert.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            expert_calls += idx.len();
            let xs = g.gather_rows(x, idx)?;
            let ys = self.expert_on(g, store, e, xs)?;
            let at: Vec<(usize, usize)> = idx.iter().map(|&i| (i, e)).collect();
            let w = g.gather_elems(weights, &at)?;
            let ys = g.mul_col(ys, w)?;
            parts.push(g.scatter_rows(ys, idx, n_tok)?);
        }
        let y = sum_vars(g, &parts)?.expect("at least one expert runs");
        let l_b = sum_vars(g, &lb_terms)?;
        let l_z = sum_vars(g, &z_terms)?;
        Ok(MoeGraphOut {
            y,
            l_b,
            l_s,
            l_z,
            stats,
            decisions,
            expert_calls,
        })
    }
}

fn selection_mask(decisions: &[RoutingDecision], rows: usize, cols: usize, offset: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[rows, cols]);
    for (i, d) in decisions.iter().enumerate() {
        for &e in &d.selected_experts {
            if e >= offset && e < offset + cols {
                mask.data_mut()[i * cols + e - offset] = 1.0;
            }
        }
    }
    mask
}

/// Zeroes unselected entries and renormalizes each row over the rest.
fn masked_normalized(g: &mut Graph, probs: Var, mask: Tensor) -> Result<Var> {
    let m = g.constant(mask);
    let kept = g.mul(probs, m)?;
    g.normalize_rows(kept)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Multiply-add counts, two operations per multiply-add.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub activated_flops: f64,
    pub total_param_flops: f64,
    pub dense_ffn_flops: f64,
    pub ratio: f64,
}

/// Per-layer cost for `tokens` tokens. Biases and activations are ignored;
/// router cost is `d` per router output per token.
pub fn flops_report(cfg: &MoeLayerConfig, tokens: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    if tokens == 0 {
        return precondition("flops report needs tokens > 0");
    }
    let (d, h, t) = (cfg.d as f64, cfg.h as f64, tokens as f64);
    let dense = 2.0 * d * h * 2.0 * t;
    let router_outputs = match cfg.mode {
        MoeMode::DenseFfn => 0,
        MoeMode::SparseTopK { n_experts, .. } => n_experts,
        MoeMode::Hard { n_per_group, .. } => 2 * n_per_group,
        MoeMode::Hierarchical {
            groups, n_per_group, ..
        } => groups + groups * n_per_group,
    } as f64;
    let router = d * router_outputs * t;
    let activated = cfg.mode.active_per_token() as f64 * dense + router;
    let total = cfg.mode.n_experts() as f64 * dense + router;
    Ok(FlopsReport {
        activated_flops: activated,
        total_param_flops: total,
        dense_ffn_flops: dense,
        ratio: activated / dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn expert_closed_forms() {
        let z = ExpertFFN::new(
            Tensor::zeros(&[3, 5]),
            Tensor::zeros(&[5]),
            Tensor::zeros(&[5, 3]),
            Tensor::zeros(&[3]),
            Activation::Gelu,
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(z.forward(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
        let id = ExpertFFN::new(
            Tensor::identity(3),
            Tensor::zeros(&[3]),
            Tensor::identity(3),
            Tensor::zeros(&[3]),
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);
        assert!(id.forward(&Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn expert_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = ExpertFFN::new(
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[4]),
            Activation::Gelu,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, &[4]);
        let y = e.forward(&x).unwrap();
        for o in 0..4 {
            let mut acc = e.b2.data()[o];
            for j in 0..6 {
                let mut z = e.b1.data()[j];
                for i in 0..4 {
                    z += x.data()[i] * e.w1.at(i, j);
                }
                acc += kernels::gelu(z) * e.w2.at(j, o);
            }
            assert!((acc - y.data()[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn flops_ratios() {
        let sparse = MoeLayerConfig::new(MoeMode::SparseTopK { n_experts: 8, k: 2 }, 32, 64);
        let r = flops_report(&sparse, 100).unwrap();
        assert!((r.ratio - (2.0 + 2.0 / 64.0)).abs() < 1e-12);
        let dense = MoeLayerConfig::new(MoeMode::DenseFfn, 32, 64);
        assert_eq!(flops_report(&dense, 10).unwrap().ratio, 1.0);
        assert!(flops_report(&dense, 0).is_err());
    }

    #[test]
    fn mode_validation() {
        assert!(MoeMode::SparseTopK { n_experts: 2, k: 3 }.validate().is_err());
        assert!(MoeMode::hierarchical(4).validate().is_ok());
        let json = r#"{"kind":"hard","n_per_group":4,"k":2}"#;
        let m: MoeMode = serde_json::from_str(json).unwrap();
        assert_eq!(
            m,
            MoeMode::Hard {
                n_per_group: 4,
                k: 2,
                audio_weight: 0.5
            }
        );
    }
}
