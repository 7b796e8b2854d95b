//! Auxiliary router losses and the combined training objective.
//!
//! Each loss has a plain value form and a tape form. The tape forms take the
//! frequency statistics (`f`, `g`) as constants, so gradients only reach the
//! mean probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::moe::router::DispatchStats;
use crate::numeric::{kernels, Graph, Tensor, Var};

/// `n * sum_i f_i P_i`.
pub fn load_balancing_loss(f: &[f64], p: &[f64]) -> Result<f64> {
    if f.len() != p.len() {
        return Err(Error::Dimension {
            op: "load_balancing_loss",
            lhs: vec![f.len()],
            rhs: vec![p.len()],
        });
    }
    if f.is_empty() {
        return precondition("load balancing over zero experts");
    }
    let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
    Ok(f.len() as f64 * dot)
}

/// Sum of per-group balancing terms, each scaled by its own group size.
pub fn grouped_load_balancing_loss(groups: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    groups
        .iter()
        .filter(|(f, _)| !f.is_empty())
        .map(|(f, p)| load_balancing_loss(f, p))
        .sum()
}

/// Mean over rows of `logsumexp(row)^2`. Zero for an empty batch.
pub fn router_z_loss(logit_rows: &[Vec<f64>]) -> f64 {
    if logit_rows.is_empty() {
        return 0.0;
    }
    let s: f64 = logit_rows
        .iter()
        .map(|r| {
            let l = kernels::logsumexp(r);
            l * l
        })
        .sum();
    s / logit_rows.len() as f64
}

/// `(1 - g^A_1 Q^A_1) + (1 - g^V_2 Q^V_2)`. A modality with no unimodal
/// tokens contributes zero.
pub fn load_biasing_loss(stats: &DispatchStats) -> Result<f64> {
    let widths = [
        stats.group_frequency_audio.len(),
        stats.group_frequency_video.len(),
    ];
    if widths.iter().any(|&w| w != 2 && w != 0) {
        return Err(Error::Unsupported(format!(
            "load biasing needs exactly two groups, got {}",
            widths[0].max(widths[1])
        )));
    }
    let mut loss = 0.0;
    if stats.tokens_audio > 0 && widths[0] == 2 {
        loss += 1.0 - stats.group_frequency_audio[0] * stats.group_probability_audio[0];
    }
    if stats.tokens_video > 0 && widths[1] == 2 {
        loss += 1.0 - stats.group_frequency_video[1] * stats.group_probability_video[1];
    }
    Ok(loss)
}

/// Coefficients of the auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCoeffs {
    pub c_b: f64,
    pub c_s: f64,
    pub c_z: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self {
            c_b: 1e-2,
            c_s: 1e-2,
            c_z: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_b: f64,
    pub l_s: f64,
    pub l_z: f64,
    pub coeffs: LossCoeffs,
    pub total: f64,
}

pub fn total_aux_loss(l_ce: f64, l_b: f64, l_s: f64, l_z: f64, coeffs: LossCoeffs) -> Result<LossBundle> {
    for (name, v) in [("L_CE", l_ce), ("L_B", l_b), ("L_S", l_s), ("L_Z", l_z)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                coordinate: 0,
                detail: format!("{name} = {v}"),
            });
        }
    }
    let total = l_ce + coeffs.c_b * l_b + coeffs.c_s * l_s + coeffs.c_z * l_z;
    Ok(LossBundle {
        l_ce,
        l_b,
        l_s,
        l_z,
        coeffs,
        total,
    })
}

/// Tape form of the balancing loss. `probs` is `tokens x n`; `P` is its
/// column mean and `f` a constant.
pub fn load_balancing_on(g: &mut Graph, f: &[f64], probs: Var) -> Result<Var> {
    let (t, n) = g.value(probs).dims2();
    if f.len() != n {
        return Err(Error::Dimension {
            op: "load_balancing_loss",
            lhs: vec![f.len()],
            rhs: vec![t, n],
        });
    }
    let fc = g.constant(Tensor::matrix(n, 1, f.to_vec())?);
    let per_token = g.matmul(probs, fc)?;
    let s = g.sum(per_token);
    Ok(g.scale(s, n as f64 / t as f64))
}

/// Tape form of the z-loss over a `tokens x n` logit matrix.
pub fn router_z_loss_on(g: &mut Graph, logits: Var) -> Var {
    let l = g.logsumexp_rows(logits);
    let sq = g.square(l);
    g.mean(sq)
}

/// Tape form of one load-biasing term: `1 - freq * mean(q[:, group])` over
/// the rows of `group_probs`.
pub fn load_biasing_term_on(g: &mut Graph, freq: f64, group_probs: Var, group: usize) -> Result<Var> {
    let (t, w) = g.value(group_probs).dims2();
    if group >= w {
        return Err(Error::Index { index: group, len: w });
    }
    let at: Vec<(usize, usize)> = (0..t).map(|r| (r, group)).collect();
    let col = g.gather_elems(group_probs, &at)?;
    let q = g.mean(col);
    let neg = g.scale(q, -freq);
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balancing_closed_forms() {
        for n in [2usize, 4, 8, 16] {
            let u = vec![1.0 / n as f64; n];
            assert!((load_balancing_loss(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        }
        let one_hot = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(load_balancing_loss(&one_hot, &one_hot).unwrap(), 4.0);
        assert!(load_balancing_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn z_loss_closed_forms() {
        let z = router_z_loss(&[vec![0.0; 8]]);
        assert!((z - 8f64.ln().powi(2)).abs() < 1e-12);
        assert!((router_z_loss(&[vec![3.5]]) - 12.25).abs() < 1e-12);
        let big = router_z_loss(&[vec![700.0, 700.0]]);
        assert!((big - (700.0 + 2f64.ln()).powi(2)).abs() < 1e-6);
        assert_eq!(router_z_loss(&[]), 0.0);
    }

    #[test]
    fn biasing_closed_forms() {
        let mut s = DispatchStats {
            group_frequency_audio: vec![0.5, 0.5],
            group_probability_audio: vec![0.5, 0.5],
            group_frequency_video: vec![0.5, 0.5],
            group_probability_video: vec![0.5, 0.5],
            tokens_audio: 3,
            tokens_video: 3,
            ..Default::default()
        };
        assert!((load_biasing_loss(&s).unwrap() - 1.5).abs() < 1e-15);
        s.group_frequency_audio = vec![1.0, 0.0];
        s.group_probability_audio = vec![1.0, 0.0];
        s.group_frequency_video = vec![0.0, 1.0];
        s.group_probability_video = vec![0.0, 1.0];
        assert_eq!(load_biasing_loss(&s).unwrap(), 0.0);
        let av_only = DispatchStats {
            tokens_av: 5,
            group_frequency_av: vec![0.5, 0.5],
            group_probability_av: vec![0.5, 0.5],
            ..Default::default()
        };
        assert_eq!(load_biasing_loss(&av_only).unwrap(), 0.0);
        s.group_frequency_audio = vec![0.3, 0.3, 0.4];
        assert!(matches!(load_biasing_loss(&s), Err(Error::Unsupported(_))));
    }

    #[test]
    fn total_examples() {
        let b = total_aux_loss(2.0, 1.0, 1.5, 4.0, LossCoeffs::default()).unwrap();
        assert!((b.total - 2.029).abs() < 1e-12);
        let zero = LossCoeffs {
            c_b: 0.0,
            c_s: 0.0,
            c_z: 0.0,
        };
        assert_eq!(total_aux_loss(2.0, 1.0, 1.5, 4.0, zero).unwrap().total, 2.0);
        assert!(total_aux_loss(f64::NAN, 0.0, 0.0, 0.0, zero).is_err());
    }

    #[test]
    fn tape_forms_match_values() {
        let probs = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let f = [1.0 / 3.0, 2.0 / 3.0];
        let mut g = Graph::new();
        let p = g.leaf(probs.clone());
        let lb = load_balancing_on(&mut g, &f, p).unwrap();
        let pm = [1.3 / 3.0, 1.7 / 3.0];
        assert!((g.scalar(lb) - load_balancing_loss(&f, &pm).unwrap()).abs() < 1e-12);
        let lz = router_z_loss_on(&mut g, p);
        let rows: Vec<Vec<f64>> = (0..3).map(|r| probs.row(r).to_vec()).collect();
        assert!((g.scalar(lz) - router_z_loss(&rows)).abs() < 1e-12);
        let ls = load_biasing_term_on(&mut g, 0.5, p, 1).unwrap();
        assert!((g.scalar(ls) - (1.0 - 0.5 * pm[1])).abs() < 1e-12);
    }
}
