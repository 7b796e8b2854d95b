//! Finite-difference sweep over every differentiable operation, shared by
//! the `gradcheck` subcommand and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{mlm_centroids, mlm_on, prediction_loss_on};
use crate::error::{Error, Result};
use crate::model::{DecoderFfn, Model, ModelConfig};
use crate::moe::{self, Activation, Modality, MoeLayer, MoeLayerConfig, MoeMode};
use crate::numeric::{grad_check, Graph, ParamStore, Tensor, Var};

pub const MODULES: [&str; 5] = ["numeric", "moe", "losses", "distill", "model"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output coordinate contributes to the checked gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Probe<'a> = Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>;

struct Case<'a> {
    name: String,
    x: Tensor,
    f: Probe<'a>,
}

fn case<'a>(name: &str, x: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'a) -> Case<'a> {
    Case {
        name: name.to_string(),
        x,
        f: Box::new(f),
    }
}

fn numeric_cases(seed: u64) -> Vec<Case<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x34 = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b45 = rand_tensor(&mut rng, &[4, 5], 1.0);
    let a23 = rand_tensor(&mut rng, &[2, 3], 1.0);
    let o34 = rand_tensor(&mut rng, &[3, 4], 1.0);
    let row = rand_tensor(&mut rng, &[4], 1.0);
    let col = rand_tensor(&mut rng, &[3], 1.0);
    let pos34 = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(0.2..2.0)).collect()).expect("shape");
    let kv = rand_tensor(&mut rng, &[5, 4], 1.0);
    let vv = rand_tensor(&mut rng, &[5, 3], 1.0);
    let mut mask = Tensor::zeros(&[3, 5]);
    mask.data_mut()[4] = -1e9;
    let s = seed;
    let c = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    vec![
        case("matmul_lhs", x34.clone(), move |g, x| {
            let b = c(g, &b45);
            let y = g.matmul(x, b)?;
            project(g, y, s)
        }),
        case("matmul_rhs", x34.clone(), {
            let a = a23.clone();
            move |g, x| {
                let a = c(g, &a);
                let y = g.matmul(a, x)?;
                project(g, y, s)
            }
        }),
        case("add", x34.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.add(x, o)?;
                project(g, y, s)
            }
        }),
        case("sub", x34.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.sub(o, x)?;
                project(g, y, s)
            }
        }),
        case("mul", x34.clone(), move |g, x| {
            let y = g.mul(x, x)?;
            project(g, y, s)
        }),
        case("scale", x34.clone(), move |g, x| {
            let y = g.scale(x, -1.7);
            project(g, y, s)
        }),
        case("add_row", row.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.add_row(o, x)?;
                project(g, y, s)
            }
        }),
        case("mul_col", x34.clone(), {
            let col = col.clone();
            move |g, x| {
                let cv = c(g, &col);
                let y = g.mul_col(x, cv)?;
                project(g, y, s)
            }
        }),
        case("mul_col_weights", col.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.mul_col(o, x)?;
                project(g, y, s)
            }
        }),
        case("gelu", x34.clone(), move |g, x| {
            let y = g.gelu(x);
            project(g, y, s)
        }),
        case("softmax_rows", x34.clone(), move |g, x| {
            let y = g.softmax_rows(x);
            project(g, y, s)
        }),
        case("logsumexp_rows", x34.clone(), move |g, x| {
            let y = g.logsumexp_rows(x);
            project(g, y, s)
        }),
        case("transpose", x34.clone(), move |g, x| {
            let y = g.transpose(x);
            project(g, y, s)
        }),
        case("concat_cols", x34.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.concat_cols(o, x)?;
                project(g, y, s)
            }
        }),
        case("concat_rows", x34.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                let y = g.concat_rows(&[x, o, x])?;
                project(g, y, s)
            }
        }),
        case("gather_rows", x34.clone(), move |g, x| {
            let y = g.gather_rows(x, &[2, 0, 2, 1])?;
            project(g, y, s)
        }),
        case("scatter_rows", x34.clone(), move |g, x| {
            let y = g.scatter_rows(x, &[4, 0, 2], 6)?;
            project(g, y, s)
        }),
        case("gather_elems", x34.clone(), move |g, x| {
            let y = g.gather_elems(x, &[(0, 1), (2, 3), (0, 1)])?;
            project(g, y, s)
        }),
        case("sum", x34.clone(), move |g, x| {
            let y = g.sum(x);
            project(g, y, s)
        }),
        case("mean", x34.clone(), move |g, x| {
            let y = g.mean(x);
            project(g, y, s)
        }),
        case("square", x34.clone(), move |g, x| {
            let y = g.square(x);
            project(g, y, s)
        }),
        case("standardize_rows", x34.clone(), move |g, x| {
            let y = g.standardize_rows(x, 1e-5);
            project(g, y, s)
        }),
        case("normalize_rows", pos34, move |g, x| {
            let y = g.normalize_rows(x)?;
            project(g, y, s)
        }),
        case("cross_entropy_rows", x34.clone(), move |g, x| g.cross_entropy_rows(x, &[3, 0, 1])),
        case("mse", x34.clone(), {
            let o = o34.clone();
            move |g, x| {
                let o = c(g, &o);
                g.mse(x, o)
            }
        }),
        case("weighted_sum", x34.clone(), move |g, x| {
            let a = g.sum(x);
            let sq = g.square(x);
            let b = g.mean(sq);
            g.weighted_sum(&[(0.3, a), (-2.0, b)])
        }),
        case("attention_q", x34.clone(), {
            let (kv, vv, mask) = (kv.clone(), vv.clone(), mask.clone());
            move |g, x| {
                let k = c(g, &kv);
                let v = c(g, &vv);
                let y = g.attention(x, k, v, Some(&mask))?;
                project(g, y, s)
            }
        }),
        case("attention_k", kv.clone(), {
            let (q, vv) = (x34.clone(), vv.clone());
            move |g, x| {
                let q = c(g, &q);
                let v = c(g, &vv);
                let y = g.attention(q, x, v, None)?;
                project(g, y, s)
            }
        }),
        case("attention_v", vv.clone(), {
            let (q, kv) = (x34, kv);
            move |g, x| {
                let q = c(g, &q);
                let k = c(g, &kv);
                let y = g.attention(q, k, x, Some(&mask))?;
                project(g, y, s)
            }
        }),
    ]
}

fn moe_fixture(mode: MoeMode, seed: u64) -> Result<(ParamStore, MoeLayer)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = MoeLayerConfig::new(mode, 6, 8);
    cfg.router_init_std = 0.8;
    let l = MoeLayer::init(&mut store, "moe", cfg, &mut rng)?;
    for e in &l.experts {
        for id in [e.b1, e.b2] {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    Ok((store, l))
}

fn moe_probe(l: &MoeLayer, store: &ParamStore, mods: &[Modality], g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let out = l.forward_on(g, store, x, mods)?;
    let mut total = project(g, out.y, seed)?;
    for aux in [out.l_b, out.l_s, out.l_z].into_iter().flatten() {
        total = g.add(total, aux)?;
    }
    Ok(total)
}

fn moe_cases(seed: u64) -> Result<Vec<Case<'static>>> {
    let mut out = Vec::new();
    let mods: Vec<Modality> = (0..5)
        .map(|i| [Modality::Audio, Modality::Video, Modality::AudioVisual][i % 3])
        .collect();
    let modes = [
        ("sparse", MoeMode::SparseTopK { n_experts: 4, k: 2 }),
        ("hierarchical", MoeMode::hierarchical(3)),
        (
            "hard",
            MoeMode::Hard {
                n_per_group: 3,
                k: 2,
                audio_weight: 0.5,
            },
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let x = rand_tensor(&mut rng, &[5, 6], 1.0);
    let (store0, layer0) = moe_fixture(MoeMode::DenseFfn, seed)?;
    for act in [Activation::Gelu, Activation::Linear] {
        let mut l = layer0.clone();
        l.cfg.activation = act;
        let store = store0.clone();
        let name = format!("expert_forward_{}", if act == Activation::Gelu { "gelu" } else { "linear" });
        out.push(case(&name, x.clone(), move |g, xv| {
            let y = l.expert_on(g, &store, 0, xv)?;
            project(g, y, seed)
        }));
        let mut l = layer0.clone();
        l.cfg.activation = act;
        let store = store0.clone();
        let w1 = l.experts[0].w1;
        let p = store.get(w1).clone();
        let xc = x.clone();
        out.push(case(&format!("{name}_w1"), p, move |g, pv| {
            g.bind_param(w1.0, pv);
            let xv = g.constant(xc.clone());
            let y = l.expert_on(g, &store, 0, xv)?;
            project(g, y, seed)
        }));
    }
    for (name, mode) in modes {
        let (store, l) = moe_fixture(mode, seed)?;
        let m = mods.clone();
        let (s2, l2) = (store.clone(), l.clone());
        out.push(case(&format!("moe_forward_{name}"), x.clone(), move |g, xv| {
            moe_probe(&l2, &s2, &m, g, xv, seed)
        }));
        let ids: Vec<_> = l.routers.iter().copied().chain(l.inter).collect();
        for (ri, id) in ids.into_iter().enumerate() {
            let (s2, l2, m, xc) = (store.clone(), l.clone(), mods.clone(), x.clone());
            out.push(case(
                &format!("moe_forward_{name}_router{ri}"),
                store.get(id).clone(),
                move |g, pv| {
                    g.bind_param(id.0, pv);
                    let xv = g.constant(xc.clone());
                    moe_probe(&l2, &s2, &m, g, xv, seed)
                },
            ));
        }
    }
    Ok(out)
}

fn loss_cases(seed: u64) -> Vec<Case<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let logits = rand_tensor(&mut rng, &[6, 4], 2.0);
    let f: Vec<f64> = {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let gl = rand_tensor(&mut rng, &[6, 2], 2.0);
    let freq = rng.random_range(0.0..1.0);
    vec![
        case("load_balancing", logits.clone(), move |g, x| {
            let p = g.softmax_rows(x);
            moe::load_balancing_on(g, &f, p)
        }),
        case("router_z_loss", logits, |g, x| Ok(moe::router_z_loss_on(g, x))),
        case("load_biasing_audio", gl.clone(), move |g, x| {
            let q = g.softmax_rows(x);
            moe::load_biasing_term_on(g, freq, q, 0)
        }),
        case("load_biasing_video", gl, move |g, x| {
            let q = g.softmax_rows(x);
            moe::load_biasing_term_on(g, 1.0 - freq, q, 1)
        }),
    ]
}

fn distill_cases(seed: u64) -> Result<Vec<Case<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd157);
    let pred = rand_tensor(&mut rng, &[7, 5], 1.0);
    let t1 = rand_tensor(&mut rng, &[3, 5], 1.0);
    let t2 = rand_tensor(&mut rng, &[4, 5], 1.0);
    let model = Model::new(tiny_config(), seed, seed + 1)?;
    let centroids = mlm_centroids(4, 8, seed)?;
    let feats = rand_tensor(&mut rng, &[7, 8], 1.0);
    let tf1 = rand_tensor(&mut rng, &[3, 8], 1.0);
    let tf2 = rand_tensor(&mut rng, &[4, 8], 1.0);
    Ok(vec![
        case("prediction_loss", pred, move |g, x| {
            prediction_loss_on(g, x, &[0..3, 3..7], &[&t1, &t2], &[vec![0, 2], vec![1, 2, 3]])
        }),
        case("mlm", feats, move |g, x| {
            mlm_on(
                g,
                &model.params,
                &model.layout.mlm_head,
                x,
                &[0..3, 3..7],
                &[&tf1, &tf2],
                &[vec![1], vec![0, 3]],
                &centroids,
            )
        }),
    ])
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim_audio: 4,
        dim_video: 3,
        d: 8,
        h: 12,
        enc_blocks: 2,
        dec_blocks: 1,
        ffn: DecoderFfn {
            mode: MoeMode::hierarchical(2),
            activation: Activation::Gelu,
            router_init_std: 0.5,
            z_loss_inter: true,
            z_loss_intra: true,
        },
        vocab: 5,
        topk_blocks: 2,
        max_frames: 12,
        max_tokens: 6,
        frames_per_token: 2,
        mlm_clusters: 4,
    }
}

fn model_cases(seed: u64) -> Result<Vec<Case<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x30de1);
    let model = Model::new(tiny_config(), seed, seed + 1)?;
    let audio = rand_tensor(&mut rng, &[6, 4], 1.0);
    let video = rand_tensor(&mut rng, &[6, 3], 1.0);
    let feats = rand_tensor(&mut rng, &[6, 8], 1.0);
    let m2 = model.clone();
    let w = model.layout.audio_proj.w;
    Ok(vec![
        case("encode", m2.params.get(w).clone(), move |g, pv| {
            g.bind_param(w.0, pv);
            let enc = m2.layout.encode_on(g, &m2.params, &[(&audio, &video)])?;
            let y = m2.layout.top_blocks_mean(g, &enc, 2)?;
            project(g, y, seed)
        }),
        case("decode", feats, move |g, f| {
            let labels: &[usize] = &[1, 4, 0];
            let out = model
                .layout
                .decode_on(g, &model.params, f, &[0..6], &[labels], &[Modality::AudioVisual])?;
            let mut total = out.l_ce;
            for m in &out.moe {
                for aux in [m.l_b, m.l_s, m.l_z].into_iter().flatten() {
                    total = g.add(total, aux)?;
                }
            }
            Ok(total)
        }),
    ])
}

fn cases_for(module: &str, seed: u64) -> Result<Vec<Case<'static>>> {
    match module {
        "numeric" => Ok(numeric_cases(seed)),
        "moe" => moe_cases(seed),
        "losses" => Ok(loss_cases(seed)),
        "distill" => distill_cases(seed),
        "model" => model_cases(seed),
        other => Err(Error::Config(format!(
            "unknown module `{other}`; expected one of {}",
            MODULES.join(", ")
        ))),
    }
}

/// Runs every check in `module` (or all modules) for seeds `0..seeds` and
/// reports the worst error per operation.
pub fn gradcheck_suite(module: Option<&str>, seeds: u64, eps: f64) -> Result<Vec<CheckResult>> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => MODULES.to_vec(),
    };
    let mut out: Vec<CheckResult> = Vec::new();
    for m in modules {
        let module: &'static str = MODULES
            .iter()
            .find(|k| **k == m)
            .ok_or_else(|| Error::Config(format!("unknown module `{m}`; expected one of {}", MODULES.join(", "))))?;
        let start = out.len();
        for seed in 0..seeds {
            for (i, c) in cases_for(module, seed)?.into_iter().enumerate() {
                let err = grad_check(&c.f, &c.x, eps)?;
                match out.get_mut(start + i) {
                    Some(r) => r.max_error = r.max_error.max(err),
                    None => out.push(CheckResult {
                        module,
                        name: c.name,
                        max_error: err,
                    }),
                }
            }
        }
    }
    Ok(out)
}
