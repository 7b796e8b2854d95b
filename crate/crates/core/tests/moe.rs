use avmoe::moe::*;
use avmoe::numeric::{grad_check, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn layer(mode: MoeMode, seed: u64) -> (ParamStore, MoeLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = MoeLayerConfig::new(mode, 6, 8);
    cfg.router_init_std = 0.8;
    let l = MoeLayer::init(&mut store, "moe", cfg, &mut rng).unwrap();
    // non-zero biases so they matter in the checks
    for e in &l.experts {
        for id in [e.b1, e.b2] {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    (store, l)
}

fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

#[test]
fn topk_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for k in 1..=n {
            let (ids, w) = select_topk(&probs, k).unwrap();
            // lexicographically smallest subset among those with the largest sum
            let best = all_subsets(n, k)
                .into_iter()
                .map(|sub| (sub.iter().map(|&i| probs[i]).sum::<f64>(), sub))
                .fold(None::<(f64, Vec<usize>)>, |acc, (s, sub)| match acc {
                    Some((bs, b)) if bs >= s => Some((bs, b)),
                    _ => Some((s, sub)),
                })
                .unwrap()
                .1;
            let mut got = ids.clone();
            got.sort();
            assert_eq!(got, best);
            let total: f64 = best.iter().map(|&i| probs[i]).sum();
            for (i, wi) in ids.iter().zip(&w) {
                assert!((probs[*i] / total - wi).abs() < 1e-12);
            }
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn dense_routing_matches_compositional_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[5, 7], 1.0);
    let x = rand_tensor(&mut rng, &[5], 1.0);
    let p = route_dense(&RouterParams::new(w.clone()).unwrap(), &x).unwrap();
    let logits: Vec<f64> = (0..7).map(|j| (0..5).map(|i| x.data()[i] * w.at(i, j)).sum()).collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for j in 0..7 {
        assert!(((logits[j] - m).exp() / z - p.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn positive_scaling_keeps_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let r = RouterParams::new(rand_tensor(&mut rng, &[4, 6], 1.0)).unwrap();
        let x = rand_tensor(&mut rng, &[4], 1.0);
        let c = rng.random_range(0.01..20.0);
        let a = select_topk(route_dense(&r, &x).unwrap().data(), 2).unwrap().0;
        let b = select_topk(route_dense(&r, &x.map(|v| v * c)).unwrap().data(), 2).unwrap().0;
        assert_eq!(a, b);
    }
}

#[test]
fn hierarchical_argmax_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let inter = RouterParams::new(rand_tensor(&mut rng, &[3, 2], 1.0)).unwrap();
        let intra: Vec<_> = (0..2)
            .map(|_| RouterParams::new(rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap())
            .collect();
        let x = rand_tensor(&mut rng, &[3], 1.0);
        let d = route_hierarchical(&inter, &intra, &x, 2, 1).unwrap();
        for (slot, &gi) in d.selected_groups.iter().enumerate() {
            let p = route_dense(&intra[gi], &x).unwrap();
            let mut best = 0;
            for j in 1..4 {
                if p.data()[j] > p.data()[best] {
                    best = j;
                }
            }
            assert_eq!(d.per_group_argmax[slot], best);
            assert_eq!(d.selected_experts[slot], gi * 4 + best);
        }
        assert!((d.group_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((d.selected_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn hard_routing_stays_in_permitted_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let ra = RouterParams::new(rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        let rv = RouterParams::new(rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        let x = rand_tensor(&mut rng, &[3], 1.0);
        let a = route_hard(Modality::Audio, (&ra, &rv), &x, 2, 0.5).unwrap();
        assert!(a.selected_experts.iter().all(|&e| e < 4));
        let v = route_hard(Modality::Video, (&ra, &rv), &x, 2, 0.5).unwrap();
        assert!(v.selected_experts.iter().all(|&e| e >= 4));
        let (ids, _) = select_topk(route_dense(&rv, &x).unwrap().data(), 2).unwrap();
        assert_eq!(v.selected_experts, ids.iter().map(|i| i + 4).collect::<Vec<_>>());
    }
}

#[test]
fn dispatch_stats_hand_count() {
    let dec = |probs: Vec<f64>, q: Vec<f64>| RoutingDecision {
        per_group_argmax: vec![argmax(&probs)],
        expert_probs: vec![probs],
        selected_experts: vec![0],
        selected_weights: vec![1.0],
        selected_groups: vec![0],
        group_weights: vec![1.0],
        group_probs: Some(q),
    };
    let seqs = vec![
        vec![dec(vec![0.7, 0.2, 0.1], vec![0.9, 0.1]), dec(vec![0.1, 0.8, 0.1], vec![0.6, 0.4])],
        vec![dec(vec![0.2, 0.2, 0.6], vec![0.3, 0.7]), dec(vec![0.5, 0.4, 0.1], vec![0.2, 0.8])],
        vec![dec(vec![0.3, 0.3, 0.4], vec![0.5, 0.5]), dec(vec![0.1, 0.1, 0.8], vec![0.4, 0.6])],
    ];
    let mods = [Modality::Audio, Modality::Video, Modality::AudioVisual];
    let s = dispatch_stats(&seqs, &mods).unwrap();
    // argmaxes: 0, 1, 2, 0, 2, 2
    let f = [2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0];
    let p = [1.9 / 6.0, 2.0 / 6.0, 2.1 / 6.0];
    for j in 0..3 {
        assert!((s.expert_frequency[0][j] - f[j]).abs() < 1e-15);
        assert!((s.expert_probability[0][j] - p[j]).abs() < 1e-15);
    }
    assert_eq!(s.group_frequency_audio, vec![1.0, 0.0]);
    assert!((s.group_probability_audio[0] - 0.75).abs() < 1e-15);
    assert_eq!(s.group_frequency_video, vec![0.0, 1.0]);
    assert!((s.group_probability_video[1] - 0.75).abs() < 1e-15);
    // 0.5/0.5 ties go to group 0
    assert_eq!(s.group_frequency_av, vec![0.5, 0.5]);
    assert_eq!((s.tokens_audio, s.tokens_video, s.tokens_av), (2, 2, 2));
    let uniform = vec![vec![dec(vec![1.0 / 3.0; 3], vec![0.5, 0.5]); 4]];
    let s = dispatch_stats(&uniform, &[Modality::AudioVisual]).unwrap();
    assert!(s.expert_probability[0].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn moe_matches_dense_evaluation() {
    let (store, l) = layer(MoeMode::SparseTopK { n_experts: 4, k: 2 }, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 6], 1.0);
    let mods = vec![Modality::AudioVisual; 5];
    let dec = l.route(&store, &x, &mods).unwrap();
    let out = l.forward_with_routing(&store, &x, &dec, &mods).unwrap();
    assert_eq!(out.expert_calls, 10);
    for t in 0..5 {
        let xt = Tensor::vector(x.row(t).to_vec());
        let all: Vec<Tensor> = (0..4).map(|e| l.expert(&store, e).unwrap().forward(&xt).unwrap()).collect();
        for o in 0..6 {
            let mut acc = 0.0;
            for e in 0..4 {
                let mask = dec[t].selected_experts.iter().position(|&s| s == e);
                if let Some(pos) = mask {
                    acc += dec[t].selected_weights[pos] * all[e].data()[o];
                }
            }
            assert!((acc - out.output.at(t, o)).abs() < 1e-12);
        }
    }
    // the tape forward agrees with the value forward
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let go = l.forward_on(&mut g, &store, xv, &mods).unwrap();
    assert!(g.value(go.y).max_abs_diff(&out.output) < 1e-12);
    assert_eq!(go.expert_calls, 10);
}

#[test]
fn single_expert_and_identical_experts() {
    let (store, l) = layer(MoeMode::SparseTopK { n_experts: 4, k: 1 }, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 6], 1.0);
    let mods = vec![Modality::Audio; 3];
    let dec = l.route(&store, &x, &mods).unwrap();
    let out = l.forward_with_routing(&store, &x, &dec, &mods).unwrap();
    for t in 0..3 {
        let e = dec[t].selected_experts[0];
        let y = l.expert(&store, e).unwrap().forward(&Tensor::vector(x.row(t).to_vec())).unwrap();
        assert_eq!(y.data(), out.output.row(t));
    }

    let (mut store, l) = layer(MoeMode::hierarchical(3), 9);
    let e0 = l.experts[0];
    for e in &l.experts[1..] {
        for (src, dst) in [(e0.w1, e.w1), (e0.b1, e.b1), (e0.w2, e.w2), (e0.b2, e.b2)] {
            *store.get_mut(dst) = store.get(src).clone();
        }
    }
    let dec = l.route(&store, &x, &mods).unwrap();
    let out = l.forward_with_routing(&store, &x, &dec, &mods).unwrap();
    let direct = l.expert(&store, 0).unwrap().forward(&x).unwrap();
    assert!(out.output.max_abs_diff(&direct) < 1e-12);
}

#[test]
fn hierarchical_single_group_reduces_to_topk() {
    for k in 1..=3 {
        let (store, sparse) = layer(MoeMode::SparseTopK { n_experts: 4, k }, 21);
        let hier_cfg = MoeLayerConfig {
            mode: MoeMode::Hierarchical {
                groups: 1,
                n_per_group: 4,
                m: 1,
                k_per_group: k,
            },
            ..sparse.cfg.clone()
        };
        let mut store2 = store.clone();
        let inter = store2.zeros("moe.router_inter", &[6, 1]);
        let hier = MoeLayer {
            cfg: hier_cfg,
            experts: sparse.experts.clone(),
            routers: sparse.routers.clone(),
            inter: Some(inter),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22 + k as u64);
        let x = rand_tensor(&mut rng, &[6, 6], 1.0);
        let mods = vec![Modality::AudioVisual; 6];
        let ds = sparse.route(&store, &x, &mods).unwrap();
        let dh = hier.route(&store2, &x, &mods).unwrap();
        for (a, b) in ds.iter().zip(&dh) {
            assert_eq!(a.selected_experts, b.selected_experts);
            assert_eq!(a.selected_weights, b.selected_weights);
        }
        let ys = sparse.forward_with_routing(&store, &x, &ds, &mods).unwrap().output;
        let yh = hier.forward_with_routing(&store2, &x, &dh, &mods).unwrap().output;
        assert_eq!(ys.data(), yh.data());

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let a = sparse.forward_on(&mut g, &store, xv, &mods).unwrap();
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x.clone());
        let b = hier.forward_on(&mut g2, &store2, xv2, &mods).unwrap();
        assert_eq!(g.value(a.y).data(), g2.value(b.y).data());
    }
}

#[test]
fn mode_mismatch_is_config_error() {
    let (store, sparse) = layer(MoeMode::SparseTopK { n_experts: 4, k: 2 }, 1);
    let (store_h, hier) = layer(MoeMode::hierarchical(2), 1);
    let x = Tensor::zeros(&[2, 6]);
    let mods = vec![Modality::Audio; 2];
    let dh = hier.route(&store_h, &x, &mods).unwrap();
    let err = sparse.forward_with_routing(&store, &x, &dh, &mods).unwrap_err();
    assert!(matches!(err, avmoe::Error::Config(_)));
}

#[test]
fn expert_call_counts_per_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = rand_tensor(&mut rng, &[7, 6], 1.0);
    let mods: Vec<Modality> = (0..7)
        .map(|i| [Modality::Audio, Modality::Video, Modality::AudioVisual][i % 3])
        .collect();
    for (mode, per_token) in [
        (MoeMode::SparseTopK { n_experts: 8, k: 2 }, 2),
        (MoeMode::hierarchical(4), 2),
        (
            MoeMode::Hierarchical {
                groups: 2,
                n_per_group: 4,
                m: 1,
                k_per_group: 1,
            },
            1,
        ),
        (
            MoeMode::Hard {
                n_per_group: 4,
                k: 2,
                audio_weight: 0.5,
            },
            2,
        ),
        (MoeMode::DenseFfn, 1),
    ] {
        let (store, l) = layer(mode, 31);
        let dec = l.route(&store, &x, &mods).unwrap();
        let out = l.forward_with_routing(&store, &x, &dec, &mods).unwrap();
        assert_eq!(out.expert_calls, 7 * per_token, "{mode:?}");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let go = l.forward_on(&mut g, &store, xv, &mods).unwrap();
        assert_eq!(go.expert_calls, 7 * per_token, "{mode:?}");
        assert!(g.value(go.y).max_abs_diff(&out.output) < 1e-12, "{mode:?}");
    }
}

#[test]
fn hard_audiovisual_is_mean_of_group_outputs() {
    let (store, l) = layer(
        MoeMode::Hard {
            n_per_group: 4,
            k: 2,
            audio_weight: 0.5,
        },
        40,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, &[1, 6], 1.0);
    let mods = [Modality::AudioVisual];
    let dec = l.route(&store, &x, &mods).unwrap();
    let out = l.forward_with_routing(&store, &x, &dec, &mods).unwrap();
    let xt = Tensor::vector(x.row(0).to_vec());
    let ea = l.expert(&store, dec[0].selected_experts[0]).unwrap().forward(&xt).unwrap();
    let ev = l.expert(&store, dec[0].selected_experts[1]).unwrap().forward(&xt).unwrap();
    for o in 0..6 {
        let mean = 0.5 * (ea.data()[o] + ev.data()[o]);
        assert!((mean - out.output.at(0, o)).abs() < 1e-12);
    }
}

#[test]
fn permuting_experts_with_ids_keeps_output() {
    let (store, l) = layer(MoeMode::SparseTopK { n_experts: 4, k: 2 }, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = rand_tensor(&mut rng, &[4, 6], 1.0);
    let mods = vec![Modality::AudioVisual; 4];
    let dec = l.route(&store, &x, &mods).unwrap();
    let base = l.forward_with_routing(&store, &x, &dec, &mods).unwrap().output;
    let perm = [2usize, 0, 3, 1]; // new slot i holds old expert perm[i]
    let mut permuted = l.clone();
    permuted.experts = perm.iter().map(|&p| l.experts[p]).collect();
    let inverse: Vec<usize> = (0..4).map(|old| perm.iter().position(|&p| p == old).unwrap()).collect();
    let dec2: Vec<RoutingDecision> = dec
        .iter()
        .map(|d| RoutingDecision {
            selected_experts: d.selected_experts.iter().map(|&e| inverse[e]).collect(),
            ..d.clone()
        })
        .collect();
    let out = permuted.forward_with_routing(&store, &x, &dec2, &mods).unwrap().output;
    assert!(out.max_abs_diff(&base) < 1e-12);
}

#[test]
fn unselected_experts_get_zero_gradient() {
    let (store, l) = layer(MoeMode::SparseTopK { n_experts: 8, k: 1 }, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = rand_tensor(&mut rng, &[2, 6], 1.0);
    let mods = vec![Modality::Audio; 2];
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = l.forward_on(&mut g, &store, xv, &mods).unwrap();
    let loss = g.sum(out.y);
    g.backward(loss).unwrap();
    let grads = store.collect_grads(&g);
    let used: Vec<usize> = out.decisions.iter().flat_map(|d| d.selected_experts.clone()).collect();
    for (e, ep) in l.experts.iter().enumerate() {
        let gw = grads[ep.w1.0].as_ref();
        if used.contains(&e) {
            assert!(gw.is_some_and(|v| v.iter().any(|&x| x != 0.0)));
        } else {
            assert!(gw.is_none_or(|v| v.iter().all(|&x| x == 0.0)));
        }
    }
}

fn probe_loss(
    l: &MoeLayer,
    store: &ParamStore,
    mods: &[Modality],
    g: &mut Graph,
    x: avmoe::numeric::Var,
) -> avmoe::Result<avmoe::numeric::Var> {
    let out = l.forward_on(g, store, x, mods)?;
    let sq = g.square(out.y);
    let mut total = g.mean(sq);
    for aux in [out.l_b, out.l_s, out.l_z].into_iter().flatten() {
        total = g.add(total, aux)?;
    }
    Ok(total)
}

#[test]
fn moe_gradients_match_finite_differences() {
    let mods: Vec<Modality> = (0..5)
        .map(|i| [Modality::Audio, Modality::Video, Modality::AudioVisual][i % 3])
        .collect();
    for mode in [
        MoeMode::SparseTopK { n_experts: 4, k: 2 },
        MoeMode::hierarchical(3),
        MoeMode::Hard {
            n_per_group: 3,
            k: 2,
            audio_weight: 0.5,
        },
    ] {
        for seed in 0..5u64 {
            let (store, l) = layer(mode, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = rand_tensor(&mut rng, &[5, 6], 1.0);
            let err = grad_check(|g, xv| probe_loss(&l, &store, &mods, g, xv), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?} input seed {seed}: {err}");
            // probe each router through the parameter binding
            let mut ids = l.routers.clone();
            ids.extend(l.inter);
            for id in ids {
                let p = store.get(id).clone();
                let xc = x.clone();
                let err = grad_check(
                    |g, pv| {
                        g.bind_param(id.0, pv);
                        let xv = g.constant(xc.clone());
                        probe_loss(&l, &store, &mods, g, xv)
                    },
                    &p,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{mode:?} router seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn disabling_biasing_leaves_routing_unchanged() {
    let (store, l) = layer(MoeMode::hierarchical(4), 70);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = rand_tensor(&mut rng, &[6, 6], 1.0);
    let mods = vec![Modality::Audio, Modality::Video, Modality::AudioVisual, Modality::Audio, Modality::Video, Modality::AudioVisual];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = l.forward_on(&mut g, &store, xv, &mods).unwrap();
    let bundle_on = total_aux_loss(1.0, g.scalar(a.l_b.unwrap()), g.scalar(a.l_s.unwrap()), 0.0, LossCoeffs::default()).unwrap();
    let off = LossCoeffs {
        c_s: 0.0,
        ..LossCoeffs::default()
    };
    let bundle_off = total_aux_loss(1.0, g.scalar(a.l_b.unwrap()), g.scalar(a.l_s.unwrap()), 0.0, off).unwrap();
    assert!(bundle_on.total >= bundle_off.total);
    let mut g2 = Graph::new();
    let xv2 = g2.constant(x);
    let b = l.forward_on(&mut g2, &store, xv2, &mods).unwrap();
    assert_eq!(a.decisions, b.decisions);
    assert_eq!(g.value(a.y).data(), g2.value(b.y).data());
}

#[test]
fn tape_biasing_matches_value_form() {
    let (store, l) = layer(MoeMode::hierarchical(4), 80);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = rand_tensor(&mut rng, &[9, 6], 1.0);
    let mods: Vec<Modality> = (0..9)
        .map(|i| [Modality::Audio, Modality::Video, Modality::AudioVisual][i % 3])
        .collect();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = l.forward_on(&mut g, &store, xv, &mods).unwrap();
    let ls = load_biasing_loss(&out.stats).unwrap();
    assert!((g.scalar(out.l_s.unwrap()) - ls).abs() < 1e-12);
    assert!((0.0..=2.0).contains(&ls));
    let groups: Vec<(Vec<f64>, Vec<f64>)> = out
        .stats
        .expert_frequency
        .iter()
        .cloned()
        .zip(out.stats.expert_probability.iter().cloned())
        .collect();
    let lb = grouped_load_balancing_loss(&groups).unwrap();
    assert!((g.scalar(out.l_b.unwrap()) - lb).abs() < 1e-12);
}
