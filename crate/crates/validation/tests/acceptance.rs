//! End-to-end acceptance checks. Each test prints one `criterion N:` line
//! (bypassing output capture) and then asserts on the same verdict.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use avmoe::corruption::{
    allocate_masks, corrupt_audio, gaussian_frames, measured_snr_db, sample_corruption_plan, CorruptionPreset,
};
use avmoe::diagnostics::{gradcheck_suite, MODULES};
use avmoe::distill::TaskWeights;
use avmoe::metrics::spearman;
use avmoe::model::ModelConfig;
use avmoe::moe::*;
use avmoe::numeric::{Graph, Optimizer, ParamStore, Tensor};
use avmoe::train::{
    eval_group_load_vs_snr, eval_pairs, evaluate_ter, train, write_run, Regime, RunOutput, TrainConfig, STEPS_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let ok = pass && elapsed < limit;
    let line = format!(
        "\ncriterion {n}: {} ({detail}; {:.2}s of {}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n}: {detail}");
    assert!(elapsed < limit, "criterion {n} took {elapsed:?}");
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

#[test]
fn criterion_1_closed_form_losses() {
    let t = Instant::now();
    let mut worst_b = 0.0f64;
    for n in [2usize, 4, 8, 16] {
        let u = vec![1.0 / n as f64; n];
        worst_b = worst_b.max((load_balancing_loss(&u, &u).unwrap() - 1.0).abs());
    }
    let z = router_z_loss(&[vec![0.0; 8]]);
    let err_z = (z - 8f64.ln().powi(2)).abs();
    let stats = DispatchStats {
        group_frequency_audio: vec![0.5, 0.5],
        group_probability_audio: vec![0.5, 0.5],
        group_frequency_video: vec![0.5, 0.5],
        group_probability_video: vec![0.5, 0.5],
        tokens_audio: 4,
        tokens_video: 4,
        ..DispatchStats::default()
    };
    let err_s = (load_biasing_loss(&stats).unwrap() - 1.5).abs();
    let pass = worst_b <= 1e-9 && err_z <= 1e-9 && err_s <= 1e-12;
    let detail = format!("|L_B-1| {worst_b:.1e}, |L_Z-ln8^2| {err_z:.1e}, |L_S-1.5| {err_s:.1e}");
    verdict(1, pass, t.elapsed(), secs(1), &detail);
}

#[test]
fn criterion_2_gradient_checks() {
    let t = Instant::now();
    let results = gradcheck_suite(None, 20, 1e-4).unwrap();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let modules: std::collections::BTreeSet<_> = results.iter().map(|r| r.module).collect();
    let pass = worst < 1e-4 && modules.len() == MODULES.len();
    let detail = format!("{} operations, worst relative error {worst:.2e}", results.len());
    verdict(2, pass, t.elapsed(), secs(30), &detail);
}

fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn moe_layer(mode: MoeMode, d: usize, h: usize, seed: u64) -> (ParamStore, MoeLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = MoeLayerConfig::new(mode, d, h);
    cfg.router_init_std = 0.8;
    let l = MoeLayer::init(&mut store, "moe", cfg, &mut rng).unwrap();
    (store, l)
}

#[test]
fn criterion_3_routing_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let mut raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        if trial % 4 == 0 {
            // coarse values force ties
            raw.iter_mut().for_each(|v| *v = (*v * 4.0).floor() + 1.0);
        }
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for k in 1..=n {
            let (ids, w) = select_topk(&probs, k).unwrap();
            let best = all_subsets(n, k)
                .into_iter()
                .map(|sub| (sub.iter().map(|&i| raw[i]).sum::<f64>(), sub))
                .fold(None::<(f64, Vec<usize>)>, |acc, (s, sub)| match acc {
                    Some((bs, b)) if bs >= s => Some((bs, b)),
                    _ => Some((s, sub)),
                })
                .unwrap()
                .1;
            let mut got = ids.clone();
            got.sort();
            let total: f64 = best.iter().map(|&i| probs[i]).sum();
            let weights_ok = ids.iter().zip(&w).all(|(i, wi)| (probs[*i] / total - wi).abs() < 1e-12);
            if got != best || !weights_ok {
                mismatches += 1;
            }
        }
    }

    let mut reduction_ok = true;
    for k in 1..=3 {
        let (store, sparse) = moe_layer(MoeMode::SparseTopK { n_experts: 4, k }, 6, 8, 20 + k as u64);
        let mut store2 = store.clone();
        let inter = store2.zeros("moe.router_inter", &[6, 1]);
        let hier = MoeLayer {
            cfg: MoeLayerConfig {
                mode: MoeMode::Hierarchical {
                    groups: 1,
                    n_per_group: 4,
                    m: 1,
                    k_per_group: k,
                },
                ..sparse.cfg.clone()
            },
            experts: sparse.experts.clone(),
            routers: sparse.routers.clone(),
            inter: Some(inter),
        };
        let x = rand_tensor(&mut rng, &[16, 6]);
        let mods = vec![Modality::AudioVisual; 16];
        let ds = sparse.route(&store, &x, &mods).unwrap();
        let dh = hier.route(&store2, &x, &mods).unwrap();
        let same_routes = ds
            .iter()
            .zip(&dh)
            .all(|(a, b)| a.selected_experts == b.selected_experts && a.selected_weights == b.selected_weights);
        let ys = sparse.forward_with_routing(&store, &x, &ds, &mods).unwrap().output;
        let yh = hier.forward_with_routing(&store2, &x, &dh, &mods).unwrap().output;
        reduction_ok &= same_routes && ys.data() == yh.data();
    }
    let pass = mismatches == 0 && reduction_ok;
    let detail = format!("{mismatches} top-k mismatches in 1000 trials, single-group reduction bit-identical: {reduction_ok}");
    verdict(3, pass, t.elapsed(), secs(10), &detail);
}

#[test]
fn criterion_4_sparsity_and_flops() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = 24;
    let x = rand_tensor(&mut rng, &[tokens, 32]);
    let mods: Vec<Modality> = (0..tokens)
        .map(|i| [Modality::Audio, Modality::Video, Modality::AudioVisual][i % 3])
        .collect();
    let mut calls_ok = true;
    for (mode, per_token) in [
        (MoeMode::SparseTopK { n_experts: 8, k: 2 }, 2),
        (MoeMode::SparseTopK { n_experts: 8, k: 1 }, 1),
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
    ] {
        let (store, l) = moe_layer(mode, 32, 64, 40);
        let dec = l.route(&store, &x, &mods).unwrap();
        let eager = l.forward_with_routing(&store, &x, &dec, &mods).unwrap().expert_calls;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let taped = l.forward_on(&mut g, &store, xv, &mods).unwrap().expert_calls;
        calls_ok &= eager == tokens * per_token && taped == tokens * per_token;
    }
    let m = ModelConfig::default();
    let r = flops_report(&MoeLayerConfig::new(MoeMode::SparseTopK { n_experts: 8, k: 2 }, m.d, m.h), 1).unwrap();
    let pass = calls_ok && r.ratio > 2.0 && r.ratio < 2.3;
    let detail = format!("expert calls per token exact: {calls_ok}, sparse(8,2) activated/dense {:.4}", r.ratio);
    verdict(4, pass, t.elapsed(), secs(5), &detail);
}

#[test]
fn criterion_5_corruption_protocol() {
    let t = Instant::now();
    let mut overlaps = 0usize;
    for seed in 0..10_000u64 {
        let len = 20 + (seed % 81) as usize;
        let plan = sample_corruption_plan(len, (0.1, 0.5), (0.3, 0.5), 1 + (seed % 3) as usize, 0.25, seed).unwrap();
        let plan = allocate_masks(&plan, 0.3, 3, 0.3, 3, seed ^ 0xabc).unwrap();
        let corrupted = plan.corrupt_union();
        if plan.mask_union().iter().any(|i| corrupted.binary_search(i).is_ok()) {
            overlaps += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for span in [64usize, 100, 256] {
        for snr in [-10.0, -5.0, 0.0, 5.0, 10.0] {
            let frames = gaussian_frames(span + 17, 24, &mut rng);
            let noise = gaussian_frames(span, 24, &mut rng);
            let idx: Vec<usize> = (9..9 + span).collect();
            let out = corrupt_audio(&frames, &noise, snr, &idx).unwrap();
            worst = worst.max((measured_snr_db(&frames, &out, &idx) - snr).abs());
        }
    }
    let pass = overlaps == 0 && worst <= 0.05;
    let detail = format!("{overlaps} overlapping plans of 10000, worst SNR error {worst:.2e} dB");
    verdict(5, pass, t.elapsed(), secs(20), &detail);
}

// Shared training runs for criteria 6 to 9.

const SEED: u64 = 1;
const HELD_OUT: usize = 200;

fn supervised_cfg(c_s: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Regime::SupervisedMoe);
    cfg.seed = SEED;
    cfg.supervised.coeffs.c_s = c_s;
    cfg.supervised.optimizer = Optimizer::adam();
    cfg.supervised.lr = 0.003;
    cfg.supervised.steps = 3000;
    cfg.eval.pairs = 32;
    cfg
}

fn uptrain_cfg(init: &Path, cross_modal: bool) -> TrainConfig {
    let mut cfg = TrainConfig::new(Regime::Cav2vecUptrain);
    cfg.seed = SEED;
    cfg.init_checkpoint = Some(init.to_path_buf());
    let w = if cross_modal { 1.0 } else { 0.0 };
    cfg.uptrain.weights = TaskWeights {
        acp: w,
        vcp: w,
        mask: 1.0,
        mlm: 0.0,
        avcp: 0.0,
    };
    cfg.eval.pairs = 32;
    cfg
}

fn finetune_cfg(init: &Path) -> TrainConfig {
    let mut cfg = supervised_cfg(1e-2);
    cfg.init_checkpoint = Some(init.to_path_buf());
    cfg.supervised.steps = 1000;
    cfg
}

fn run_into(dir: &Path, cfg: &TrainConfig) -> RunOutput {
    let out = train(cfg).unwrap();
    write_run(dir, cfg, &out).unwrap();
    out
}

struct Specialization {
    biased: RunOutput,
    unbiased: RunOutput,
    biased_ckpt: PathBuf,
    elapsed: Duration,
}

struct Workdir(tempfile::TempDir);

fn workdir() -> &'static Path {
    static DIR: OnceLock<Workdir> = OnceLock::new();
    DIR.get_or_init(|| Workdir(tempfile::tempdir().unwrap())).0.path()
}

fn specialization() -> &'static Specialization {
    static RUNS: OnceLock<Specialization> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let dir = workdir().join("biased");
        let biased = run_into(&dir, &supervised_cfg(1e-2));
        let unbiased = train(&supervised_cfg(0.0)).unwrap();
        Specialization {
            biased,
            unbiased,
            biased_ckpt: dir.join("checkpoint.json"),
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn criterion_6_group_specialization() {
    let s = specialization();
    let group = |r: &RunOutput| r.report.group_load.clone().expect("hierarchical model reports group load");
    let b = group(&s.biased);
    let u = group(&s.unbiased);
    let (qa, qv) = (b.audio_only[0], b.video_only[1]);
    let (ua, uv) = (u.audio_only[0], u.video_only[1]);
    let band = |v: f64| (0.35..=0.65).contains(&v);
    let pass = qa >= 0.9 && qv >= 0.9 && band(ua) && band(uv);
    let detail = format!(
        "c_S=1e-2: audio group on audio-only {qa:.3}, visual group on video-only {qv:.3}; \
         c_S=0: {ua:.3}, {uv:.3}"
    );
    verdict(6, pass, s.elapsed, secs(600), &detail);
}

#[test]
fn criterion_7_noise_response() {
    let s = specialization();
    let t = Instant::now();
    let cfg = supervised_cfg(1e-2);
    let pairs = eval_pairs(&cfg.data, 70, cfg.eval.pairs).unwrap();
    let snrs = [-10.0, -5.0, 0.0, 5.0, 10.0];
    let curve = eval_group_load_vs_snr(&s.biased.model, &snrs, &pairs, &cfg.data.generator, 71).unwrap();
    let qv: Vec<f64> = curve.iter().map(|c| c.mean_qv).collect();
    let rho = spearman(&snrs, &qv).unwrap();
    let shown: Vec<String> = qv.iter().map(|v| format!("{v:.4}")).collect();
    let detail = format!("visual-group weight on AV tokens [{}], Spearman {rho:.3}", shown.join(", "));
    verdict(7, rho <= -0.8, t.elapsed(), secs(120), &detail);
}

struct Tightening {
    d_treat: f64,
    d_ctrl: f64,
    ter_treat: f64,
    ter_ctrl: f64,
    treat_dir: PathBuf,
    elapsed: Duration,
}

fn tightening() -> &'static Tightening {
    static RUNS: OnceLock<Tightening> = OnceLock::new();
    RUNS.get_or_init(|| {
        let init = &specialization().biased_ckpt;
        let t = Instant::now();
        let root = workdir();
        let treat_dir = root.join("treat");
        let treat = run_into(&treat_dir, &uptrain_cfg(init, true));
        let ctrl = run_into(&root.join("ctrl"), &uptrain_cfg(init, false));
        let ft_treat = train(&finetune_cfg(&treat_dir.join("checkpoint.json"))).unwrap();
        let ft_ctrl = train(&finetune_cfg(&root.join("ctrl").join("checkpoint.json"))).unwrap();
        let data = &supervised_cfg(0.0).data;
        let pairs = eval_pairs(data, 0, HELD_OUT).unwrap();
        let preset = CorruptionPreset::eval_fullnoise(-5.0);
        let ter = |m| evaluate_ter(m, &pairs, &data.generator, &preset, 0).unwrap();
        Tightening {
            d_treat: treat.report.feature_distance,
            d_ctrl: ctrl.report.feature_distance,
            ter_treat: ter(&ft_treat.model),
            ter_ctrl: ter(&ft_ctrl.model),
            treat_dir,
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn criterion_8_corrupted_representation_tightening() {
    let r = tightening();
    let reduction = 1.0 - r.d_treat / r.d_ctrl;
    let pass = reduction >= 0.3 && r.ter_treat < r.ter_ctrl;
    let detail = format!(
        "feature distance {:.4} vs control {:.4} ({:.1}% lower); joint-corruption TER {:.4} vs {:.4}",
        r.d_treat,
        r.d_ctrl,
        100.0 * reduction,
        r.ter_treat,
        r.ter_ctrl
    );
    verdict(8, pass, r.elapsed, secs(900), &detail);
}

#[test]
fn criterion_9_determinism() {
    let r = tightening();
    let t = Instant::now();
    let init = &specialization().biased_ckpt;
    let again = workdir().join("treat_again");
    run_into(&again, &uptrain_cfg(init, true));
    let a = std::fs::read(r.treat_dir.join(STEPS_FILE)).unwrap();
    let b = std::fs::read(again.join(STEPS_FILE)).unwrap();
    let pass = !a.is_empty() && a == b;
    let detail = format!("steps.csv {} bytes, identical: {}", a.len(), a == b);
    verdict(9, pass, t.elapsed(), secs(900), &detail);
}
