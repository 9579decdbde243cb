//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmrf::config::{ModelConfig, RunConfig, SelfEdges};
use nmrf::cost::{CostVolume, LabelSeeds};
use nmrf::data::images_to_tensor;
use nmrf::data::RgbImage;
use nmrf::model::NmrfModel;
use nmrf::nmrf::{build_layers, EdgeKind, LabelAttention, MrfGraph};
use nmrf::nn::{sinusoidal, softmax_dim, tensor_from, ParamStore};
use nmrf::proposal::{CrossStripeBlock, ProposalNetwork};
use nmrf::refine::Refinement;
use nmrf::supervision::losses::{disparity_loss, init_loss, online_gt_nms, proposal_loss, proposal_targets};
use nmrf::supervision::matching::match_targets;
use nmrf::supervision::superpixel::{superpixel_downsample, GtModals, Modal, MAX_MODALS};
use nmrf::train::{build_split, evaluate, Evaluation, Trainer};

use support::{host, max_abs_diff, relative_error, Edges};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn cpu() -> Device {
    Device::Cpu
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    tensor_from(data, shape, DType::F64, &cpu()).unwrap()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 4,
        mlp_ratio: 2,
        disparity_encoding_dim: 8,
        ..ModelConfig::toy()
    }
}

/// Draws `(h, w, k)` with `h·w·k <= limit`.
fn grid_size(rng: &mut ChaCha8Rng, max_side: usize, max_k: usize, limit: usize) -> (usize, usize, usize) {
    loop {
        let h = rng.random_range(1..=max_side);
        let w = rng.random_range(1..=max_side);
        let k = rng.random_range(1..=max_k);
        if h * w * k <= limit {
            return (h, w, k);
        }
    }
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed > limit {
        Err(format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(String::new())
    }
}

// Attention blocks against dense references.

fn window_inputs(graph: &MrfGraph, mu: &Tensor, z: &Tensor, encoding_dim: usize) -> (Tensor, Tensor) {
    let zw = graph.to_window(&z.unsqueeze(D::Minus1).unwrap()).unwrap().squeeze(D::Minus1).unwrap();
    (graph.to_window(mu).unwrap(), sinusoidal(&zw, encoding_dim).unwrap())
}

fn label_attention_case(
    rng: &mut ChaCha8Rng,
    att: &LabelAttention,
    edges: Edges,
    window: usize,
    (h, w, k): (usize, usize, usize),
) -> f64 {
    let d = att.out.out_dim();
    let mu_host = normal_vec(rng, h * w * k * d);
    let z_host: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(0.0..64.0)).collect();
    let mu = tensor(mu_host.clone(), &[1, h, w, k, d]);
    let z = tensor(z_host.clone(), &[1, h, w, k]);
    let graph = MrfGraph::new(1, h, w, k, window, true, DType::F64).unwrap();
    let (mu_w, enc) = window_inputs(&graph, &mu, &z, att.encoding_dim);
    let msg = match edges {
        Edges::Neighbor { .. } => att.neighbor_message(&graph, &mu_w, &enc).unwrap(),
        Edges::SelfLabel => att.self_message(&graph, &mu_w, &enc).unwrap(),
    };
    let got = host(&graph.to_grid(&msg).unwrap());
    let want = support::label_attention(att, edges, &mu_host, &z_host, h, w, k, d);
    max_abs_diff(&got, &want)
}

fn criterion_attention() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let instances = 200;
    let mut worst = [0f64; 4];

    for n in 0..instances {
        let cfg = ModelConfig {
            proposal_mask_same_pixel: n % 2 == 1,
            ..small_config()
        };
        let mut store = ParamStore::new(DType::F64, 100 + n as u64);
        let block = CrossStripeBlock::new(&mut store.root(), &cfg).unwrap();
        store.randomize(0.5).unwrap();
        let (h, w, k) = grid_size(&mut rng, 6, 4, 50);
        let d = cfg.embed_dim;
        let x = normal_vec(&mut rng, h * w * k * d);
        let got = host(&block.attention(&tensor(x.clone(), &[1, h, w, k, d])).unwrap());
        let want = support::stripe_attention(&block, &x, h, w, k, d);
        worst[0] = worst[0].max(max_abs_diff(&got, &want));
    }

    for n in 0..instances {
        let cfg = ModelConfig {
            adaptive_bias: n % 2 == 0,
            position_aggregation: (n / 2) % 2 == 0,
            ..small_config()
        };
        let window = rng.random_range(2..=3);
        let mut store = ParamStore::new(DType::F64, 500 + n as u64);
        let att = LabelAttention::new(&mut store.root(), &cfg, EdgeKind::Neighbor, window).unwrap();
        store.randomize(0.5).unwrap();
        let size = grid_size(&mut rng, 6, 4, 50);
        worst[1] = worst[1].max(label_attention_case(&mut rng, &att, Edges::Neighbor { window }, window, size));
    }

    for n in 0..instances {
        let cfg = small_config();
        let mut store = ParamStore::new(DType::F64, 900 + n as u64);
        let att = LabelAttention::new(&mut store.root(), &cfg, EdgeKind::SelfLabel, 3).unwrap();
        store.randomize(0.5).unwrap();
        let size = grid_size(&mut rng, 6, 4, 50);
        worst[2] = worst[2].max(label_attention_case(&mut rng, &att, Edges::SelfLabel, 3, size));
    }

    for n in 0..instances {
        let cfg = ModelConfig {
            refinement_layers: 1,
            adaptive_bias: n % 2 == 0,
            ..small_config()
        };
        let mut store = ParamStore::new(DType::F64, 1300 + n as u64);
        let refinement = Refinement::new(&mut store.root(), &cfg).unwrap();
        store.randomize(0.5).unwrap();
        let window = cfg.refinement_window;
        let (h, w, _) = grid_size(&mut rng, 7, 1, 50);
        let graph = refinement.graph(1, h, w, DType::F64).unwrap();
        assert_eq!((graph.k, graph.window, graph.self_edges), (1, window, false));
        let att = refinement.layers[0].attention.as_ref().unwrap();
        worst[3] = worst[3].max(label_attention_case(&mut rng, att, Edges::Neighbor { window }, window, (h, w, 1)));
    }

    let names = ["proposal stripe", "neighbour", "self", "refinement"];
    for (name, dev) in names.iter().zip(worst) {
        ensure!(dev < 1e-6, "{name} attention deviates by {dev:e}");
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{instances} instances per block, max deviations {:.1e} / {:.1e} / {:.1e} / {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// Assignment against permutation enumeration.

fn criterion_matching() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in 0..1000 {
        let targets: Vec<f32> = (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..=512) as f32 / 16.0).collect();
        let proposals: Vec<f32> = (0..4).map(|_| rng.random_range(0..=512) as f32 / 16.0).collect();
        let pairs = match_targets(&targets, &proposals);
        ensure!(pairs.len() == targets.len(), "instance {n}: {} pairs for {} targets", pairs.len(), targets.len());
        let mut seen_t = vec![false; targets.len()];
        let mut seen_p = vec![false; proposals.len()];
        let mut total = 0f64;
        for &(t, p) in &pairs {
            ensure!(!seen_t[t] && !seen_p[p], "instance {n}: repeated index in {pairs:?}");
            seen_t[t] = true;
            seen_p[p] = true;
            total += (targets[t] as f64 - proposals[p] as f64).abs();
        }
        let best = support::best_assignment_cost(&targets, &proposals);
        ensure!(total == best, "instance {n}: cost {total} vs optimum {best} ({targets:?} / {proposals:?})");
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok("1000 instances, identical optimal cost".into())
}

// Ground-truth modals and suppression against brute force.

fn criterion_supervision() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut merged = 0;
    for n in 0..500 {
        let segments_in_window = rng.random_range(1..=7u32);
        let centres: Vec<f32> = (0..segments_in_window).map(|_| rng.random_range(0..=96) as f32 / 4.0).collect();
        let mut disparity = vec![0f32; 64];
        let mut valid = vec![false; 64];
        let mut segments = vec![0u32; 64];
        let invalid_rate = [0.0, 0.2, 0.6, 1.0][n % 4];
        for p in 0..64 {
            let s = rng.random_range(0..segments_in_window);
            segments[p] = s * 3 + 5;
            disparity[p] = centres[s as usize] + rng.random_range(-2..=2) as f32 / 8.0;
            valid[p] = rng.random_range(0.0..1.0) >= invalid_rate;
        }
        let gt = superpixel_downsample(&disparity, &valid, &segments, 1, 8, 8);
        let got: Vec<(f32, usize)> = gt.modals[0].iter().flatten().map(|m| (m.disparity, m.count)).collect();
        let samples: Vec<(f32, u32)> = (0..64).filter(|&p| valid[p]).map(|p| (disparity[p], segments[p])).collect();
        let want = support::window_modals(&samples);
        ensure!(got == want, "window {n}: modals {got:?} vs reference {want:?}");
        let distinct = {
            let mut ids: Vec<u32> = samples.iter().map(|s| s.1).collect();
            ids.sort();
            ids.dedup();
            ids.len()
        };
        if want.len() < distinct.min(MAX_MODALS) {
            merged += 1;
        }

        let modals: Vec<f32> = got.iter().map(|m| m.0).collect();
        let proposals: Vec<f32> = (0..4).map(|_| rng.random_range(0..=96) as f32 / 4.0).collect();
        let threshold = [8.0, 1.0, 3.0][n % 3];
        let kept = online_gt_nms(&modals, &proposals, threshold);
        let reference = support::suppress(&modals, &proposals, threshold);
        ensure!(kept == reference, "window {n}: suppression {kept:?} vs reference {reference:?}");
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("500 windows agree exactly ({merged} with merged segments)"))
}

// Finite-difference gradient checks.

const STEP: f64 = 1e-5;

/// Compares autograd against central differences on up to `per_var`
/// coordinates of every variable and returns the norm-wise relative error.
fn gradient_error(vars: &[Var], per_var: usize, rng: &mut ChaCha8Rng, loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for var in vars {
        let n = var.elem_count();
        let g = grads
            .get(var.as_tensor())
            .map(host)
            .unwrap_or_else(|| vec![0.0; n]);
        let base = host(var.as_tensor());
        let mut coords: Vec<usize> = (0..n).collect();
        for a in 0..n {
            let b = rng.random_range(a..n);
            coords.swap(a, b);
        }
        for &c in coords.iter().take(per_var) {
            let mut value = base.clone();
            value[c] = base[c] + STEP;
            var.set(&tensor(value.clone(), var.dims())).unwrap();
            let up = loss().to_scalar::<f64>().unwrap();
            value[c] = base[c] - STEP;
            var.set(&tensor(value, var.dims())).unwrap();
            let down = loss().to_scalar::<f64>().unwrap();
            var.set(&tensor(base.clone(), var.dims())).unwrap();
            analytic.push(g[c]);
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn random_modals(rng: &mut ChaCha8Rng, pixels: usize, lo: f32, hi: f32, h: usize, w: usize) -> GtModals {
    let modals = (0..pixels)
        .map(|_| {
            let mut slot: [Option<Modal>; MAX_MODALS] = [None; MAX_MODALS];
            for s in slot.iter_mut().take(rng.random_range(0..=MAX_MODALS)) {
                *s = Some(Modal {
                    disparity: rng.random_range(lo..hi),
                    count: 1,
                });
            }
            slot
        })
        .collect();
    GtModals {
        batch: 1,
        height: h,
        width: w,
        modals,
    }
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.vars().values().cloned().collect()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut report = Vec::new();

    // Initialisation loss through the correlation volume.
    {
        let (c, h, w) = (8, 3, 8);
        let left = Var::from_tensor(&tensor(normal_vec(&mut rng, c * h * w), &[1, c, h, w])).unwrap();
        let right = Var::from_tensor(&tensor(normal_vec(&mut rng, c * h * w), &[1, c, h, w])).unwrap();
        let gt = random_modals(&mut rng, h * w, 0.0, 40.0, h, w);
        let loss = || {
            let volume = CostVolume::build(left.as_tensor(), right.as_tensor(), 40).unwrap();
            init_loss(&volume, &gt).unwrap()
        };
        report.push(("init", gradient_error(&[left.clone(), right.clone()], 64, &mut rng, &loss)));
    }

    // Proposal loss through the proposal network.
    {
        let cfg = ModelConfig {
            max_disparity: 192,
            ..small_config()
        };
        let (h, w, k) = (3, 4, 4);
        let mut store = ParamStore::new(DType::F64, 42);
        let network = ProposalNetwork::new(&mut store.root(), &cfg).unwrap();
        store.randomize(0.3).unwrap();
        let features = Var::from_tensor(&tensor(normal_vec(&mut rng, h * w * k * 16), &[1, h, w, k, 16])).unwrap();
        let seeds = LabelSeeds {
            batch: 1,
            height: h,
            width: w,
            k,
            shifts: (0..h * w * k).map(|_| rng.random_range(4..20)).collect(),
            scores: vec![0.0; h * w * k],
            has_modal: vec![true; h * w],
        };
        let gt = random_modals(&mut rng, h * w, 20.0, 170.0, h, w);
        let loss = || {
            let cand = network.forward(features.as_tensor(), &seeds).unwrap();
            proposal_loss(&cand.disparities, &gt, 8.0).unwrap()
        };
        let mut vars = vec![features.clone()];
        vars.extend(store_vars(&store));
        report.push(("proposal", gradient_error(&vars, 6, &mut rng, &loss)));
    }

    // Expected disparity error under the hypothesis distribution.
    {
        let (k, h, w) = (4, 4, 6);
        let hyp = Var::from_tensor(&tensor(
            (0..k * h * w).map(|_| rng.random_range(0.0..30.0)).collect(),
            &[1, k, h, w],
        ))
        .unwrap();
        let logits = Var::from_tensor(&tensor(normal_vec(&mut rng, k * h * w), &[1, k, h, w])).unwrap();
        let gt: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..30.0)).collect();
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_range(0.0..1.0) < 0.8).collect();
        let loss = || {
            let prob = softmax_dim(logits.as_tensor(), 1).unwrap();
            disparity_loss(hyp.as_tensor(), &prob, &gt, &valid).unwrap()
        };
        report.push(("disparity", gradient_error(&[hyp.clone(), logits.clone()], 96, &mut rng, &loss)));
    }

    // One neighbour-edge and one self-edge message-passing layer.
    {
        let cfg = small_config();
        let (h, w, k, window) = (4, 4, 4, 3);
        let mut store = ParamStore::new(DType::F64, 43);
        let layers = build_layers(&mut store.root(), &cfg, 2, window, SelfEdges::On, true).unwrap();
        store.randomize(0.3).unwrap();
        let graph = MrfGraph::new(1, h, w, k, window, true, DType::F64).unwrap();
        let mu = Var::from_tensor(&tensor(normal_vec(&mut rng, h * w * k * 16), &[1, h, w, k, 16])).unwrap();
        let z = tensor((0..h * w * k).map(|_| rng.random_range(0.0..64.0)).collect(), &[1, h, w, k]);
        let weights = tensor(normal_vec(&mut rng, h * w * k * 16), &[1, h, w, k, 16]);
        for (l, name) in [(0, "neighbour layer"), (1, "self layer")] {
            let layer = &layers[l];
            let loss = || {
                let (mu_w, enc) = window_inputs(&graph, mu.as_tensor(), &z, cfg.disparity_encoding_dim);
                let out = graph.to_grid(&layer.forward(&graph, &mu_w, &enc).unwrap()).unwrap();
                (out * &weights).unwrap().sum_all().unwrap()
            };
            let prefix = format!("layer{l}.");
            let mut vars = vec![mu.clone()];
            vars.extend(
                store
                    .vars()
                    .iter()
                    .filter(|(n, _)| n.starts_with(&prefix))
                    .map(|(_, v)| v.clone()),
            );
            report.push((name, gradient_error(&vars, 8, &mut rng, &loss)));
        }
    }

    for (name, err) in &report {
        ensure!(*err < 1e-4, "{name}: relative gradient error {err:e}");
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(report
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", "))
}

// The worked suppression and matching example.

fn criterion_worked_example() -> Outcome {
    let modals = [1.1f32, 1.8];
    let proposals = [1.4f32, 10.2, 10.8, 11.2];
    let threshold = RunConfig::toy().loss.nms_threshold as f32;
    let kept = online_gt_nms(&modals, &proposals, threshold);
    ensure!(kept == vec![1.1], "surviving modals {kept:?}");
    let pairs = match_targets(&kept, &proposals);
    ensure!(pairs == vec![(0, 0)], "pairs {pairs:?}");

    let mut slot: [Option<Modal>; MAX_MODALS] = [None; MAX_MODALS];
    slot[0] = Some(Modal { disparity: 1.1, count: 1 });
    slot[1] = Some(Modal { disparity: 1.8, count: 1 });
    let gt = GtModals {
        batch: 1,
        height: 1,
        width: 1,
        modals: vec![slot],
    };
    let (targets, count) = proposal_targets(&proposals, 4, &gt, threshold);
    ensure!(count == 1 && targets == vec![(0, 0, 1.1)], "targets {targets:?}");

    let unsuppressed = match_targets(&modals, &proposals);
    ensure!(unsuppressed == vec![(0, 0), (1, 1)], "without suppression {unsuppressed:?}");
    Ok("surviving modals {1.1}, single pair (1.1, 1.4)".into())
}

// Overfit run shared by the two training criteria.

struct OverfitRun {
    seconds: f64,
    steps: usize,
    last_loss: f64,
    evaluation: Evaluation,
}

fn overfit_run() -> &'static Result<OverfitRun, String> {
    static RUN: OnceLock<Result<OverfitRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = RunConfig::toy();
        let samples = build_split(&config, true).map_err(|e| e.to_string())?;
        let steps = config.train.steps;
        let mut trainer = Trainer::new(config).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let mut last_loss = f64::NAN;
        for _ in 0..steps {
            let log = trainer.train_step(&samples).map_err(|e| e.to_string())?;
            last_loss = log.total;
        }
        let seconds = start.elapsed().as_secs_f64();
        let evaluation = evaluate(&trainer.model, &samples).map_err(|e| e.to_string())?;
        Ok(OverfitRun {
            seconds,
            steps,
            last_loss,
            evaluation,
        })
    })
}

fn criterion_overfit() -> Outcome {
    let config = RunConfig::toy();
    let m = &config.model;
    ensure!(
        (m.feature_channels, m.proposal_layers, m.inference_layers, m.refinement_layers, m.k) == (64, 2, 4, 2, 4),
        "toy preset drifted: {m:?}"
    );
    let syn = &config.data.synthetic;
    ensure!(
        (config.data.train_scenes, syn.height, syn.width, config.train.steps) == (20, 128, 256, 2000),
        "toy data or schedule drifted"
    );
    let run = overfit_run().as_ref().map_err(|e| e.clone())?;
    let metrics = &run.evaluation.metrics;
    let epe = metrics.epe.ok_or("no valid pixels")?;
    let bad3 = metrics.bad_3.ok_or("no valid pixels")?;
    let detail = format!(
        "{} steps in {:.0}s, final loss {:.3}, train EPE {epe:.3} px, Bad-3 {bad3:.2}%",
        run.steps, run.seconds, run.last_loss
    );
    ensure!(epe < 1.0 && bad3 < 3.0, "{detail}");
    ensure!(run.seconds <= 30.0 * 60.0, "{detail}: over the 30 minute budget");
    Ok(detail)
}

fn criterion_proposal_quality() -> Outcome {
    let run = overfit_run().as_ref().map_err(|e| e.clone())?;
    let metrics = &run.evaluation.metrics;
    let recall = metrics.recall_8.ok_or("no valid pixels")?;
    let proposal_epe = metrics.proposal_epe.ok_or("no valid pixels")?;
    let epe = metrics.epe.ok_or("no valid pixels")?;
    let detail = format!("recall-8 {recall:.2}%, proposal EPE {proposal_epe:.3} px, final EPE {epe:.3} px");
    ensure!(recall >= 99.0 && proposal_epe <= epe, "{detail}");
    Ok(detail)
}

// Structural invariants.

fn tiny_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        stem_channels: 8,
        block_channels: [8, 8, 16],
        feature_channels: 16,
        embed_dim: 16,
        heads: 4,
        k: rng.random_range(1..=4),
        max_disparity: 8 * rng.random_range(4..=8),
        lookup_radius: 2,
        disparity_encoding_dim: 8,
        groups: 4,
        proposal_layers: 1,
        inference_layers: 2,
        refinement_layers: 1,
        inference_window: rng.random_range(2..=4),
        refinement_window: rng.random_range(2..=4),
        ..ModelConfig::toy()
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    RgbImage::from_u8(h, w, &bytes).unwrap()
}

fn criterion_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(81);

    for n in 0..6 {
        let cfg = tiny_model_config(&mut rng);
        let model = NmrfModel::new(&cfg, DType::F32, 800 + n).unwrap();
        let (h, w) = (8 * rng.random_range(4..=6) + rng.random_range(0..8), 8 * rng.random_range(4..=8) + rng.random_range(0..8));
        let left = images_to_tensor(&[&random_image(&mut rng, h, w)], DType::F32).unwrap();
        let right = images_to_tensor(&[&random_image(&mut rng, h, w)], DType::F32).unwrap();
        let out = model.forward(&left, &right).unwrap();
        let sums = host(&out.field.probabilities.sum(1).unwrap());
        let off = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        ensure!(off <= 1e-5, "probabilities sum off by {off:e}");
        let zmax = cfg.max_disparity as f64;
        let in_range = |v: &[f64]| v.iter().all(|&x| (0.0..=zmax).contains(&x));
        ensure!(in_range(&host(&out.candidates.disparities)), "candidate outside [0, {zmax}]");
        ensure!(in_range(&host(&out.refined)), "refined disparity outside [0, {zmax}]");

        let (fh, fw) = out.pyramid.fine_size();
        let graph = model.refinement.graph(1, fh, fw, DType::F32).unwrap();
        ensure!(graph.self_edge_count() == 0, "refinement graph has self edges");
        for node in graph.nodes() {
            let partners = graph.neighbor_partners(node);
            ensure!(
                partners.iter().all(|p| (p.i, p.j) != (node.i, node.j)),
                "refinement partner shares a pixel with {node:?}"
            );
        }
    }

    for _ in 0..50 {
        let window = rng.random_range(1..=8);
        let (h, w, k) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=4));
        let graph = MrfGraph::new(1, h, w, k, window, true, DType::F32).unwrap();
        let limit = ((2 * window - 1) * (2 * window - 1)) as u32;
        let rel = graph.relative_index().to_vec1::<u32>().unwrap();
        ensure!(rel.iter().all(|&r| r < limit), "relative index at or above {limit}");
        let single = MrfGraph::new(1, h, w, 1, window, true, DType::F32).unwrap();
        ensure!(single.self_edge_count() == 0, "k = 1 graph has self edges");
    }

    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(1..=6), rng.random_range(1..=4), rng.random_range(2..=12));
        let shift = rng.random_range(1..w);
        let max_disparity = 8 * rng.random_range(1..=12);
        let left = tensor(normal_vec(&mut rng, c * h * w), &[1, c, h, w]);
        let wide = tensor(normal_vec(&mut rng, c * h * (w + shift)), &[1, c, h, w + shift]);
        let right = wide.narrow(3, 0, w).unwrap();
        let shifted = wide.narrow(3, shift, w).unwrap();
        let base = CostVolume::build(&left, &right, max_disparity).unwrap();
        let moved = CostVolume::build(&left, &shifted, max_disparity).unwrap();
        let s_count = base.shifts;
        let (a, b) = (host(&base.values), host(&moved.values));
        for i in 0..h {
            for j in 0..w {
                for z in shift..s_count {
                    if z > j {
                        continue;
                    }
                    let at = |v: &[f64], z: usize| v[(i * w + j) * s_count + z];
                    ensure!(
                        (at(&b, z) - at(&a, z - shift)).abs() < 1e-12,
                        "shift {shift}: C'({i},{j},{z}) != C({i},{j},{})",
                        z - shift
                    );
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok("normalisation, clamps, offset range, self-edge-free graphs, shift covariance".into())
}

// Self-edge ablation flags.

fn criterion_ablation() -> Outcome {
    let cfg = |self_edges| ModelConfig {
        stem_channels: 8,
        block_channels: [8, 8, 16],
        feature_channels: 16,
        embed_dim: 16,
        disparity_encoding_dim: 8,
        groups: 4,
        max_disparity: 48,
        self_edges,
        ..ModelConfig::toy()
    };
    let seed = 7;
    let on = NmrfModel::new(&cfg(SelfEdges::On), DType::F32, seed).unwrap();
    let mut off = NmrfModel::new(&cfg(SelfEdges::Off), DType::F32, seed).unwrap();
    let on_names: Vec<&String> = on.store.vars().keys().collect();
    ensure!(
        off.store.vars().keys().all(|n| on_names.contains(&n)),
        "off model has parameters the on model lacks"
    );
    ensure!(off.store.vars().len() < on.store.vars().len(), "off model kept self-edge parameters");
    let values: BTreeMap<String, Tensor> = on
        .store
        .vars()
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    off.store.load(&values).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let left = images_to_tensor(&[&random_image(&mut rng, 32, 64)], DType::F32).unwrap();
    let right = images_to_tensor(&[&random_image(&mut rng, 32, 64)], DType::F32).unwrap();
    let a = host(&on.forward(&left, &right).unwrap().field.probabilities);
    let b = host(&off.forward(&left, &right).unwrap().field.probabilities);
    let change = max_abs_diff(&a, &b);
    ensure!(change > 1e-6, "self_edges off left the output unchanged");

    let shared = NmrfModel::new(&cfg(SelfEdges::Shared), DType::F32, seed).unwrap();
    let layers = &shared.inference.layers;
    for l in (1..layers.len()).step_by(2) {
        let prev = layers[l - 1].attention.as_ref().unwrap();
        let this = layers[l].attention.as_ref().unwrap();
        ensure!(layers[l].kind == EdgeKind::SelfLabel, "layer {l} is not a self layer");
        let same = prev.qkv.weight().id() == this.qkv.weight().id()
            && prev.out.weight().id() == this.out.weight().id()
            && prev.norm.gamma().id() == this.norm.gamma().id()
            && prev.norm.beta().id() == this.norm.beta().id();
        ensure!(same, "layer {l} does not share storage with layer {}", l - 1);
        let own = format!("inference.mrf.layer{l}.attention");
        ensure!(
            !shared.store.vars().keys().any(|n| n.starts_with(&own)),
            "layer {l} owns separate attention parameters"
        );
    }
    ensure!(shared.store.vars().len() == off.store.vars().len(), "shared store size differs from the off store");
    Ok(format!("off vs on max probability change {change:.2e}; shared layers alias storage"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 attention oracles", criterion_attention),
        ("2 matching oracle", criterion_matching),
        ("3 supervision oracles", criterion_supervision),
        ("4 gradient checks", criterion_gradients),
        ("5 worked example", criterion_worked_example),
        ("6 overfit run", criterion_overfit),
        ("7 proposal quality", criterion_proposal_quality),
        ("8 structural invariants", criterion_invariants),
        ("9 ablation flags", criterion_ablation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
