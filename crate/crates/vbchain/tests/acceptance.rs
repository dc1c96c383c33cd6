//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p vbchain --test acceptance -- --nocapture` to see
//! the per-criterion lines.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use vbchain::augment::AugmentPolicy;
use vbchain::config::ExperimentConfig;
use vbchain::dataio::manifest::Split;
use vbchain::dataio::store::{read_feature_stack, write_feature_stack, FeatureStack};
use vbchain::dataio::synth::{SynthSpec, SyntheticDataset};
use vbchain::encoder::{attentive_pool, AttentivePoolParams, LayerWeights};
use vbchain::heads::{
    chain_forward_node, derive_chain_order, ChainHook, ChainOrder, ChainPredictor,
    ChainPredictorNodes, ForwardHooks,
};
use vbchain::matrix::Matrix;
use vbchain::model::{BatchInput, Model};
use vbchain::objective::{ccc, ccc_loss, ccc_loss_node};
use vbchain::schema::{LabelSchema, Task, CULTURE_DIM, NUM_EMOTIONS};
use vbchain::tape::{NodeId, Tape};
use vbchain::trainer::{evaluate_samples, train, train_with_options, TrainOptions};

fn pass(number: usize, name: &str) {
    println!("ACCEPTANCE {number:2} ({name}): PASS");
}

// --- 1: CCC oracle suite ------------------------------------------------------

#[test]
fn c01_ccc_oracle_suite() {
    let started = Instant::now();

    // hand-derived cases, 1e-9
    let x = vec![1.0, 2.0, 3.0];
    assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    assert!((ccc(&x, &[3.0, 2.0, 1.0]).unwrap() - (-1.0)).abs() < 1e-9);
    assert!((ccc(&x, &[2.0, 3.0, 4.0]).unwrap() - 4.0 / 7.0).abs() < 1e-9);
    assert!((ccc(&[2.0, 2.0], &[5.0, 5.0]).unwrap() - 0.0).abs() < 1e-9);

    // symmetry, bound and common-affine invariance over 1000 random instances
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let m = rng.gen_range(2..40);
        let xs: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let ys: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let c = ccc(&xs, &ys).unwrap();
        assert!((c - ccc(&ys, &xs).unwrap()).abs() < 1e-12, "symmetry");
        assert!(c.abs() <= 1.0 + 1e-12, "|ccc| <= 1");
        let a = rng.gen_range(0.05..4.0);
        let b = rng.gen_range(-3.0..3.0);
        let xa: Vec<f64> = xs.iter().map(|&v| a * v + b).collect();
        let ya: Vec<f64> = ys.iter().map(|&v| a * v + b).collect();
        assert!((ccc(&xa, &ya).unwrap() - c).abs() < 1e-9, "affine invariance");
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "criterion 1 runtime {elapsed:?} exceeds 5 s");
    pass(1, "ccc oracle suite");
}

// --- 2: gradient checks -------------------------------------------------------

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

#[test]
fn c02_gradient_checks() {
    let started = Instant::now();

    // ccc_loss vs central differences, step 1e-5, 20 seeds
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = Matrix::from_fn(8, 3, |_, _| rng.gen_range(0.0..1.0));
        let y = Matrix::from_fn(8, 3, |_, _| rng.gen_range(0.0..1.0));
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let loss = ccc_loss_node(&mut tape, xn, &y).unwrap();
        tape.backward(loss);
        let grad = tape.grad(xn);
        let h = 1e-5;
        for i in 0..8 {
            for j in 0..3 {
                let mut plus = x.clone();
                plus.set(i, j, plus.get(i, j) + h);
                let mut minus = x.clone();
                minus.set(i, j, minus.get(i, j) - h);
                let fd =
                    (ccc_loss(&plus, &y).unwrap() - ccc_loss(&minus, &y).unwrap()) / (2.0 * h);
                assert!(
                    rel_err(grad.get(i, j), fd) < 1e-4,
                    "ccc_loss grad seed {seed} ({i},{j})"
                );
            }
        }
    }

    // layer aggregation wrt logits, step 1e-3 in logit space, 20 seeds
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (l, t, d) = (5, 4, 3);
        let stack = Matrix::from_fn(l, t * d, |_, _| rng.gen_range(-1.0..1.0));
        let logits = Matrix::row_vector((0..l).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let eval = |logits: &Matrix, grad: bool| -> (f64, Matrix) {
            let mut tape = Tape::new();
            let s = tape.leaf(stack.clone());
            let lg = tape.leaf(logits.clone());
            let agg = vbchain::encoder::aggregate_layers_node(&mut tape, s, lg, t, d);
            let sq = tape.square(agg);
            let loss = tape.mean_all(sq);
            if grad {
                tape.backward(loss);
                (tape.value(loss).get(0, 0), tape.grad(lg))
            } else {
                (tape.value(loss).get(0, 0), Matrix::zeros(1, 1))
            }
        };
        let (_, grad) = eval(&logits, true);
        let h = 1e-3;
        for j in 0..l {
            let mut plus = logits.clone();
            plus.set(0, j, plus.get(0, j) + h);
            let mut minus = logits.clone();
            minus.set(0, j, minus.get(0, j) - h);
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            assert!(rel_err(grad.get(0, j), fd) < 1e-4, "aggregation grad seed {seed} logit {j}");
        }
    }

    // chain predictor parameters, N=3 labels over 5 features, 20 seeds
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (f, n) = (5, 3);
        let z = Matrix::from_fn(2, f, |_, _| rng.gen_range(-1.0..1.0));
        let order = ChainOrder::identity(n);
        let weights: Vec<Matrix> =
            (0..n).map(|i| Matrix::from_fn(f + i, 1, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let biases: Vec<Matrix> =
            (0..n).map(|_| Matrix::from_fn(1, 1, |_, _| rng.gen_range(-0.5..0.5))).collect();

        let eval = |ws: &[Matrix], bs: &[Matrix], grad: bool| -> (f64, Vec<Matrix>) {
            let mut tape = Tape::new();
            let zn = tape.leaf(z.clone());
            let nodes: Vec<ChainPredictorNodes> = (0..n)
                .map(|i| ChainPredictorNodes {
                    w1: tape.leaf(ws[i].clone()),
                    b1: tape.leaf(bs[i].clone()),
                    w2: None,
                    b2: None,
                })
                .collect();
            let out = chain_forward_node(&mut tape, zn, &order, &nodes, None).unwrap();
            let sq = tape.square(out);
            let loss = tape.mean_all(sq);
            if grad {
                tape.backward(loss);
                let grads =
                    nodes.iter().flat_map(|p| [tape.grad(p.w1), tape.grad(p.b1)]).collect();
                (tape.value(loss).get(0, 0), grads)
            } else {
                (tape.value(loss).get(0, 0), Vec::new())
            }
        };
        let (_, grads) = eval(&weights, &biases, true);
        let h = 1e-5;
        for i in 0..n {
            for r in 0..weights[i].rows() {
                let mut wp = weights.clone();
                let mut wm = weights.clone();
                let v = weights[i].get(r, 0);
                wp[i].set(r, 0, v + h);
                wm[i].set(r, 0, v - h);
                let fd = (eval(&wp, &biases, false).0 - eval(&wm, &biases, false).0) / (2.0 * h);
                assert!(
                    rel_err(grads[2 * i].get(r, 0), fd) < 1e-4,
                    "chain grad seed {seed} predictor {i} w[{r}]"
                );
            }
            let mut bp = biases.clone();
            let mut bm = biases.clone();
            let v = biases[i].get(0, 0);
            bp[i].set(0, 0, v + h);
            bm[i].set(0, 0, v - h);
            let fd = (eval(&weights, &bp, false).0 - eval(&weights, &bm, false).0) / (2.0 * h);
            assert!(rel_err(grads[2 * i + 1].get(0, 0), fd) < 1e-4, "chain grad bias {i}");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 2 runtime {elapsed:?} exceeds 60 s");
    pass(2, "gradient checks");
}

// --- 3: chain structure -------------------------------------------------------

#[test]
fn c03_chain_structure() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (f, n) = (6, 10);
        let z = Matrix::from_fn(1, f, |_, _| rng.gen_range(-1.0..1.0));
        let order = ChainOrder::identity(n);
        let make_nodes = |tape: &mut Tape, rng: &mut ChaCha8Rng| -> Vec<ChainPredictorNodes> {
            (0..n)
                .map(|i| {
                    let w = Matrix::from_fn(f + i, 1, |_, _| rng.gen_range(-1.0..1.0));
                    let b = Matrix::from_fn(1, 1, |_, _| rng.gen_range(-0.5..0.5));
                    ChainPredictorNodes {
                        w1: tape.leaf(w),
                        b1: tape.leaf(b),
                        w2: None,
                        b2: None,
                    }
                })
                .collect()
        };

        // causality: fix position j, prefix unchanged exactly, suffix changes
        let j = rng.gen_range(1..n - 1);
        let run = |hook: Option<&ChainHook>, rng_seed: u64| -> Vec<f64> {
            let mut param_rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut tape = Tape::new();
            let zn = tape.leaf(z.clone());
            let nodes = make_nodes(&mut tape, &mut param_rng);
            let out = chain_forward_node(&mut tape, zn, &order, &nodes, hook).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(None, 900 + seed);
        let hooked = run(Some(&ChainHook { position: j, value: base[j] + 0.25 }), 900 + seed);
        for pos in 0..j {
            assert_eq!(base[pos], hooked[pos], "seed {seed}: prefix changed at {pos}");
        }
        assert!(
            (j + 1..n).any(|pos| base[pos] != hooked[pos]),
            "seed {seed}: no position after {j} changed"
        );

        // bidirectional output equals the mean of both directions within 1e-7
        let mut param_rng = ChaCha8Rng::seed_from_u64(1300 + seed);
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let fwd = make_nodes(&mut tape, &mut param_rng);
        let bwd = make_nodes(&mut tape, &mut param_rng);
        let bi = vbchain::heads::bidirectional_chain_node(&mut tape, zn, &order, &fwd, &bwd, None, None)
            .unwrap();
        let f_out = chain_forward_node(&mut tape, zn, &order, &fwd, None).unwrap();
        let rev = order.reversed();
        let b_out = chain_forward_node(&mut tape, zn, &rev, &bwd, None).unwrap();
        for k in 0..n {
            let expected = 0.5 * (tape.value(f_out).get(0, k) + tape.value(b_out).get(0, k));
            assert!((tape.value(bi).get(0, k) - expected).abs() < 1e-7, "seed {seed} label {k}");
        }
    }
    pass(3, "chain structure");
}

// --- 4: chain ordering vs brute force -----------------------------------------

#[test]
fn c04_chain_ordering() {
    // independent oracle: covariance-definition Pearson, accumulation,
    // explicit (-acc, index) sort
    fn oracle(data: &Matrix) -> (Vec<usize>, Vec<f64>) {
        let (m, n) = (data.rows(), data.cols());
        let mean = |j: usize| (0..m).map(|i| data.get(i, j)).sum::<f64>() / m as f64;
        let means: Vec<f64> = (0..n).map(mean).collect();
        let corr = |a: usize, b: usize| -> f64 {
            let mut num = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for i in 0..m {
                let da = data.get(i, a) - means[a];
                let db = data.get(i, b) - means[b];
                num += da * db;
                va += da * da;
                vb += db * db;
            }
            num / (va.sqrt() * vb.sqrt())
        };
        let acc: Vec<f64> =
            (0..n).map(|j| (0..n).filter(|&k| k != j).map(|k| corr(j, k).abs()).sum()).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| acc[b].partial_cmp(&acc[a]).unwrap().then(a.cmp(&b)));
        (idx, acc)
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    for case in 0..50 {
        let m = rng.gen_range(10..60);
        let n = rng.gen_range(2..12);
        let data = Matrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0));
        let (expected_order, expected_acc) = oracle(&data);
        let derived = derive_chain_order(&data).unwrap();
        assert_eq!(derived.order(), expected_order.as_slice(), "case {case}");
        for (a, b) in derived.accumulated().iter().zip(&expected_acc) {
            assert!((a - b).abs() < 1e-9, "case {case}: accumulated mismatch");
        }
    }
    pass(4, "chain ordering");
}

// --- 5: hierarchy wiring ------------------------------------------------------

#[test]
fn c05_hierarchy_wiring() {
    let mut config = vbchain::config::ModelConfig::default();
    config.num_layers = 4;
    config.feature_dim = 32;
    config.attention_dim = 16;
    config.projection_dim = 24;
    config.shared_dim = 12;
    let model = Model::new(
        LabelSchema::default(),
        config,
        ChainOrder::identity(NUM_EMOTIONS),
        ChainOrder::identity(CULTURE_DIM),
        42,
    )
    .unwrap();

    let spec = SynthSpec { n_samples: 4, seed: 11, ..SynthSpec::default() };
    let dataset = SyntheticDataset::new(spec, LabelSchema::default()).unwrap();
    let stacks: Vec<FeatureStack> = (0..4).map(|i| dataset.stack(i)).collect();
    let batch: Vec<BatchInput> = stacks.iter().map(|stack| BatchInput { stack, mask: None }).collect();

    let base = model.eval_outputs(&batch, &ForwardHooks::default()).unwrap();
    assert_eq!((base.two.rows(), base.two.cols()), (4, 2));
    assert_eq!(base.high.cols(), 10);
    assert_eq!(base.country_probs.cols(), 4);
    assert_eq!(base.culture.cols(), 40);
    assert_eq!(base.vb_type_probs.cols(), 8);

    let mut injected = base.two.clone();
    for v in injected.data_mut() {
        *v = (*v * 0.5 + 0.21).clamp(0.0, 1.0);
    }
    let hooked = model
        .eval_outputs(&batch, &ForwardHooks { two_downstream_override: Some(injected) })
        .unwrap();
    assert_eq!(base.two, hooked.two, "TWO must be unaffected by its own injection");
    assert_ne!(base.high, hooked.high, "HIGH must react to the TWO injection");
    assert_ne!(base.vb_type_probs, hooked.vb_type_probs, "TYPE must react");
    assert_ne!(base.country_probs, hooked.country_probs, "COUNTRY must react");
    assert_ne!(base.culture, hooked.culture, "CULTURE must react");
    pass(5, "hierarchy wiring");
}

// --- 6: synthetic overfit through the CLI --------------------------------------

#[test]
fn c06_synthetic_overfit() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let arg = |s: &str| s.to_string();

    let code = vbchain::cli::run([
        arg("vbchain"),
        arg("synth-data"),
        arg("--out"),
        data.display().to_string(),
        arg("--n"),
        arg("512"),
        arg("--seed"),
        arg("0"),
        arg("--noise"),
        arg("0.02"),
    ]);
    assert_eq!(code, 0, "synth-data failed");

    let check = |task: &str, max_steps: &str, threshold: f64| {
        let run = dir.path().join(format!("run_{task}"));
        let code = vbchain::cli::run([
            arg("vbchain"),
            arg("train"),
            arg("--data"),
            data.display().to_string(),
            arg("--out"),
            run.display().to_string(),
            arg("--task"),
            arg(task),
            arg("--batch-size"),
            arg("64"),
            arg("--max-steps"),
            arg(max_steps),
            arg("--max-epochs"),
            arg("500"),
            arg("--patience"),
            arg("500"),
        ]);
        assert_eq!(code, 0, "train --task {task} failed");

        let eval_out = dir.path().join(format!("eval_{task}"));
        let code = vbchain::cli::run([
            arg("vbchain"),
            arg("evaluate"),
            arg("--artifact"),
            run.join("artifact.bin").display().to_string(),
            arg("--data"),
            data.display().to_string(),
            arg("--split"),
            arg("train"),
            arg("--out"),
            eval_out.display().to_string(),
        ]);
        assert_eq!(code, 0, "evaluate --split train failed");

        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap())
                .unwrap();
        let metric = report[task]["mean_ccc"].as_f64().unwrap();
        assert!(metric >= threshold, "{task}: training mean CCC {metric} below {threshold}");
        println!("  {task}: training mean CCC {metric:.4} (threshold {threshold})");
    };

    check("two", "200", 0.9);
    check("high", "500", 0.8);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "criterion 6 runtime {elapsed:?} exceeds 5 min");
    pass(6, "synthetic overfit");
}

// --- 7: chain benefit (directional, soft) --------------------------------------

#[test]
fn c07_chain_benefit() {
    let mut chain_scores = Vec::new();
    let mut plain_scores = Vec::new();
    for seed in 0..3u64 {
        let spec = SynthSpec { n_samples: 512, noise_std: 0.1, seed, ..SynthSpec::default() };
        let dataset = Arc::new(SyntheticDataset::new(spec, LabelSchema::default()).unwrap());
        let manifest = dataset.manifest().unwrap();
        let provider = dataset.provider();

        for use_chains in [true, false] {
            let mut config = ExperimentConfig::default();
            config.model.num_layers = 4;
            config.model.feature_dim = 32;
            config.model.target_task = Task::High;
            config.model.use_chains = use_chains;
            config.train.batch_size = 64;
            config.train.max_steps = Some(300);
            config.train.max_epochs = 500;
            config.train.patience = 500;
            config.train.seed = seed;

            let dir = tempfile::tempdir().unwrap();
            let outcome = train(&manifest, &provider, &config, dir.path()).unwrap();
            if use_chains {
                chain_scores.push(outcome.best_val_metric);
            } else {
                plain_scores.push(outcome.best_val_metric);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let chain_mean = mean(&chain_scores);
    let plain_mean = mean(&plain_scores);
    println!("  bidirectional-chain HIGH val CCC {chain_mean:.4}, independent heads {plain_mean:.4}");
    assert!(
        chain_mean >= plain_mean - 0.02,
        "chain head ({chain_mean}) fell more than 0.02 below independent heads ({plain_mean})"
    );
    pass(7, "chain benefit");
}

// --- 8: masking and pooling -----------------------------------------------------

#[test]
fn c08_masking_and_pooling() {
    let mut config = vbchain::config::ModelConfig::default();
    config.num_layers = 4;
    config.feature_dim = 32;
    config.attention_dim = 16;
    config.projection_dim = 24;
    config.shared_dim = 12;
    let model = Model::new(
        LabelSchema::default(),
        config,
        ChainOrder::identity(NUM_EMOTIONS),
        ChainOrder::identity(CULTURE_DIM),
        3,
    )
    .unwrap();

    let spec = SynthSpec { n_samples: 6, seed: 8, ..SynthSpec::default() };
    let dataset = SyntheticDataset::new(spec, LabelSchema::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);

    for i in 0..6 {
        let stack = dataset.stack(i);
        let plain = model.encode_sample(&stack, None).unwrap();

        // pad with junk frames, mask them out
        let extra = rng.gen_range(1..5);
        let (l, t, d) = (stack.num_layers(), stack.frames(), stack.dim());
        let mut data = Vec::new();
        for layer in 0..l {
            for frame in 0..(t + extra) {
                for dim in 0..d {
                    data.push(if frame < t {
                        stack.get(layer, frame, dim)
                    } else {
                        rng.gen_range(-40.0..40.0)
                    });
                }
            }
        }
        let padded = FeatureStack::new("p", l, t + extra, d, data).unwrap();
        let mask: Vec<bool> = (0..t + extra).map(|f| f < t).collect();
        let masked = model.encode_sample(&padded, Some(&mask)).unwrap();

        for (a, b) in plain.z.iter().zip(&masked.z) {
            assert!((a - b).abs() < 1e-6, "sample {i}: padded encode deviates {}", (a - b).abs());
        }
        let sum: f64 = masked.attention.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "attention must sum to 1");
        assert!(masked.attention[t..].iter().all(|&w| w == 0.0), "masked frames must get 0");
    }

    // layer softmax weights sum to 1
    let weights = LayerWeights { logits: vec![0.3, -1.2, 2.0, 0.7] };
    let sum: f64 = weights.effective_weights().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    let model_weights: f64 = model.layer_weights().iter().sum();
    assert!((model_weights - 1.0).abs() < 1e-6);

    // attention weights sum to 1 on a raw pooling call too
    let frames = Matrix::from_fn(7, 5, |_, _| rng.gen_range(-1.0..1.0));
    let params = AttentivePoolParams {
        w: Matrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0)),
        u: Matrix::from_fn(4, 1, |_, _| rng.gen_range(-1.0..1.0)),
    };
    let (_, attention) = attentive_pool(&frames, &params, None).unwrap();
    let sum: f64 = attention.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);

    pass(8, "masking and pooling");
}

// --- 9: augmentation ------------------------------------------------------------

fn dominant_frequency(wave: &[f32], sample_rate: f64) -> (f64, f64) {
    let n = wave.len();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = wave
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            Complex::new(x as f64 * hann, 0.0)
        })
        .collect();
    fft.process(&mut buf);
    let (best, _) = buf[..n / 2]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .unwrap();
    (best as f64 * sample_rate / n as f64, sample_rate / n as f64)
}

#[test]
fn c09_augmentation() {
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // exact length contract over random sizes and rates
    for _ in 0..200 {
        let n = rng.gen_range(2..30_000);
        let wave: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rate = rng.gen_range(-0.05..0.05);
        let out = policy.speed_perturb(&wave, rate).unwrap();
        let expected = ((n as f64) / (1.0 + rate)).round().max(1.0) as usize;
        assert_eq!(out.len(), expected, "n={n} rate={rate}");
    }

    // pitch shift: 440 Hz + 100 cents lands on 466.16 Hz within one bin
    let tone: Vec<f32> = (0..16000)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin() as f32)
        .collect();
    let shifted = policy.pitch_shift(&tone, 100.0).unwrap();
    assert_eq!(shifted.len(), tone.len());
    let (freq, bin) = dominant_frequency(&shifted, 16000.0);
    let expected = 440.0 * 2f64.powf(100.0 / 1200.0);
    assert!(
        (freq - expected).abs() <= bin + 1e-9,
        "peak at {freq} Hz, expected {expected} within {bin}"
    );

    // evaluation path is augmentation-free: with a policy configured, a
    // val-split waveform passes through exactly as the unaugmented path,
    // while the same waveform on the train split is transformed
    let normalized = vbchain::dataio::peak_normalize(&tone).unwrap().samples;
    let val_out =
        vbchain::cli::preprocess_waveform(&tone, Split::Val, Some(&policy), 7).unwrap();
    let test_out =
        vbchain::cli::preprocess_waveform(&tone, Split::Test, Some(&policy), 7).unwrap();
    let train_out =
        vbchain::cli::preprocess_waveform(&tone, Split::Train, Some(&policy), 7).unwrap();
    assert_eq!(val_out, normalized, "val split must not be augmented");
    assert_eq!(test_out, normalized, "test split must not be augmented");
    assert_ne!(train_out, normalized, "train split should be augmented under the default policy");

    pass(9, "augmentation");
}

// --- 10: persistence -------------------------------------------------------------

#[test]
fn c10_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);

    // feature store round trips bit-exactly
    for case in 0..10 {
        let (l, t, d) = (rng.gen_range(1..6), rng.gen_range(1..50), rng.gen_range(1..40));
        let data: Vec<f32> = (0..l * t * d).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let stack = FeatureStack::new(format!("s{case}"), l, t, d, data).unwrap();
        let path = dir.path().join(format!("s{case}.vbfs"));
        write_feature_stack(&stack, &path).unwrap();
        assert_eq!(read_feature_stack(&path).unwrap(), stack);
    }

    // model artifact round trips bit-exactly
    let mut config = vbchain::config::ModelConfig::default();
    config.num_layers = 4;
    config.feature_dim = 32;
    config.attention_dim = 16;
    config.projection_dim = 24;
    config.shared_dim = 12;
    let mut model = Model::new(
        LabelSchema::default(),
        config,
        ChainOrder::identity(NUM_EMOTIONS),
        ChainOrder::identity(CULTURE_DIM),
        5,
    )
    .unwrap();
    model.update_bn_running(
        &(0..24).map(|i| i as f64 * 0.01).collect::<Vec<_>>(),
        &(0..24).map(|i| 1.0 + i as f64 * 0.02).collect::<Vec<_>>(),
    );
    let artifact = dir.path().join("artifact.bin");
    model.save(&artifact, "hash01").unwrap();
    let (loaded, hash) = Model::load(&artifact).unwrap();
    assert_eq!(hash, "hash01");
    for (a, b) in loaded.params().entries().iter().zip(model.params().entries()) {
        assert_eq!(a.value, b.value, "parameter {} not bit-exact", a.name);
    }
    assert_eq!(loaded.bn_running(), model.bn_running());

    // split-run resume equals the uninterrupted run within 1e-6
    let spec = SynthSpec { n_samples: 256, noise_std: 0.05, seed: 3, ..SynthSpec::default() };
    let dataset = Arc::new(SyntheticDataset::new(spec, LabelSchema::default()).unwrap());
    let manifest = dataset.manifest().unwrap();
    let provider = dataset.provider();
    let mut config = ExperimentConfig::default();
    config.model.num_layers = 4;
    config.model.feature_dim = 32;
    config.model.target_task = Task::Two;
    config.train.batch_size = 64;
    config.train.max_epochs = 6;
    config.train.patience = 50;

    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&manifest, &provider, &config, full_dir.path()).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    train_with_options(
        &manifest,
        &provider,
        &config,
        split_dir.path(),
        &TrainOptions { resume: false, stop_after_epoch: Some(3) },
    )
    .unwrap();
    let resumed = train_with_options(
        &manifest,
        &provider,
        &config,
        split_dir.path(),
        &TrainOptions { resume: true, stop_after_epoch: None },
    )
    .unwrap();

    assert!(
        (full.best_val_metric - resumed.best_val_metric).abs() < 1e-6,
        "resume diverged: {} vs {}",
        full.best_val_metric,
        resumed.best_val_metric
    );
    let f = full.record.epochs.last().unwrap();
    let r = resumed.record.epochs.last().unwrap();
    assert_eq!(f.epoch, r.epoch);
    assert!((f.train_loss - r.train_loss).abs() < 1e-6);

    pass(10, "persistence");
}

// --- 11: early stopping -----------------------------------------------------------

#[test]
fn c11_early_stopping() {
    let spec = SynthSpec { n_samples: 200, noise_std: 0.05, seed: 12, ..SynthSpec::default() };
    let dataset = Arc::new(SyntheticDataset::new(spec, LabelSchema::default()).unwrap());
    let manifest = dataset.manifest().unwrap();
    let provider = dataset.provider();

    let mut config = ExperimentConfig::default();
    config.model.num_layers = 4;
    config.model.feature_dim = 32;
    config.model.target_task = Task::Two;
    config.train.batch_size = 64;
    // a vanishing learning rate freezes the validation metric after epoch 1
    config.train.lr_downstream = 1e-30;
    config.train.lr_encoder = 1e-30;
    config.train.patience = 3;
    config.train.max_epochs = 50;

    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&manifest, &provider, &config, dir.path()).unwrap();
    assert_eq!(
        outcome.record.epochs.len(),
        1 + config.train.patience,
        "run must halt at exactly 1 + patience epochs"
    );
    assert_eq!(outcome.state.best_epoch, 1);

    // the returned checkpoint is the best-validation one
    let val_samples = manifest.split(Split::Val);
    let val_pool: Vec<_> = val_samples.into_iter().filter(|s| s.has_labels_for(Task::Two)).collect();
    let report = evaluate_samples(&outcome.model, &provider, &val_pool, &config.schema).unwrap();
    let metric = report.target_metric(Task::Two).unwrap();
    assert!(
        (metric - outcome.best_val_metric).abs() < 1e-9,
        "returned checkpoint metric {metric} != best recorded {}",
        outcome.best_val_metric
    );
    // and it is never below any observed validation value
    for epoch in &outcome.record.epochs {
        assert!(outcome.best_val_metric >= *epoch.val.get("two").unwrap() - 1e-12);
    }
    pass(11, "early stopping");
}
