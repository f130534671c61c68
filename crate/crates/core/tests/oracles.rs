//! Checks against independent reference computations.

use seqpt::checkpoint::{self, CheckpointMeta, StorageDtype};
use seqpt::lstmcore::{
    cell_forward, sequence_backward, sequence_forward, ClipTarget, InputMasks, LstmConfig, LstmStack, LstmState,
    SeqInput,
};
use seqpt::models::{
    classify_unroll, encode_trajectory, label_weights, lm_unroll, objective_loss, sa_unroll, sa_reconstruct, sequence_loss, Components,
    DropoutDraw, Example, InputKind, LabelMode, ModelSpec, Objective, Params, RunOptions,
};
use seqpt::numkernel::{softmax_xent, Matrix, RngState};
use seqpt::textpipe::EOS;
use seqpt::train::{
    embed_dim_dropout, head_dropout, train_loop, word_dropout, DropoutConfig, LrSchedule, TrainConfig,
};

fn spec(vocab: usize, embed: usize, hidden: usize, layers: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        level: InputKind::Word,
        vocab_size: vocab,
        row_dim: 0,
        embed_dim: embed,
        layers,
        hidden,
        num_classes: classes,
        head_hidden: 0,
    }
}

fn comps(softmax: bool, head: bool) -> Components {
    Components { softmax, rows: false, head }
}

fn max_abs_diff(a: &Params, b: &Params) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn flat(p: &Params) -> Vec<f64> {
    p.tensors().iter().flat_map(|(_, m)| m.data().to_vec()).collect()
}

// Values computed with 60-digit arithmetic (log-sum-exp minus target logit).
#[test]
fn xent_matches_high_precision_reference() {
    let cases: [(&[f64], usize, f64, &[f64]); 6] = [
        (&[0.1, 0.2, 0.3], 2, 1.001942848229244, &[0.3006096053557273, 0.3322249935333472, -0.6328345988890746]),
        (&[1000.0, 0.0, -1000.0], 1, 1000.0, &[1.0, -1.0, 0.0]),
        (
            &[-3.5, 2.25, 7.0, 6.999999999],
            0,
            11.197477406908824,
            &[-0.9999862912659575, 0.004307156200500138, 0.49783956778164845, 0.49783956728380885],
        ),
        (&[30.0, -30.0], 0, 8.75651076269652e-27, &[-8.75651076269652e-27, 8.75651076269652e-27]),
        (&[1e-8, 0.0, 0.0, 0.0, 0.0], 4, 1.6094379144341004, &[0.2000000016, 0.1999999996, 0.1999999996, 0.1999999996, -0.8000000004]),
        (&[745.0, 745.5, -745.0], 2, 1490.97407698418, &[0.37754066879814546, 0.6224593312018546, -1.0]),
    ];
    for (logits, target, loss, grad) in cases {
        let (l, g) = softmax_xent(logits, target).unwrap();
        assert!((l - loss).abs() <= 1e-12 * loss.abs().max(1.0), "{logits:?}: {l} vs {loss}");
        for (a, b) in g.iter().zip(grad) {
            assert!((a - b).abs() <= 1e-14, "{logits:?}: {g:?} vs {grad:?}");
        }
    }
}

fn trunc_setup(layers: usize) -> (LstmStack, Vec<u32>, Vec<f64>) {
    let mut rng = RngState::new(21);
    let stack = LstmStack::init(Some(9), 3, &vec![4; layers], &mut rng);
    let mut stack = stack;
    for l in &mut stack.layers {
        for v in l.w_h.data_mut().iter_mut().chain(l.w_x.data_mut()) {
            *v *= 8.0;
        }
    }
    // distinct tokens so each embedding row belongs to one timestep
    let ids = vec![3, 4, 5, 6, EOS];
    let g: Vec<f64> = (0..4).map(|i| 0.3 - 0.2 * i as f64).collect();
    (stack, ids, g)
}

fn backward(stack: &LstmStack, input: &SeqInput, init: Option<&LstmState>, g: &[f64], k: usize) -> (LstmStack, Vec<Vec<f64>>) {
    let cfg = LstmConfig::default();
    let tape = sequence_forward(stack, input, &InputMasks::default(), &cfg, init).unwrap();
    let mut out = vec![Vec::new(); tape.len()];
    *out.last_mut().unwrap() = g.to_vec();
    let mut grads = stack.zeros_like();
    let ig = sequence_backward(&tape, stack, &out, k, &cfg, &mut grads).unwrap();
    (grads, ig.inputs)
}

#[test]
fn window_covering_the_sequence_is_full_bptt() {
    for layers in [1, 2] {
        let (stack, ids, g) = trunc_setup(layers);
        let input = SeqInput::Tokens(ids);
        let full = backward(&stack, &input, None, &g, usize::MAX);
        assert_eq!(backward(&stack, &input, None, &g, 5), full);
        assert_eq!(backward(&stack, &input, None, &g, 6), full);
        assert_ne!(backward(&stack, &input, None, &g, 4).0, full.0);
    }
}

#[test]
fn full_window_matches_bitwise_through_the_model() {
    let s = spec(9, 3, 4, 2, 2);
    let p = Params::init(&s, comps(true, true), &mut RngState::new(2)).unwrap();
    let ex = Example::Tokens { ids: vec![3, 4, 5, 6, EOS], label: Some(1) };
    for objective in [Objective::Lm, Objective::Sa, Objective::Classify { mode: LabelMode::LinearGain }] {
        let run = |k: usize| {
            let mut g = p.zeros_like();
            let opts = RunOptions { truncate_k: k, ..RunOptions::default() };
            let out = objective_loss(&p, &objective, &ex, &opts, Some(&mut g)).unwrap().unwrap();
            (out.loss.to_bits(), g)
        };
        let Example::Tokens { ids, .. } = &ex else { unreachable!() };
        let len = match objective {
            Objective::Sa => sa_unroll(ids).unwrap().len(),
            Objective::Lm => lm_unroll(ids).unwrap().len(),
            _ => ids.len(),
        };
        assert_eq!(run(len), run(usize::MAX), "{}", objective.name());
    }
}

#[test]
fn one_step_window_blocks_every_earlier_path() {
    for layers in [1, 2] {
        let (stack, ids, g) = trunc_setup(layers);
        let (grads, inputs) = backward(&stack, &SeqInput::Tokens(ids.clone()), None, &g, 1);
        for (t, row) in inputs.iter().enumerate().take(4) {
            assert!(row.iter().all(|&v| v == 0.0), "input gradient at step {t}: {row:?}");
        }
        let emb = grads.embedding.as_ref().unwrap();
        for &tok in &ids[..4] {
            assert!(emb.row(tok as usize).iter().all(|&v| v == 0.0), "embedding row {tok}");
        }
        assert!(emb.row(EOS as usize).iter().any(|&v| v != 0.0));

        // Reference: the last step alone, started from the recorded state.
        let cfg = LstmConfig::default();
        let tape = sequence_forward(&stack, &SeqInput::Tokens(ids.clone()), &InputMasks::default(), &cfg, None).unwrap();
        let step3 = &tape.steps[3].layers;
        let state = LstmState {
            h: step3.iter().map(|c| c.h.clone()).collect(),
            c: step3.iter().map(|c| c.c.clone()).collect(),
        };
        let (reference, _) = backward(&stack, &SeqInput::Tokens(vec![EOS]), Some(&state), &g, usize::MAX);
        for (a, b) in grads.layers.iter().zip(&reference.layers) {
            for (x, y) in [(&a.w_x, &b.w_x), (&a.w_h, &b.w_h), (&a.b, &b.b)] {
                let d = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(d <= 1e-12, "layer gradient differs by {d}");
            }
        }
    }
}

#[test]
fn linear_gain_weights_for_five_steps() {
    assert_eq!(label_weights(5, LabelMode::LinearGain), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(label_weights(5, LabelMode::Last), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(label_weights(1, LabelMode::LinearGain), vec![1.0]);
}

#[test]
fn last_mode_is_linear_gain_with_indicator_weights() {
    let s = spec(9, 3, 4, 1, 3);
    let p = Params::init(&s, comps(false, true), &mut RngState::new(8)).unwrap();
    let input = SeqInput::Tokens(vec![3, 7, 4, 8, EOS]);
    let last = classify_unroll(input.clone(), 2, LabelMode::Last);
    let mut gain = classify_unroll(input, 2, LabelMode::LinearGain);
    gain.weights = vec![0.0, 0.0, 0.0, 0.0, 1.0];
    let mut ga = p.zeros_like();
    let mut gb = p.zeros_like();
    let a = sequence_loss(&p, &last, &RunOptions::default(), Some(&mut ga)).unwrap();
    let b = sequence_loss(&p, &gain, &RunOptions::default(), Some(&mut gb)).unwrap();
    assert!((a.loss - b.loss).abs() <= 1e-12);
    assert!(max_abs_diff(&ga, &gb) <= 1e-12);
}

fn joint_fixture() -> (Params, Example) {
    let s = spec(9, 3, 5, 1, 2);
    let p = Params::init(&s, comps(true, true), &mut RngState::new(13)).unwrap();
    (p, Example::Tokens { ids: vec![3, 5, 4, 8, 6, EOS], label: Some(1) })
}

fn loss_and_grad(p: &Params, objective: Objective, ex: &Example) -> (f64, Vec<f64>) {
    let mut g = p.zeros_like();
    let out = objective_loss(p, &objective, ex, &RunOptions::default(), Some(&mut g)).unwrap().unwrap();
    (out.loss, flat(&g))
}

#[test]
fn joint_loss_is_linear_in_lambda() {
    let (p, ex) = joint_fixture();
    let (l0, g0) = loss_and_grad(&p, Objective::Classify { mode: LabelMode::Last }, &ex);
    let (ls, gs) = loss_and_grad(&p, Objective::Sa, &ex);
    let (j0, gj0) = loss_and_grad(&p, Objective::Joint { lambda: 0.0 }, &ex);
    assert_eq!(j0, l0);
    assert_eq!(gj0, g0);
    for lambda in [0.5, 1.0, 3.0] {
        let (j, gj) = loss_and_grad(&p, Objective::Joint { lambda }, &ex);
        assert!((j - (l0 + lambda * ls)).abs() <= 1e-10);
        for ((a, b), c) in gj.iter().zip(&g0).zip(&gs) {
            assert!((a - (b + lambda * c)).abs() <= 1e-10);
        }
    }
}

#[test]
fn huge_lambda_points_along_the_autoencoder_gradient() {
    let (p, ex) = joint_fixture();
    let (_, gs) = loss_and_grad(&p, Objective::Sa, &ex);
    let (_, gj) = loss_and_grad(&p, Objective::Joint { lambda: 1e6 }, &ex);
    let dot: f64 = gs.iter().zip(&gj).map(|(a, b)| a * b).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = dot / (n(&gs) * n(&gj));
    assert!(cos > 1.0 - 1e-9, "cosine {cos}");
}

#[test]
fn dropout_rates_and_scaling() {
    let n = 10_000;
    for p in [0.1, 0.25, 0.5] {
        let ids: Vec<u32> = (0..n).map(|i| 3 + (i % 50) as u32).collect();
        let masks = [
            word_dropout(&ids, p, &mut RngState::new(1)),
            embed_dim_dropout(n, p, &mut RngState::new(2)),
            head_dropout(n, p, &mut RngState::new(3)),
        ];
        for m in masks {
            let dropped = m.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
            assert!((dropped - p).abs() <= 0.02, "p={p}: dropped {dropped}");
            assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-15));
        }
        // expectation of the scaled factor, averaged over ten 10^4-position masks
        // (one mask alone has a standard error of 1% at p = 0.5)
        let mean = (0..10u64)
            .map(|s| embed_dim_dropout(n, p, &mut RngState::new(100 + s)).iter().sum::<f64>() / n as f64)
            .sum::<f64>()
            / 10.0;
        assert!((mean - 1.0).abs() <= 0.02, "p={p}: mean factor {mean}");
    }
    let specials = word_dropout(&[0, 1, 2, 0, 1, 2], 0.9, &mut RngState::new(0));
    assert_eq!(specials, vec![1.0; 6]);
}

#[test]
fn embedding_dimension_mask_is_shared_across_timesteps() {
    let s = spec(12, 16, 4, 1, 2);
    let p = Params::init(&s, comps(false, true), &mut RngState::new(4)).unwrap();
    let ex = Example::Tokens { ids: vec![3, 4, 5, 6, 7, 8, 9, 10, EOS], label: Some(0) };
    let mut dropped_any = false;
    for seed in 0..10 {
        let opts = RunOptions {
            dropout: Some(DropoutDraw {
                config: DropoutConfig { embed_dim_drop: 0.5, word_drop: 0.0, head_drop: 0.0 },
                rng: RngState::new(seed),
            }),
            ..RunOptions::default()
        };
        let mut g = p.zeros_like();
        objective_loss(&p, &Objective::Classify { mode: LabelMode::LinearGain }, &ex, &opts, Some(&mut g)).unwrap();
        let emb = g.stack.embedding.as_ref().unwrap();
        // a column is either zero for every token that occurred, or for none of them
        for d in 0..16 {
            let zeros = (3..=10).filter(|&t| emb.get(t, d) == 0.0).count();
            assert!(zeros == 0 || zeros == 8, "seed {seed} dim {d}: {zeros} zero rows");
            dropped_any |= zeros == 8;
        }
    }
    assert!(dropped_any);
}

#[test]
fn cells_stay_bounded_over_a_long_rollout() {
    let mut rng = RngState::new(77);
    let mut stack = LstmStack::init(None, 3, &[6], &mut rng);
    let layer = &mut stack.layers[0];
    for v in layer.w_x.data_mut().iter_mut().chain(layer.w_h.data_mut()) {
        *v *= 40.0;
    }
    // strong positive input and forget gates so the cell keeps growing
    for v in layer.b.data_mut() {
        *v = 6.0;
    }
    for (target, clip) in [(ClipTarget::Cell, 3.0), (ClipTarget::Hidden, 0.25)] {
        let cfg = LstmConfig { cell_clip: clip, clip_target: target };
        let (mut h, mut c) = (vec![0.0; 6], vec![0.0; 6]);
        let mut hit = false;
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
            let cache = cell_forward(&x, &h, &c, layer, &cfg).unwrap();
            let bounded = match target {
                ClipTarget::Cell => &cache.c,
                ClipTarget::Hidden => &cache.h,
            };
            assert!(bounded.iter().all(|v| v.abs() <= clip), "{bounded:?}");
            hit |= bounded.iter().any(|v| v.abs() == clip);
            h = cache.h;
            c = cache.c;
        }
        assert!(hit, "{target:?}: clip never engaged");
    }
}

fn reconstruction_error(p: &Params, docs: &[Vec<u32>]) -> f64 {
    let lstm = LstmConfig::default();
    let wrong = docs.iter().filter(|d| &sa_reconstruct(p, d, &lstm).unwrap() != *d).count();
    wrong as f64 / docs.len() as f64
}

fn memorize_docs() -> Vec<Vec<u32>> {
    let mut rng = RngState::new(31);
    // distinct first tokens, so every later token is determined by its prefix
    (0..5)
        .map(|i| {
            let mut d = vec![3 + i as u32];
            d.extend((0..4).map(|_| 3 + rng.below(7) as u32));
            d.push(EOS);
            d
        })
        .collect()
}

fn memorize_config() -> TrainConfig {
    TrainConfig {
        lr: 1.0,
        schedule: LrSchedule::Constant,
        batch_size: 5,
        max_steps: 2000,
        eval_every: 50,
        patience: 100,
        ..TrainConfig::default()
    }
}

#[test]
fn autoencoder_memorizes_five_sequences() {
    let docs = memorize_docs();
    let s = spec(10, 8, 32, 1, 0);
    let p = Params::init(&s, comps(true, false), &mut RngState::new(1)).unwrap();
    let train: Vec<Example> = docs.iter().map(|d| Example::Tokens { ids: d.clone(), label: None }).collect();
    let mut eval = |p: &Params| Ok(reconstruction_error(p, &docs));
    let out = train_loop(p, &Objective::Sa, &train, &memorize_config(), &DropoutConfig::default(), Some(&mut eval)).unwrap();
    assert_eq!(reconstruction_error(&out.params, &docs), 0.0, "best {:?}", out.best_valid_error);
    assert!(out.best_step <= 2000);
}

#[test]
fn language_model_memorizes_five_sequences() {
    let docs = memorize_docs();
    let s = spec(10, 8, 32, 1, 0);
    let p = Params::init(&s, comps(true, false), &mut RngState::new(1)).unwrap();
    let train: Vec<Example> = docs.iter().map(|d| Example::Tokens { ids: d.clone(), label: None }).collect();
    let cfg = TrainConfig { eval_every: 0, ..memorize_config() };
    let out = train_loop(p, &Objective::Lm, &train, &cfg, &DropoutConfig::default(), None).unwrap();
    let (mut loss, mut n) = (0.0, 0.0);
    for ex in &train {
        let o = objective_loss(&out.params, &Objective::Lm, ex, &RunOptions::default(), None).unwrap().unwrap();
        loss += o.loss;
        n += o.normalizer;
    }
    assert!(loss / n < 0.1, "{} nats per token", loss / n);
}

#[test]
fn transfer_preserves_encoder_trajectories() {
    let s = spec(10, 4, 6, 2, 3);
    let docs = memorize_docs();
    let train: Vec<Example> = docs.iter().map(|d| Example::Tokens { ids: d.clone(), label: None }).collect();
    let p = Params::init(&s, comps(true, false), &mut RngState::new(5)).unwrap();
    let cfg = TrainConfig { max_steps: 40, eval_every: 0, ..memorize_config() };
    let pre = train_loop(p, &Objective::Sa, &train, &cfg, &DropoutConfig::default(), None).unwrap().params;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sa.sqpt");
    let meta = CheckpointMeta {
        spec: s.clone(),
        vocab_hash: Some("v".into()),
        step: 40,
        objective: "sa".into(),
        seed: 5,
        dtype: StorageDtype::F64,
        tensors: 0,
        tag: None,
    };
    checkpoint::save(&pre, &meta, &path).unwrap();
    let ck = checkpoint::load(&path).unwrap();
    let (fine, _) = checkpoint::transfer_init(&ck, &s, comps(false, true), Some("v"), 99).unwrap();
    let lstm = LstmConfig::default();
    for d in &docs {
        let input = SeqInput::Tokens(d.clone());
        let a = encode_trajectory(&pre, &input, &lstm).unwrap();
        let b = encode_trajectory(&fine, &input, &lstm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn training_is_deterministic_under_dropout() {
    let s = spec(10, 6, 8, 1, 2);
    let train: Vec<Example> = memorize_docs()
        .into_iter()
        .enumerate()
        .map(|(i, ids)| Example::Tokens { ids, label: Some(i % 2) })
        .collect();
    let dropout = DropoutConfig { embed_dim_drop: 0.3, word_drop: 0.2, head_drop: 0.4 };
    let cfg = TrainConfig { batch_size: 2, max_steps: 25, eval_every: 5, seed: 3, ..memorize_config() };
    let run = || {
        let p = Params::init(&s, comps(false, true), &mut RngState::new(6)).unwrap();
        let mut eval = |_: &Params| Ok(0.5);
        train_loop(p, &Objective::Classify { mode: LabelMode::LinearGain }, &train, &cfg, &dropout, Some(&mut eval)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let other = TrainConfig { seed: 4, ..cfg };
    let p = Params::init(&s, comps(false, true), &mut RngState::new(6)).unwrap();
    let c = train_loop(p, &Objective::Classify { mode: LabelMode::LinearGain }, &train, &other, &dropout, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn rows_input_trajectory_matches_a_hand_rolled_loop() {
    let mut rng = RngState::new(12);
    let stack = LstmStack::init(None, 3, &[4], &mut rng);
    let rows = Matrix::uniform(6, 3, 1.0, &mut rng);
    let cfg = LstmConfig::default();
    let tape = sequence_forward(&stack, &SeqInput::Rows(rows.clone()), &InputMasks::default(), &cfg, None).unwrap();
    let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
    for t in 0..6 {
        let cache = cell_forward(rows.row(t), &h, &c, &stack.layers[0], &cfg).unwrap();
        h = cache.h;
        c = cache.c;
        assert_eq!(tape.outputs[t], h);
    }
}
