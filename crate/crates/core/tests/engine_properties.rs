mod common;

use common::random_sequence;
use proptest::prelude::*;
use tokenhorizon::engine::{
    layer_macs, train, ArchConfig, CaptureFlags, ModelCheckpoint, MultimodalSequence, Optimizer, Precision,
    TrainConfig, VisualTreatment,
};
use tokenhorizon::tensor::Matrix;
use tokenhorizon::Error;

fn arch(layers: usize, d: usize, heads: usize) -> ArchConfig {
    ArchConfig::new(layers, d, heads, 2 * d, 16, 24).with_precision(Precision::Double)
}

#[test]
fn identity_model_is_uniform() {
    let a = ArchConfig::new(1, 4, 1, 8, 10, 4);
    let model = ModelCheckpoint::identity(a).unwrap().model::<f64>().unwrap();
    let seq = MultimodalSequence::new(vec![], Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.5]), vec![3], 1);
    let r = model.forward_prefill(&seq, &CaptureFlags::none()).unwrap();
    for p in r.probs {
        assert_eq!(p, 0.1);
    }
}

#[test]
fn resume_paths_are_bit_exact() {
    let a = arch(3, 8, 2);
    let model = ModelCheckpoint::init(a.clone(), 4).unwrap().model::<f64>().unwrap();
    let seq = random_sequence(8, 1, 5, 2, 16, 9);
    let full = model.forward_prefill(&seq, &CaptureFlags::all_checkpoints(3)).unwrap();
    for (i, ck) in &full.checkpoints {
        let keep = model.resume_forward(ck, &VisualTreatment::KeepAll, &CaptureFlags::none()).unwrap();
        assert_eq!(keep.probs, full.probs, "keep_all at {i}");
        let ones = model
            .resume_forward(ck, &VisualTreatment::ZeroMask(vec![true; 5]), &CaptureFlags::none())
            .unwrap();
        assert_eq!(ones.probs, full.probs, "all-ones mask at {i}");
    }
    // Nothing left to mix at the last boundary.
    let last = &full.checkpoints[&3];
    let zeroed = model
        .resume_forward(last, &VisualTreatment::ZeroMask(vec![false; 5]), &CaptureFlags::none())
        .unwrap();
    assert_eq!(zeroed.prob(seq.label), full.prob(seq.label));
}

#[test]
fn single_precision_resume_is_close() {
    let a = arch(3, 8, 2).with_precision(Precision::Single);
    let model = ModelCheckpoint::init(a, 4).unwrap().model::<f32>().unwrap();
    let seq = random_sequence(8, 1, 5, 2, 16, 9);
    let full = model.forward_prefill(&seq, &CaptureFlags::all_checkpoints(3)).unwrap();
    for ck in full.checkpoints.values() {
        let keep = model.resume_forward(ck, &VisualTreatment::KeepAll, &CaptureFlags::none()).unwrap();
        for (x, y) in keep.probs.iter().zip(&full.probs) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_mask_and_drop_may_differ() {
    let a = arch(3, 8, 2);
    let model = ModelCheckpoint::init(a, 2).unwrap().model::<f64>().unwrap();
    let seq = random_sequence(8, 1, 5, 2, 16, 3);
    let full = model.forward_prefill(&seq, &CaptureFlags::checkpoints([1])).unwrap();
    let ck = &full.checkpoints[&1];
    let mut mask = vec![false; 5];
    mask[2] = true;
    let zm = model.resume_forward(ck, &VisualTreatment::ZeroMask(mask), &CaptureFlags::none()).unwrap();
    let dr = model.resume_forward(ck, &VisualTreatment::Drop(vec![2]), &CaptureFlags::none()).unwrap();
    let gap = zm.probs.iter().zip(&dr.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // Zeroed rows still take attention mass, so the two generally disagree.
    println!("zero-mask vs drop max gap {gap:e}");
    assert!(gap.is_finite());
}

#[test]
fn resume_rejects_bad_masks_and_layers() {
    let a = arch(2, 8, 2);
    let model = ModelCheckpoint::init(a, 1).unwrap().model::<f64>().unwrap();
    let seq = random_sequence(8, 1, 4, 2, 16, 1);
    let full = model.forward_prefill(&seq, &CaptureFlags::checkpoints([1])).unwrap();
    let ck = &full.checkpoints[&1];
    assert!(matches!(
        model.resume_forward(ck, &VisualTreatment::ZeroMask(vec![true; 3]), &CaptureFlags::none()),
        Err(Error::MaskLength { .. })
    ));
    let mut far = ck.clone();
    far.layer_index = 5;
    assert!(matches!(
        model.resume_forward(&far, &VisualTreatment::KeepAll, &CaptureFlags::none()),
        Err(Error::LayerOutOfRange { .. })
    ));
    assert!(model.attention_scores(&seq, 0).is_err());
    assert!(model.attention_scores(&seq, 3).is_err());
}

#[test]
fn long_sequences_are_refused() {
    let a = ArchConfig::new(1, 8, 2, 16, 16, 6);
    let model = ModelCheckpoint::init(a, 1).unwrap().model::<f32>().unwrap();
    let seq = random_sequence(8, 1, 5, 2, 16, 1);
    assert!(matches!(
        model.forward_prefill(&seq, &CaptureFlags::none()),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn non_finite_weights_name_a_layer() {
    let a = arch(2, 8, 2);
    let mut ck = ModelCheckpoint::init(a, 1).unwrap();
    ck.params.layers[1].w_down.set(0, 0, f64::INFINITY);
    let model = tokenhorizon::engine::Model::new(ck.arch.clone(), ck.params.clone()).unwrap();
    let seq = random_sequence(8, 1, 4, 2, 16, 1);
    match model.forward_prefill(&seq, &CaptureFlags::none()) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, 2),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn uniform_keys_give_uniform_last_row() {
    let a = arch(2, 8, 2);
    let mut ck = ModelCheckpoint::init(a, 6).unwrap();
    for l in &mut ck.params.layers {
        l.wk.fill_zero();
    }
    let model = ck.model::<f64>().unwrap();
    let seq = random_sequence(8, 2, 4, 3, 16, 2);
    let n = seq.len();
    for layer in 1..=2 {
        let attn = model.attention_scores(&seq, layer).unwrap();
        for c in 0..n {
            assert!((attn.get(n - 1, c) - 1.0 / n as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn macs_match_the_layer_formula() {
    let a = arch(3, 8, 2);
    let model = ModelCheckpoint::init(a.clone(), 1).unwrap().model::<f64>().unwrap();
    let seq = random_sequence(8, 1, 5, 2, 16, 1);
    let r = model.forward_prefill(&seq, &CaptureFlags::none()).unwrap();
    assert_eq!(r.macs, 3 * layer_macs(seq.len(), 8, a.mlp_width));
}

#[test]
fn zero_steps_leave_the_checkpoint_alone() {
    let a = arch(1, 8, 2);
    let ck = ModelCheckpoint::init(a, 1).unwrap();
    let data = vec![random_sequence(8, 1, 3, 1, 16, 1)];
    let cfg = TrainConfig {
        steps: 0,
        lr: 0.1,
        batch: 1,
        seed: 0,
        optimizer: Optimizer::default(),
        clip_norm: 0.0,
    };
    let (out, trace) = train(&ck, &data, &cfg).unwrap();
    assert_eq!(out, ck);
    assert!(trace.is_empty());
    assert!(train(&ck, &[], &cfg).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let a = arch(1, 8, 2);
    let ck = ModelCheckpoint::init(a, 1).unwrap();
    // One input with conflicting labels cannot be fitted; a huge step size
    // then blows the loss up.
    let base = random_sequence(8, 1, 3, 1, 16, 1);
    let data: Vec<_> = (0..8)
        .map(|l| MultimodalSequence { label: l, ..base.clone() })
        .collect();
    let cfg = TrainConfig {
        steps: 200,
        lr: 1e9,
        batch: 4,
        seed: 0,
        optimizer: Optimizer::default(),
        clip_norm: 0.0,
    };
    match train(&ck, &data, &cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step < 200),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn training_is_bit_identical_across_runs_and_thread_counts() {
    let a = arch(2, 8, 2);
    let ck = ModelCheckpoint::init(a, 3).unwrap();
    let data: Vec<_> = (0..16).map(|s| random_sequence(8, 1, 3, 2, 16, s)).collect();
    let cfg = TrainConfig {
        steps: 20,
        lr: 0.05,
        batch: 4,
        seed: 9,
        optimizer: Optimizer::Sgd { momentum: 0.9 },
        clip_norm: 1.0,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&ck, &data, &cfg).unwrap())
    };
    let (a1, t1) = run(1);
    let (a2, t2) = run(3);
    assert_eq!(a1.to_bytes(), a2.to_bytes());
    assert_eq!(t1, t2);
    assert_eq!(run(1).0.params, a1.params);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_and_attention_rows_normalise(seed in 0u64..1000, nv in 1usize..6, nq in 1usize..4) {
        let a = arch(2, 8, 2);
        let model = ModelCheckpoint::init(a, seed % 7).unwrap().model::<f64>().unwrap();
        let seq = random_sequence(8, 1, nv, nq, 16, seed);
        let r = model
            .forward_prefill(&seq, &CaptureFlags::none().with_attention([1, 2]))
            .unwrap();
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(r.probs.iter().all(|&p| p >= 0.0));
        for attn in r.attention.values() {
            for row in 0..attn.rows() {
                let s: f64 = attn.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                for c in row + 1..attn.cols() {
                    prop_assert_eq!(attn.get(row, c), 0.0);
                }
            }
            prop_assert_eq!(attn.get(0, 0), 1.0);
        }
    }

    #[test]
    fn later_tokens_do_not_touch_earlier_rows(seed in 0u64..1000, t in 0usize..6) {
        let a = arch(2, 8, 2);
        let model = ModelCheckpoint::init(a, 5).unwrap().model::<f64>().unwrap();
        let seq = random_sequence(8, 1, 4, 2, 16, seed);
        let n = seq.len();
        let t = t.min(n - 2);
        let mut pert = seq.clone();
        // Perturb the token after `t`, whichever block it sits in.
        let p = t + 1;
        if p >= 1 && p < 5 {
            for x in pert.visual.row_mut(p - 1) {
                *x += 3.0;
            }
        } else if p >= 5 {
            pert.question_ids[p - 5] = (pert.question_ids[p - 5] + 1) % 16;
        }
        for layer in 1..=2 {
            let x = model.attention_scores(&seq, layer).unwrap();
            let y = model.attention_scores(&pert, layer).unwrap();
            prop_assert_eq!(x.row(t), y.row(t));
        }
        let cx = model.forward_prefill(&seq, &CaptureFlags::checkpoints([2])).unwrap();
        let cy = model.forward_prefill(&pert, &CaptureFlags::checkpoints([2])).unwrap();
        let (hx, hy) = (&cx.checkpoints[&2], &cy.checkpoints[&2]);
        if t == 0 {
            prop_assert_eq!(hx.hidden_text.row(0), hy.hidden_text.row(0));
        } else if t < 5 {
            prop_assert_eq!(hx.hidden_visual.row(t - 1), hy.hidden_visual.row(t - 1));
        }
    }
}
