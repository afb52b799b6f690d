use super::*;
use crate::model::ModelConfig;
use crate::tasks::{generate_all, make_sample, random_split, vocab};
use proptest::prelude::*;

fn hp(lr: f64, wd: f64) -> AdamParams {
    AdamParams {
        lr,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: wd,
    }
}

fn tensors(vals: &[&[f64]]) -> Vec<Tensor<f64>> {
    vals.iter().map(|v| Tensor::new(vec![v.len()], v.to_vec()).unwrap()).collect()
}

/// Textbook Adam written against the update formula directly.
fn reference_adam(w: &mut [f64], grads: &[Vec<f64>], p: &AdamParams) {
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - p.beta1.powi(t));
            let vh = v[i] / (1.0 - p.beta2.powi(t));
            w[i] -= p.lr * mh / (vh.sqrt() + p.eps);
        }
    }
}

#[test]
fn zero_gradient_leaves_params() {
    let mut params = tensors(&[&[1.0, -2.0], &[0.5]]);
    let before = params.clone();
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[vec![0.0; 2], vec![0.0]], &mut state, &hp(1e-3, 0.0)).unwrap();
    assert_eq!(params, before);
}

#[test]
fn constant_gradient_step_tends_to_lr() {
    let lr = 1e-3;
    let mut params = tensors(&[&[0.0, 0.0]]);
    let mut state = AdamState::new(&params);
    let grads = vec![vec![0.37, -5.0]];
    let mut last = params[0].data().to_vec();
    for _ in 0..500 {
        adam_step(&mut params, &grads, &mut state, &hp(lr, 0.0)).unwrap();
        for (now, prev) in params[0].data().iter().zip(&last) {
            assert!((now - prev).abs() <= lr * (1.0 + 1e-6));
        }
        last = params[0].data().to_vec();
    }
    let mut again = params.clone();
    adam_step(&mut again, &grads, &mut state, &hp(lr, 0.0)).unwrap();
    assert!(((again[0].data()[0] - params[0].data()[0]).abs() - lr).abs() < 1e-6);
    assert!(again[0].data()[1] > params[0].data()[1]);
}

#[test]
fn matches_reference_adam() {
    let grads: Vec<Vec<f64>> = (0..20).map(|t| vec![(t as f64).sin(), 0.1 * t as f64 - 1.0, 1e-4]).collect();
    let p = hp(3e-3, 0.0);
    let mut expected = vec![0.2, -0.4, 1.0];
    reference_adam(&mut expected, &grads, &p);
    let mut params = tensors(&[&[0.2, -0.4, 1.0]]);
    let mut state = AdamState::new(&params);
    for g in &grads {
        adam_step(&mut params, &[g.clone()], &mut state, &p).unwrap();
    }
    for (a, b) in params[0].data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }
}

#[test]
fn adamw_without_decay_is_adam() {
    let start = vec![Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
    let g = vec![vec![0.5, -0.5, 0.1, 0.0]];
    let (mut a, mut b) = (start.clone(), start.clone());
    adam_step(&mut a, &g, &mut AdamState::new(&start), &hp(1e-2, 0.0)).unwrap();
    adamw_step(&mut b, &g, &mut AdamState::new(&start), &hp(1e-2, 0.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adamw_decays_matrices_only() {
    let start = vec![Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap(), Tensor::new(vec![2], vec![2.0, -2.0]).unwrap()];
    let mut p = start.clone();
    adamw_step(&mut p, &[vec![0.0; 2], vec![0.0; 2]], &mut AdamState::new(&start), &hp(0.1, 0.5)).unwrap();
    assert_eq!(p[0].data(), &[2.0 * 0.95, -2.0 * 0.95]);
    assert_eq!(p[1].data(), start[1].data());
}

#[test]
fn optimizer_rejects_mismatched_state() {
    let mut p = tensors(&[&[1.0, 2.0]]);
    let mut state = AdamState::new(&p);
    assert!(adam_step(&mut p, &[vec![0.0]], &mut state, &hp(0.1, 0.0)).is_err());
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![vec![3.0f64], vec![4.0]];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    let n = (g[0][0] * g[0][0] + g[1][1 - 1] * g[1][0]).sqrt();
    assert!(n <= 1.0 && n > 0.999);
    let mut small = vec![vec![0.1f64]];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::decoder_only().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
        TrainConfig { beta1: 0.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(ArithError::Config(_))));
    }
}

/// Predictor answering from a lookup keyed on the prompt.
struct Table {
    answers: std::collections::HashMap<Vec<Token>, Vec<Token>>,
}

impl Table {
    fn new(samples: &[Sample], f: impl Fn(&Sample) -> Vec<Token>) -> Self {
        Self {
            answers: samples.iter().map(|s| (s.prompt.clone(), f(s))).collect(),
        }
    }
}

impl Predictor for Table {
    fn generate(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>> {
        Ok(prompts.iter().map(|p| self.answers[*p][..m].to_vec()).collect())
    }

    fn teacher_forced(&self, prompts: &[&[Token]], targets: &[&[Token]]) -> Result<Vec<Vec<Token>>> {
        Ok(prompts.iter().zip(targets).map(|(p, t)| self.answers[*p][..t.len()].to_vec()).collect())
    }
}

struct Constant(Token);

impl Predictor for Constant {
    fn generate(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>> {
        Ok(vec![vec![self.0; m]; prompts.len()])
    }

    fn teacher_forced(&self, prompts: &[&[Token]], targets: &[&[Token]]) -> Result<Vec<Vec<Token>>> {
        Ok(targets.iter().take(prompts.len()).map(|t| vec![self.0; t.len()]).collect())
    }
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

#[test]
fn replay_model_is_perfect() {
    let task = TaskSpec::addition();
    let all = generate_all(&task).unwrap();
    let oracle = Table::new(&all, |s| s.completion.clone());
    let r = refs(&all);
    assert_eq!(sequence_accuracy(&oracle, &r).unwrap(), 1.0);
    assert_eq!(token_accuracy(&oracle, &r).unwrap(), 1.0);
    assert_eq!(mae(&oracle, &task, &r).unwrap(), MaeReport { mae: 0.0, malformed_rate: 0.0 });
}

#[test]
fn one_wrong_token_counts_once() {
    let task = TaskSpec::addition();
    let samples: Vec<Sample> = (0..10).map(|i| make_sample(&task, i, 3 * i).unwrap()).collect();
    let victim = samples[4].id;
    let p = Table::new(&samples, |s| {
        let mut c = s.completion.clone();
        if s.id == victim {
            c[5] = vocab::START;
        }
        c
    });
    let r = refs(&samples);
    assert_eq!(sequence_accuracy(&p, &r).unwrap(), 0.9);
    assert_eq!(token_accuracy(&p, &r).unwrap(), 79.0 / 80.0);
    assert!((mae(&p, &task, &r).unwrap().malformed_rate - 0.1).abs() < 1e-15);
}

#[test]
fn constant_zero_matches_bit_frequency() {
    let task = TaskSpec::addition();
    let all = generate_all(&task).unwrap();
    let mut zeros = 0usize;
    for a in 0..128u64 {
        for b in 0..128u64 {
            let r = a + b;
            zeros += (0..8).filter(|i| (r >> i) & 1 == 0).count();
        }
    }
    let expected = zeros as f64 / (16384.0 * 8.0);
    assert_eq!(token_accuracy(&Constant(vocab::ZERO), &refs(&all)).unwrap(), expected);
}

#[test]
fn off_by_one_lsb_gives_unit_mae() {
    let task = TaskSpec::multiplication();
    let samples: Vec<Sample> = (0..50).map(|i| make_sample(&task, i + 1, 127 - i).unwrap()).collect();
    let p = Table::new(&samples, |s| task.completion_for(s.result ^ 1));
    assert_eq!(mae(&p, &task, &refs(&samples)).unwrap().mae, 1.0);
}

#[test]
fn empty_sample_list_is_contract_error() {
    assert!(matches!(sequence_accuracy(&Constant(3), &[]), Err(ArithError::Contract(_))));
    assert!(matches!(token_accuracy(&Constant(3), &[]), Err(ArithError::Contract(_))));
}

#[test]
fn untrained_model_is_near_chance() {
    let task = TaskSpec::addition();
    let all = generate_all(&task).unwrap();
    let model: Model = Model::build(ModelConfig::encoder_decoder(), &mut RngState::new(11)).unwrap();
    let subset: Vec<&Sample> = all.iter().step_by(32).collect();
    assert!(sequence_accuracy(&model, &subset).unwrap() <= 0.01);
}

proptest! {
    #[test]
    fn token_accuracy_dominates_sequence_accuracy(flips in proptest::collection::vec((0usize..40, 0usize..8), 0..60)) {
        let task = TaskSpec::addition();
        let samples: Vec<Sample> = (0..40).map(|i| make_sample(&task, i * 3, 100 - i).unwrap()).collect();
        let p = Table::new(&samples, |s| {
            let mut c = s.completion.clone();
            for &(k, j) in &flips {
                if samples[k].id == s.id {
                    c[j] = if c[j] == vocab::ONE { vocab::ZERO } else { vocab::ONE };
                }
            }
            c
        });
        let r = refs(&samples);
        prop_assert!(token_accuracy(&p, &r).unwrap() >= sequence_accuracy(&p, &r).unwrap());
    }
}

#[test]
fn flop_estimates() {
    let add = estimate_flops(701_637, 12288, 23, 50);
    assert_eq!(add.tokens, 12288 * 23 * 50);
    assert_eq!(add.flops, 6 * 701_637u128 * add.tokens as u128);
    assert!((add.flops_f64() / 5.9e13 - 1.0).abs() < 0.01);
    let mul = estimate_flops(701_637, 12288, 29, 250);
    assert!((mul.flops_f64() / 3.74e14 - 1.0).abs() < 0.01);
    assert_eq!(estimate_flops(701_637, 12288, 23, 0).flops, 0);
}

fn curve(vals: &[f64]) -> Vec<MetricsRow> {
    vals.iter()
        .enumerate()
        .map(|(i, &v)| MetricsRow {
            epoch: i + 1,
            loss: 1.0,
            train_token_acc: v,
            val_token_acc: v,
            train_seq_acc: v,
            val_seq_acc: v,
            mae: None,
        })
        .collect()
}

#[test]
fn threshold_crossing() {
    assert_eq!(epochs_to_threshold(&curve(&[0.1, 0.96]), 0.95), Threshold::Reached { epoch: 2 });
    let miss = epochs_to_threshold(&curve(&[0.1, 0.02, 0.024]), 0.95);
    assert_eq!(miss, Threshold::NotReached { final_accuracy: Some(0.024) });
    assert_eq!(miss.to_string(), "--- (2.4%)");
    assert_eq!(epochs_to_threshold(&curve(&[0.0, 0.5]), 0.0).epoch(), Some(1));
}

#[test]
fn metrics_csv_round_trip() {
    let mut rows = curve(&[0.125, 1.0 / 3.0]);
    rows[1].mae = Some(0.75);
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("epoch,loss,train_token_acc,val_token_acc,train_seq_acc,val_seq_acc,mae\n"));
    assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
}

fn tiny() -> (TaskSpec, Vec<Sample>, SplitSpec, ModelConfig) {
    let task = TaskSpec::new(crate::tasks::Operation::Add, 3);
    let all = generate_all(&task).unwrap();
    let split = random_split(all.len(), 1);
    let mut config = ModelConfig::encoder_decoder().with_d_model(16);
    config.num_heads = 2;
    config.encoder_layers = 2;
    config.decoder_layers = 2;
    (task, all, split, config)
}

#[test]
fn single_sample_overfits() {
    let task = TaskSpec::addition();
    let sample = make_sample(&task, 77, 19).unwrap();
    let split = SplitSpec {
        name: crate::tasks::SplitKind::Random,
        seed: None,
        params: serde_json::Value::Null,
        train: vec![0],
        validation: vec![0],
    };
    let mut config = ModelConfig::encoder_decoder();
    config.dropout = 0.0;
    let model = Model::build(config, &mut RngState::new(2)).unwrap();
    let tc = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let out = train(model, &task, &[sample], &split, &tc, &RunOutputs::default(), &mut |_| {}).unwrap();
    for w in out.metrics.windows(2) {
        assert!(w[1].loss < w[0].loss, "{} then {}", w[0].loss, w[1].loss);
    }
}

#[test]
fn training_is_deterministic() {
    let (task, all, split, config) = tiny();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let model = Model::build(config.clone(), &mut RngState::new(5)).unwrap();
        let out = train(model, &task, &all, &split, &tc, &RunOutputs::default(), &mut |_| {}).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&out.metrics, &mut buf).unwrap();
        buf
    };
    assert_eq!(run(), run());
}

#[test]
fn sequence_and_token_metrics_are_separate() {
    let (task, all, split, config) = tiny();
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 8,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let model = Model::build(config, &mut RngState::new(1)).unwrap();
    let out = train(model, &task, &all, &split, &tc, &RunOutputs::default(), &mut |_| {}).unwrap();
    for r in &out.metrics {
        assert!(r.val_token_acc >= r.val_seq_acc);
        for v in [r.train_token_acc, r.val_token_acc, r.train_seq_acc, r.val_seq_acc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(out.metrics.iter().any(|r| r.val_token_acc > r.val_seq_acc));
}

#[test]
fn divergence_aborts_with_checkpoint() {
    let (task, all, split, config) = tiny();
    let mut model = Model::build(config, &mut RngState::new(1)).unwrap();
    model.param_mut("head.b").unwrap().data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let outputs = RunOutputs {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let err = train(model, &task, &all, &split, &TrainConfig::default(), &outputs, &mut |_| {}).unwrap_err();
    assert!(matches!(err, ArithError::Diverged { epoch: 1, .. }));
    assert!(dir.path().join("diverged.ckpt").exists());
}

#[test]
fn checkpoints_written() {
    let (task, all, split, config) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let outputs = RunOutputs {
        checkpoint_dir: Some(dir.path().join("ck")),
        metrics_path: Some(dir.path().join("metrics.csv")),
        meta: serde_json::Value::Null,
    };
    let model = Model::build(config, &mut RngState::new(1)).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
    let out = train(model, &task, &all, &split, &tc, &outputs, &mut |_| {}).unwrap();
    assert!(out.checkpoints.iter().all(|p| p.exists()));
    assert_eq!(load_metrics(&dir.path().join("metrics.csv")).unwrap(), out.metrics);
    let (back, header) = Model::<f32>::load(&out.checkpoints[1]).unwrap();
    assert_eq!(header.epoch, 2);
    assert_eq!(back.params(), out.model.params());
}

#[test]
fn decoder_only_loss_ignores_prompt_positions() {
    let task = TaskSpec::addition();
    let model: Model = Model::build(ModelConfig::decoder_only(), &mut RngState::new(3)).unwrap();
    let samples: Vec<Sample> = (0..4).map(|i| make_sample(&task, 9 * i, 120 - i).unwrap()).collect();
    let prompts: Vec<&[Token]> = samples.iter().map(|s| s.prompt.as_slice()).collect();
    let targets: Vec<&[Token]> = samples.iter().map(|s| s.completion.as_slice()).collect();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let loss = model.loss_graph(&mut tape, &p, &prompts, &targets, LossMask::CompletionOnly, None).unwrap();
    let loss = tape.value(loss)[0] as f64;
    let logits = model.teacher_forced_batch(&prompts, &targets, false).unwrap();
    let mut manual = 0.0;
    for (s, t) in targets.iter().enumerate() {
        for (j, &tok) in t.iter().enumerate() {
            let row: Vec<f64> = logits.row(s, j).iter().map(|&v| v as f64).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            manual += lse - row[tok as usize];
        }
    }
    manual /= 32.0;
    assert!((loss - manual).abs() < 1e-5, "{loss} vs {manual}");
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let full = model.loss_graph(&mut tape, &p, &prompts, &targets, LossMask::FullSequence, None).unwrap();
    assert!((tape.value(full)[0] as f64 - loss).abs() > 1e-4);
}
