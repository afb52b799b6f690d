use super::*;
use crate::tasks::{make_sample, TaskSpec};

fn build(config: ModelConfig, seed: u64) -> Model {
    Model::build(config, &mut RngState::new(seed)).unwrap()
}

#[test]
fn parameter_counts_match_reference_models() {
    let enc_dec = build(ModelConfig::encoder_decoder(), 0).parameter_count();
    assert!((690_000..=710_000).contains(&enc_dec), "{enc_dec}");
    let dec_only = build(ModelConfig::decoder_only(), 0).parameter_count();
    assert!((290_000..=306_000).contains(&dec_only), "{dec_only}");
    let small = build(ModelConfig::encoder_decoder().with_d_model(32), 0).parameter_count();
    assert!(small < enc_dec);
}

#[test]
fn config_errors() {
    let mut c = ModelConfig::encoder_decoder();
    c.num_heads = 7;
    assert!(matches!(Model::<f32>::build(c, &mut RngState::new(0)), Err(ArithError::Config(_))));
    let mut c = ModelConfig::decoder_only();
    c.ablations.squeeze_encoder = true;
    assert!(Model::<f32>::build(c, &mut RngState::new(0)).is_err());
}

#[test]
fn sinusoidal_properties() {
    let p0 = sinusoidal_pe(0, 64);
    for (j, v) in p0.iter().enumerate() {
        assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    let rows: Vec<Vec<f64>> = (0..32).map(|p| sinusoidal_pe(p, 64)).collect();
    assert!(rows.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    for p in 0..32 {
        for q in p + 1..32 {
            let d: f64 = rows[p].iter().zip(&rows[q]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "{p} {q}");
        }
    }
}

#[test]
fn logits_shape_for_addition() {
    let m = build(ModelConfig::encoder_decoder(), 1);
    let s = make_sample(&TaskSpec::addition(), 1, 126).unwrap();
    let (logits, acts) = m.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
    assert_eq!(logits.shape(), &[8, 5]);
    assert_eq!(acts.enc.len(), 6);
    assert_eq!(acts.dec.len(), 6);
    assert_eq!(acts.enc_vector(1, 0).unwrap().len(), 960);
    assert_eq!(acts.dec_vector(3, 0).unwrap().len(), 8 * 64);
    assert!(acts.dec_vector(7, 0).is_err());
}

#[test]
fn causal_masking_both_families() {
    for config in [ModelConfig::encoder_decoder(), ModelConfig::decoder_only()] {
        let m = build(config, 2);
        let s = make_sample(&TaskSpec::addition(), 37, 90).unwrap();
        let (base, _) = m.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
        for j in 0..8 {
            let mut t = s.completion.clone();
            t[j] = if t[j] == vocab::ONE { vocab::ZERO } else { vocab::ONE };
            let (pert, _) = m.forward_teacher_forced(&s.prompt, &t).unwrap();
            // logits at position i see target tokens < i only
            assert_eq!(&base.data()[..(j + 1) * 5], &pert.data()[..(j + 1) * 5], "j={j}");
        }
    }
}

#[test]
fn zero_layer_decoder_shape() {
    let mut c = ModelConfig::encoder_decoder();
    c.decoder_layers = 0;
    c.encoder_layers = 0;
    let m = build(c, 3);
    let s = make_sample(&TaskSpec::addition(), 3, 4).unwrap();
    let (logits, acts) = m.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
    assert_eq!(logits.shape(), &[8, 5]);
    assert!(acts.dec.is_empty());
}

#[test]
fn invalid_token_rejected() {
    let m = build(ModelConfig::encoder_decoder(), 4);
    let mut prompt = vec![vocab::ZERO; 15];
    prompt[3] = 9;
    assert!(matches!(
        m.forward_teacher_forced(&prompt, &[vocab::ZERO; 8]),
        Err(ArithError::Index { .. })
    ));
}

#[test]
fn generation_lengths_and_constant_model() {
    let mut m = build(ModelConfig::encoder_decoder(), 5);
    let prompt = TaskSpec::addition().prompt(5, 6).unwrap();
    assert!(m.greedy_generate(&prompt, 0).is_err());
    assert_eq!(m.greedy_generate(&prompt, 1).unwrap().len(), 1);
    m.param_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.param_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 0.0, 10.0, 0.0]);
    assert_eq!(m.greedy_generate(&prompt, 8).unwrap(), vec![vocab::ZERO; 8]);
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.0f32, 1.0, 1.0, 0.5]), 1);
    assert_eq!(argmax(&[2.0f32, 2.0]), 0);
}

#[test]
fn identity_overwrite_is_exact() {
    let m = build(ModelConfig::encoder_decoder(), 6);
    let task = TaskSpec::addition();
    let prompts: Vec<Vec<Token>> = (0..20).map(|i| task.prompt(i * 5, 127 - i).unwrap()).collect();
    let refs: Vec<&[Token]> = prompts.iter().map(Vec::as_slice).collect();
    let base = m.greedy_generate_batch(&refs, 8).unwrap();
    let hooked = m.with_overwrite(3, Arc::new(|_: &mut [f32]| {})).unwrap();
    assert_eq!(hooked.greedy_generate_batch(&refs, 8).unwrap(), base);
    assert!(m.with_overwrite(0, Arc::new(|_: &mut [f32]| {})).is_err());
    assert!(m.with_overwrite(7, Arc::new(|_: &mut [f32]| {})).is_err());
}

#[test]
fn zero_overwrite_changes_logits() {
    let m = build(ModelConfig::encoder_decoder(), 7);
    let s = make_sample(&TaskSpec::addition(), 9, 9).unwrap();
    let (a, _) = m.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
    let z = m.with_overwrite(3, Arc::new(|v: &mut [f32]| v.iter_mut().for_each(|x| *x = 0.0))).unwrap();
    let (b, acts) = z.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
    assert_ne!(a, b);
    assert!(acts.dec_vector(3, 0).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn ablations_remove_sublayers() {
    let full = build(ModelConfig::encoder_decoder(), 0);
    for (flag, missing) in [("squeeze", "enc.0.attn.q.w"), ("noattn", "dec.0.cross.q.w"), ("noffn", "dec.0.ffn.up.w")] {
        let mut c = ModelConfig::encoder_decoder();
        match flag {
            "squeeze" => c.ablations.squeeze_encoder = true,
            "noattn" => c.ablations.no_attention = true,
            _ => c.ablations.no_ffn = true,
        }
        let m = build(c, 0);
        assert!(m.param(missing).is_none());
        assert!(m.parameter_count() < full.parameter_count());
        let s = make_sample(&TaskSpec::addition(), 1, 2).unwrap();
        assert_eq!(m.forward_teacher_forced(&s.prompt, &s.completion).unwrap().0.shape(), &[8, 5]);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = build(ModelConfig::decoder_only(), 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path, 8, 3, serde_json::json!({"task": "add"})).unwrap();
    let (back, header) = Model::<f32>::load(&path).unwrap();
    assert_eq!(header.epoch, 3);
    assert_eq!(header.seed, 8);
    assert_eq!(header.config.as_ref(), Some(m.config()));
    assert_eq!(back.names(), m.names());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(read_tensor_file(bytes.as_slice()).is_err());
}

#[test]
fn decoder_only_layout_in_generation() {
    let m = build(ModelConfig::decoder_only(), 9);
    let task = TaskSpec::multiplication();
    let s = make_sample(&task, 5, 3).unwrap();
    let (logits, acts) = m.forward_teacher_forced(&s.prompt, &s.completion).unwrap();
    assert_eq!(logits.shape(), &[14, 5]);
    assert_eq!(acts.dec_len, 15 + 13);
    // greedy argmax of the first step equals teacher-forced argmax at position 0
    let g = m.greedy_generate(&s.prompt, 1).unwrap();
    assert_eq!(g[0], argmax(&logits.data()[..5]));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let task = TaskSpec::addition();
    let samples: Vec<_> = [(3, 100), (127, 1)].iter().map(|&(a, b)| make_sample(&task, a, b).unwrap()).collect();
    let prompts: Vec<&[Token]> = samples.iter().map(|s| s.prompt.as_slice()).collect();
    let targets: Vec<&[Token]> = samples.iter().map(|s| s.completion.as_slice()).collect();
    for config in [ModelConfig::encoder_decoder(), ModelConfig::decoder_only()] {
        let model = build(config, 21).cast::<f64>();
        let report = crate::numcheck::check_model_gradients(
            &model,
            &prompts,
            &targets,
            LossMask::CompletionOnly,
            3,
            &mut RngState::new(4),
            1e-6,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.checked, 3 * model.params().len());
        assert!(report.passed(), "{:?}", report);
    }
}
