use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchkd_core::autodiff::{compare_gradients, finite_diff_gradient, DiffArray, Tape};
use switchkd_core::model::{
    switch_forward, switch_forward_on_tape, BatchInputs, Group, Image, ImageSize, ModelConfig, ToyVLM, Trainable,
};
use switchkd_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: ImageSize {
            height: 4,
            width: 4,
            channels: 1,
        },
        vision_dim: 4,
        n_visual_tokens: 4,
        lm_dim: 8,
        lm_layers: 1,
        lm_heads: 2,
        vocab_size: 16,
        max_seq_len: 8,
    }
}

fn random_image(size: ImageSize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(size, (0..size.numel()).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[test]
fn zero_model_on_zero_image_gives_zero_features() {
    let cfg = ModelConfig::student();
    let m = ToyVLM::zeros(cfg).unwrap();
    let f = m.encode_image(&Image::zeros(cfg.image_size)).unwrap();
    assert_eq!(f.tokens.shape(), &[cfg.n_visual_tokens, cfg.vision_dim]);
    assert!(f.tokens.values().iter().all(|&v| v == 0.0));
}

#[test]
fn shapes_hold_for_teacher_and_student() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(ImageSize::default(), &mut rng);
    let text = vec![0, 14, 10, 3];
    let t = ToyVLM::new(ModelConfig::teacher(), 1).unwrap();
    let s = ToyVLM::new(ModelConfig::student(), 2).unwrap();
    let f = s.encode_image(&img).unwrap();
    assert_eq!(f.tokens.shape(), &[4, 32]);
    assert_eq!(s.project(&f).unwrap().shape(), &[4, 32]);
    assert_eq!(t.project(&t.encode_image(&img).unwrap()).unwrap().shape(), &[4, 64]);
    let zt = t.forward(&img, &text).unwrap();
    let zs = s.forward(&img, &text).unwrap();
    assert_eq!(zt.shape(), &[4, 64]);
    assert_eq!(zt.shape(), zs.shape());
}

#[test]
fn projector_rejects_wrong_width() {
    let t = ToyVLM::new(ModelConfig::teacher(), 1).unwrap();
    let f = switchkd_core::model::VisualFeatures {
        tokens: DiffArray::zeros(vec![16, 8]).unwrap(),
    };
    assert!(matches!(t.project(&f), Err(Error::Dimension(_))));
}

#[test]
fn forward_is_deterministic_and_equals_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(ImageSize::default(), &mut rng);
    let text = vec![0, 15, 12];
    let a = ToyVLM::new(ModelConfig::student(), 42).unwrap();
    let b = ToyVLM::new(ModelConfig::student(), 42).unwrap();
    assert_eq!(a, b);
    let za = a.forward(&img, &text).unwrap();
    let zb = b.forward(&img, &text).unwrap();
    assert_eq!(za.values(), zb.values());
    let manual = a
        .lm_forward(&a.project(&a.encode_image(&img).unwrap()).unwrap(), &text)
        .unwrap();
    assert_eq!(manual.values(), za.values());
}

#[test]
fn identity_like_projector_passes_gelu_through() {
    let cfg = ModelConfig {
        vision_dim: 4,
        lm_dim: 8,
        lm_heads: 2,
        ..tiny()
    };
    let mut m = ToyVLM::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w1: Vec<f64> = (0..cfg.vision_dim * cfg.lm_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    m.projector.w1.value.values_mut().copy_from_slice(&w1);
    m.projector.b1.value.values_mut().fill(0.0);
    let w2 = m.projector.w2.value.values_mut();
    w2.fill(0.0);
    for i in 0..cfg.lm_dim {
        w2[i * cfg.lm_dim + i] = 1.0;
    }
    m.projector.b2.value.values_mut().fill(0.0);

    let h: Vec<f64> = (0..cfg.n_visual_tokens * cfg.vision_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let feats = switchkd_core::model::VisualFeatures {
        tokens: DiffArray::matrix(cfg.n_visual_tokens, cfg.vision_dim, h.clone()).unwrap(),
    };
    let out = m.project(&feats).unwrap();
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    for r in 0..cfg.n_visual_tokens {
        for c in 0..cfg.lm_dim {
            let pre: f64 = (0..cfg.vision_dim)
                .map(|j| h[r * cfg.vision_dim + j] * w1[j * cfg.lm_dim + c])
                .sum();
            assert!((out.values()[r * cfg.lm_dim + c] - gelu(pre)).abs() < 1e-12);
        }
    }
}

#[test]
fn text_positions_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(ImageSize::default(), &mut rng);
    let m = ToyVLM::new(ModelConfig::teacher(), 4).unwrap();
    let base = vec![0, 14, 11, 2, 7];
    let z0 = m.forward(&img, &base).unwrap();
    let n = 64;
    for t in 1..base.len() {
        let mut alt = base.clone();
        alt[t] = (alt[t] + 17) % n;
        let z1 = m.forward(&img, &alt).unwrap();
        for pos in 0..base.len() {
            let same = z0.values()[pos * n..(pos + 1) * n] == z1.values()[pos * n..(pos + 1) * n];
            assert_eq!(same, pos < t, "perturbing {t} at position {pos}");
        }
    }
}

#[test]
fn log_softmax_rows_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(ImageSize::default(), &mut rng);
    let m = ToyVLM::new(ModelConfig::student(), 4).unwrap();
    let z = m.forward(&img, &[0, 1, 2, 3, 4, 5, 6]).unwrap();
    for row in z.values().chunks(64) {
        let lse = log_sum_exp(row);
        let total: f64 = row.iter().map(|v| (v - lse).exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }
}

#[test]
fn sequence_overflow_and_bad_tokens_are_rejected() {
    let cfg = ModelConfig::student();
    let m = ToyVLM::new(cfg, 1).unwrap();
    let img = Image::zeros(cfg.image_size);
    let long = vec![1; cfg.max_seq_len - cfg.n_visual_tokens + 1];
    assert!(matches!(m.forward(&img, &long), Err(Error::Contract(_))));
    assert!(matches!(m.forward(&img, &[0, 64]), Err(Error::Bounds { .. })));
}

#[test]
fn batched_forward_matches_single_samples() {
    let cfg = ModelConfig::student();
    let m = ToyVLM::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs: Vec<Image> = (0..3).map(|_| random_image(cfg.image_size, &mut rng)).collect();
    let texts = vec![vec![0, 14, 10], vec![0, 15], vec![0, 16, 12, 3]];
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, Trainable::NONE);
    let batch = BatchInputs::new(&cfg, &imgs.iter().collect::<Vec<_>>(), texts.clone()).unwrap();
    let z = m.forward_on_tape(&mut tape, &bound, &batch).unwrap();
    let mut expected = Vec::new();
    for (img, t) in imgs.iter().zip(&texts) {
        expected.extend_from_slice(m.forward(img, t).unwrap().values());
    }
    let got = tape.value(z);
    assert_eq!(got.len(), expected.len());
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn groups_cover_every_parameter_once() {
    let m = ToyVLM::new(ModelConfig::teacher(), 0).unwrap();
    let names: Vec<&str> = m.params().iter().map(|(_, p)| p.name.as_str()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for (g, p) in m.params() {
        assert!(p.name.starts_with(&format!("{}.", g.as_str())), "{} in {g}", p.name);
    }
    let by_group: usize = Group::ALL.iter().map(|&g| m.group_params(g).len()).sum();
    assert_eq!(by_group, names.len());
    // 7 vision + 4 projector + 6 shell + 13 per block
    assert_eq!(names.len(), 7 + 4 + 6 + 13 * 2);
}

#[test]
fn switch_with_copied_encoder_equals_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = random_image(ImageSize::default(), &mut rng);
    let text = vec![0, 14, 13];
    let t = ToyVLM::new(ModelConfig::teacher(), 1).unwrap();
    let mut s = ToyVLM::new(ModelConfig::student(), 2).unwrap();
    s.vision = t.vision.clone();
    let zsw = switch_forward(&s, &t, &img, &text).unwrap();
    let zt = t.forward(&img, &text).unwrap();
    assert_eq!(zsw.values(), zt.values());
}

#[test]
fn switch_rejects_incompatible_student() {
    let t = ToyVLM::new(ModelConfig::teacher(), 1).unwrap();
    let s = ToyVLM::new(
        ModelConfig {
            vision_dim: 16,
            ..ModelConfig::student()
        },
        2,
    )
    .unwrap();
    let img = Image::zeros(ImageSize::default());
    let err = switch_forward(&s, &t, &img, &[0, 14]).unwrap_err();
    assert!(matches!(err, Error::Compatibility { field: "vision_dim", .. }));
}

#[test]
fn switch_gradients_reach_only_student_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = ToyVLM::new(ModelConfig::teacher(), 1).unwrap();
    let mut s = ToyVLM::new(ModelConfig::student(), 2).unwrap();
    let img = random_image(ImageSize::default(), &mut rng);
    let mut tape = Tape::new();
    let sb = s.bind(&mut tape, Trainable::ALL);
    let tb = t.bind(&mut tape, Trainable::NONE);
    let batch = BatchInputs::new(&s.config, &[&img], vec![vec![0, 14, 10]]).unwrap();
    let z = switch_forward_on_tape(&mut tape, &s, &sb.vision, &t, &tb, &batch).unwrap();
    let sq = tape.mul(z, z).unwrap();
    let root = tape.sum(sq).unwrap();
    tape.backward(root).unwrap();
    s.accumulate_grads(&tape, &sb).unwrap();
    assert!(s.grad_norm_sq(Group::Vision) > 0.0);
    assert_eq!(s.grad_norm_sq(Group::Projector), 0.0);
    assert_eq!(s.grad_norm_sq(Group::Language), 0.0);
    for v in tb.projector.list().into_iter().chain(tb.language.list()) {
        assert!(tape.grad(v).is_none());
    }
}

/// Scalar probe of a forward pass: `Σ w ⊙ logits` for fixed random weights.
fn probe(model: &ToyVLM, batch: &BatchInputs, weights: &[f64], track: Trainable) -> (f64, ToyVLM) {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, track);
    let z = m.forward_on_tape(&mut tape, &bound, batch).unwrap();
    let w = tape.constant(tape.shape(z).to_vec(), weights.to_vec()).unwrap();
    let prod = tape.mul(z, w).unwrap();
    let root = tape.sum(prod).unwrap();
    let value = tape.scalar(root);
    if track.any() {
        tape.backward(root).unwrap();
        m.accumulate_grads(&tape, &bound).unwrap();
    }
    (value, m)
}

fn flat(model: &ToyVLM) -> Vec<f64> {
    model.params().iter().flat_map(|(_, p)| p.values().to_vec()).collect()
}

fn with_flat(model: &ToyVLM, values: &[f64]) -> ToyVLM {
    let mut m = model.clone();
    let mut off = 0;
    for (_, p) in m.params_mut() {
        let n = p.values().len();
        p.value.values_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    m
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model = ToyVLM::new(cfg, 5).unwrap();
    let imgs: Vec<Image> = (0..2).map(|_| random_image(cfg.image_size, &mut rng)).collect();
    let batch = BatchInputs::new(&cfg, &imgs.iter().collect::<Vec<_>>(), vec![vec![0, 3, 9], vec![0, 5]]).unwrap();
    let weights: Vec<f64> = (0..5 * cfg.vocab_size).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, graded) = probe(&model, &batch, &weights, Trainable::ALL);
    let analytic: Vec<f64> = graded
        .params()
        .iter()
        .flat_map(|(_, p)| p.value.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.values().len()]))
        .collect();
    let numeric = finite_diff_gradient(
        |x| Ok(probe(&with_flat(&model, x), &batch, &weights, Trainable::NONE).0),
        &flat(&model),
        1e-5,
    )
    .unwrap();
    let cmp = compare_gradients(&analytic, &numeric, 1e-4, 1e-6);
    assert!(cmp.passed, "{cmp:?}");
}

#[test]
fn projector_gradient_matches_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let model = ToyVLM::new(cfg, 8).unwrap();
    let img = random_image(cfg.image_size, &mut rng);
    let batch = BatchInputs::new(&cfg, &[&img], vec![vec![0, 7, 1]]).unwrap();
    let weights: Vec<f64> = (0..3 * cfg.vocab_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let only_p = Trainable {
        projector: true,
        ..Trainable::NONE
    };
    let (_, graded) = probe(&model, &batch, &weights, only_p);
    assert_eq!(graded.grad_norm_sq(Group::Vision), 0.0);
    assert_eq!(graded.grad_norm_sq(Group::Language), 0.0);
    let analytic: Vec<f64> = graded
        .group_params(Group::Projector)
        .iter()
        .flat_map(|p| p.value.grad().unwrap().to_vec())
        .collect();
    let start = model.group_params(Group::Vision).iter().map(|p| p.values().len()).sum::<usize>();
    let all = flat(&model);
    let p_len = analytic.len();
    let numeric = finite_diff_gradient(
        |x| {
            let mut v = all.clone();
            v[start..start + p_len].copy_from_slice(x);
            Ok(probe(&with_flat(&model, &v), &batch, &weights, Trainable::NONE).0)
        },
        &all[start..start + p_len],
        1e-5,
    )
    .unwrap();
    let cmp = compare_gradients(&analytic, &numeric, 1e-4, 1e-6);
    assert!(cmp.passed, "{cmp:?}");
}
